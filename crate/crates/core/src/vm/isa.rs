//! Instruction set and its fixed-width binary encoding.
//!
//! Every instruction is 36 bytes: opcode, flags, sub-op, one reserved byte,
//! then eight little-endian `u32` operands. Addresses are in vectors.

use super::VmError;
use crate::scheduler::{Gather, GatherMode};

pub const INSTR_BYTES: usize = 36;

pub mod flag {
    pub const ACCUMULATE: u8 = 1;
    pub const HAS_BIAS: u8 = 2;
    pub const LOCAL_SRC: u8 = 4;
    pub const GATHER: u8 = 8;
    pub const FROM_ACC: u8 = 16;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    LoadWeights = 0,
    LoadActivations = 1,
    MatMul = 2,
    Simd = 3,
    SaveActivations = 4,
    Config = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SimdOp {
    /// Copy; requantizes when reading the accumulators.
    Identity = 0,
    Relu = 1,
    /// Saturating add.
    Add = 2,
    Max = 3,
    /// Column sums of local rows into the accumulators.
    Accumulate = 4,
    /// Accumulator columns divided by `b`, written to local memory.
    Mean = 5,
}

impl SimdOp {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => SimdOp::Identity,
            1 => SimdOp::Relu,
            2 => SimdOp::Add,
            3 => SimdOp::Max,
            4 => SimdOp::Accumulate,
            5 => SimdOp::Mean,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimdOp::Identity => "identity",
            SimdOp::Relu => "relu",
            SimdOp::Add => "add",
            SimdOp::Max => "max",
            SimdOp::Accumulate => "accumulate",
            SimdOp::Mean => "mean",
        }
    }
}

/// Strided block of `rows x width` vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Block {
    pub addr: u32,
    pub stride: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    /// Sets the gather registers used by gathered activation loads.
    Config(Gather),
    /// DRAM1 -> local, contiguous.
    LoadWeights { dram: u32, local: u32, vectors: u32 },
    /// DRAM0 (or local when `from_local`) -> local. A gathered load
    /// produces lowered rows `row0..row0 + rows` of the configured window
    /// from the tensor at `src.addr`; a plain load copies `rows x width`.
    LoadActivations {
        src: Block,
        dst: Block,
        rows: u32,
        width: u32,
        row0: u32,
        from_local: bool,
        gather: bool,
    },
    /// `rows` input vectors times `k_rows` weight rows into `n` accumulator
    /// lanes; the first pass seeds the accumulator with the bias row.
    MatMul {
        bias: u32,
        weights: u32,
        input: Block,
        acc: Block,
        rows: u32,
        k_rows: u16,
        n: u16,
        accumulate: bool,
        has_bias: bool,
    },
    Simd {
        op: SimdOp,
        dst: Block,
        a: Block,
        b: Block,
        rows: u32,
        width: u32,
        from_acc: bool,
        accumulate: bool,
    },
    /// local -> DRAM0.
    SaveActivations {
        dst: Block,
        src: Block,
        rows: u32,
        width: u32,
    },
}

impl Instr {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instr::Config(_) => Opcode::Config,
            Instr::LoadWeights { .. } => Opcode::LoadWeights,
            Instr::LoadActivations { .. } => Opcode::LoadActivations,
            Instr::MatMul { .. } => Opcode::MatMul,
            Instr::Simd { .. } => Opcode::Simd,
            Instr::SaveActivations { .. } => Opcode::SaveActivations,
        }
    }

    pub fn encode(&self) -> [u8; INSTR_BYTES] {
        let mut flags = 0u8;
        let mut set = |cond: bool, f: u8| {
            if cond {
                flags |= f
            }
        };
        let (subop, ops): (u8, [u32; 8]) = match *self {
            Instr::Config(g) => {
                let hi = |a: usize, b: usize| ((a as u32) << 16) | b as u32;
                (
                    0,
                    [
                        hi(g.in_h, g.in_w),
                        g.in_c as u32,
                        hi(g.kernel_h, g.kernel_w),
                        g.stride as u32,
                        g.padding as u32,
                        hi(g.out_h, g.out_w),
                        g.fill as i32 as u32,
                        match g.mode {
                            GatherMode::Packed => 0,
                            GatherMode::PerPosition => 1,
                        },
                    ],
                )
            }
            Instr::LoadWeights { dram, local, vectors } => (0, [dram, local, vectors, 0, 0, 0, 0, 0]),
            Instr::LoadActivations {
                src,
                dst,
                rows,
                width,
                row0,
                from_local,
                gather,
            } => {
                set(from_local, flag::LOCAL_SRC);
                set(gather, flag::GATHER);
                (0, [src.addr, src.stride, dst.addr, dst.stride, rows, width, row0, 0])
            }
            Instr::MatMul {
                bias,
                weights,
                input,
                acc,
                rows,
                k_rows,
                n,
                accumulate,
                has_bias,
            } => {
                set(accumulate, flag::ACCUMULATE);
                set(has_bias, flag::HAS_BIAS);
                (
                    0,
                    [
                        bias,
                        weights,
                        input.addr,
                        input.stride,
                        rows,
                        acc.addr,
                        acc.stride,
                        (u32::from(k_rows) << 16) | u32::from(n),
                    ],
                )
            }
            Instr::Simd {
                op,
                dst,
                a,
                b,
                rows,
                width,
                from_acc,
                accumulate,
            } => {
                set(from_acc, flag::FROM_ACC);
                set(accumulate, flag::ACCUMULATE);
                (
                    op as u8,
                    [dst.addr, a.addr, b.addr, rows, width, dst.stride, a.stride, b.stride],
                )
            }
            Instr::SaveActivations { dst, src, rows, width } => {
                (0, [dst.addr, dst.stride, src.addr, src.stride, rows, width, 0, 0])
            }
        };
        let mut out = [0u8; INSTR_BYTES];
        out[0] = self.opcode() as u8;
        out[1] = flags;
        out[2] = subop;
        for (i, v) in ops.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, VmError> {
        if bytes.len() != INSTR_BYTES {
            return Err(VmError::Format(format!("instruction record of {} bytes", bytes.len())));
        }
        let op = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let (flags, subop) = (bytes[1], bytes[2]);
        let has = |f: u8| flags & f != 0;
        let blk = |a: usize, s: usize| Block {
            addr: op(a),
            stride: op(s),
        };
        let lo = |v: u32| (v & 0xffff) as usize;
        let hi = |v: u32| (v >> 16) as usize;
        Ok(match bytes[0] {
            0 => Instr::LoadWeights {
                dram: op(0),
                local: op(1),
                vectors: op(2),
            },
            1 => Instr::LoadActivations {
                src: blk(0, 1),
                dst: blk(2, 3),
                rows: op(4),
                width: op(5),
                row0: op(6),
                from_local: has(flag::LOCAL_SRC),
                gather: has(flag::GATHER),
            },
            2 => Instr::MatMul {
                bias: op(0),
                weights: op(1),
                input: blk(2, 3),
                rows: op(4),
                acc: blk(5, 6),
                k_rows: (op(7) >> 16) as u16,
                n: (op(7) & 0xffff) as u16,
                accumulate: has(flag::ACCUMULATE),
                has_bias: has(flag::HAS_BIAS),
            },
            3 => Instr::Simd {
                op: SimdOp::from_u8(subop).ok_or_else(|| VmError::Format(format!("unknown simd sub-op {subop}")))?,
                dst: blk(0, 5),
                a: blk(1, 6),
                b: blk(2, 7),
                rows: op(3),
                width: op(4),
                from_acc: has(flag::FROM_ACC),
                accumulate: has(flag::ACCUMULATE),
            },
            4 => Instr::SaveActivations {
                dst: blk(0, 1),
                src: blk(2, 3),
                rows: op(4),
                width: op(5),
            },
            5 => Instr::Config(Gather {
                in_h: hi(op(0)),
                in_w: lo(op(0)),
                in_c: op(1) as usize,
                kernel_h: hi(op(2)),
                kernel_w: lo(op(2)),
                stride: op(3) as usize,
                padding: op(4) as usize,
                out_h: hi(op(5)),
                out_w: lo(op(5)),
                fill: i64::from(op(6) as i32),
                mode: match op(7) {
                    0 => GatherMode::Packed,
                    1 => GatherMode::PerPosition,
                    m => return Err(VmError::Format(format!("unknown gather mode {m}"))),
                },
            }),
            other => return Err(VmError::Format(format!("unknown opcode {other}"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block() -> impl Strategy<Value = Block> {
        (any::<u32>(), any::<u32>()).prop_map(|(addr, stride)| Block { addr, stride })
    }

    fn simd_op() -> impl Strategy<Value = SimdOp> {
        prop::sample::select(vec![
            SimdOp::Identity,
            SimdOp::Relu,
            SimdOp::Add,
            SimdOp::Max,
            SimdOp::Accumulate,
            SimdOp::Mean,
        ])
    }

    fn instr() -> impl Strategy<Value = Instr> {
        prop_oneof![
            (any::<u32>(), any::<u32>(), any::<u32>()).prop_map(|(dram, local, vectors)| Instr::LoadWeights {
                dram,
                local,
                vectors
            }),
            (
                block(),
                block(),
                any::<u32>(),
                any::<u32>(),
                any::<u32>(),
                any::<bool>(),
                any::<bool>()
            )
                .prop_map(
                    |(src, dst, rows, width, row0, from_local, gather)| Instr::LoadActivations {
                        src,
                        dst,
                        rows,
                        width,
                        row0,
                        from_local,
                        gather
                    }
                ),
            (
                any::<u32>(),
                any::<u32>(),
                block(),
                block(),
                any::<u32>(),
                any::<u16>(),
                any::<u16>(),
                any::<bool>(),
                any::<bool>()
            )
                .prop_map(|(bias, weights, input, acc, rows, k_rows, n, accumulate, has_bias)| {
                    Instr::MatMul {
                        bias,
                        weights,
                        input,
                        acc,
                        rows,
                        k_rows,
                        n,
                        accumulate,
                        has_bias,
                    }
                }),
            (
                simd_op(),
                block(),
                block(),
                block(),
                any::<u32>(),
                any::<u32>(),
                any::<bool>(),
                any::<bool>()
            )
                .prop_map(|(op, dst, a, b, rows, width, from_acc, accumulate)| Instr::Simd {
                    op,
                    dst,
                    a,
                    b,
                    rows,
                    width,
                    from_acc,
                    accumulate
                }),
            (block(), block(), any::<u32>(), any::<u32>()).prop_map(|(dst, src, rows, width)| Instr::SaveActivations {
                dst,
                src,
                rows,
                width
            }),
            (
                0usize..65536,
                0usize..65536,
                0usize..1 << 20,
                0usize..65536,
                0usize..65536,
                any::<i16>(),
                any::<bool>()
            )
                .prop_map(|(h, w, c, k, s, fill, packed)| Instr::Config(Gather {
                    in_h: h,
                    in_w: w,
                    in_c: c,
                    kernel_h: k,
                    kernel_w: w,
                    stride: s,
                    padding: k,
                    out_h: s,
                    out_w: h,
                    fill: i64::from(fill),
                    mode: if packed {
                        GatherMode::Packed
                    } else {
                        GatherMode::PerPosition
                    },
                })),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(i in instr()) {
            let bytes = i.encode();
            prop_assert_eq!(bytes[0], i.opcode() as u8);
            prop_assert_eq!(Instr::decode(&bytes).unwrap(), i);
        }
    }

    #[test]
    fn bad_records_rejected() {
        let mut b = Instr::LoadWeights {
            dram: 1,
            local: 2,
            vectors: 3,
        }
        .encode();
        b[0] = 9;
        assert!(Instr::decode(&b).is_err());
        assert!(Instr::decode(&b[..10]).is_err());
    }

    #[test]
    fn fixed_layout() {
        let b = Instr::MatMul {
            bias: 1,
            weights: 2,
            input: Block { addr: 3, stride: 4 },
            acc: Block { addr: 6, stride: 7 },
            rows: 5,
            k_rows: 32,
            n: 16,
            accumulate: true,
            has_bias: false,
        }
        .encode();
        assert_eq!(&b[..4], &[2, flag::ACCUMULATE, 0, 0]);
        assert_eq!(&b[32..36], &((32u32 << 16) | 16).to_le_bytes());
    }
}
