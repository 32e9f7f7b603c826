//! Functional executor. Every datapath value is a raw fixed-point integer;
//! results are bit-exact with the per-node fixed-point semantics.

use super::isa::{Block, Instr, SimdOp};
use super::program::{Program, TensorSlot};
use super::VmError;
use crate::archspec::{ArchConfig, FixedFormat};
use crate::fxp::{check_acc, div_round, requantize, saturate, FxpError, ACC_MAX, ACC_MIN};
use crate::scheduler::{Gather, Source};

/// Memories of one accelerator instance.
#[derive(Debug, Clone)]
pub struct MachineState {
    lanes: usize,
    fmt: FixedFormat,
    fingerprint: u64,
    pub dram0: Vec<u8>,
    pub dram1: Vec<u8>,
    /// `local_vectors * lanes` raw values.
    pub local: Vec<i64>,
    /// `accum_vectors * lanes` accumulator values.
    pub accum: Vec<i64>,
    gather: Option<Gather>,
}

#[derive(Clone, Copy)]
enum Mem {
    Dram0,
    Dram1,
    Local,
    Accum,
}

impl Mem {
    fn name(self) -> &'static str {
        match self {
            Mem::Dram0 => "DRAM0",
            Mem::Dram1 => "DRAM1",
            Mem::Local => "local memory",
            Mem::Accum => "accumulators",
        }
    }
}

impl MachineState {
    pub fn new(cfg: &ArchConfig) -> Self {
        let lanes = cfg.lanes();
        MachineState {
            lanes,
            fmt: cfg.fmt,
            fingerprint: cfg.fingerprint(),
            dram0: vec![],
            dram1: vec![],
            local: vec![0; cfg.local_vectors() as usize * lanes],
            accum: vec![0; cfg.accum_vectors() as usize * lanes],
            gather: None,
        }
    }

    fn eb(&self) -> usize {
        self.fmt.bytes() as usize
    }

    fn vb(&self) -> usize {
        self.lanes * self.eb()
    }

    /// Clears all memories and loads `p`'s constants.
    pub fn reset(&mut self, p: &Program) -> Result<(), VmError> {
        if p.fingerprint != self.fingerprint {
            return Err(VmError::Fingerprint {
                program: p.fingerprint,
                machine: self.fingerprint,
            });
        }
        self.dram0.clear();
        self.dram0.resize(p.dram0_vectors as usize * self.vb(), 0);
        if self.dram1 != p.consts {
            self.dram1.clone_from(&p.consts);
        }
        self.local.fill(0);
        self.accum.fill(0);
        self.gather = None;
        Ok(())
    }

    fn size(&self, m: Mem) -> u64 {
        let v = match m {
            Mem::Dram0 => self.dram0.len() / self.vb(),
            Mem::Dram1 => self.dram1.len() / self.vb(),
            Mem::Local => self.local.len() / self.lanes,
            Mem::Accum => self.accum.len() / self.lanes,
        };
        v as u64
    }

    fn check(&self, pc: usize, m: Mem, b: Block, rows: u32, width: u32) -> Result<(), VmError> {
        if rows == 0 || width == 0 {
            return Ok(());
        }
        let last = u64::from(b.addr) + u64::from(rows - 1) * u64::from(b.stride) + u64::from(width) - 1;
        let size = self.size(m);
        if last >= size {
            return Err(VmError::AddressFault {
                pc,
                mem: m.name(),
                addr: last,
                size,
            });
        }
        Ok(())
    }

    fn dram_get(bytes: &[u8], eb: usize, off: usize) -> i64 {
        match eb {
            1 => i64::from(bytes[off] as i8),
            2 => i64::from(i16::from_le_bytes([bytes[off], bytes[off + 1]])),
            _ => i64::from(i32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))),
        }
    }

    fn read_vector(&self, m: Mem, addr: usize, out: &mut [i64]) {
        let (eb, vb) = (self.eb(), self.vb());
        match m {
            Mem::Dram0 | Mem::Dram1 => {
                let bytes = if matches!(m, Mem::Dram0) {
                    &self.dram0
                } else {
                    &self.dram1
                };
                for (l, o) in out.iter_mut().enumerate() {
                    *o = Self::dram_get(bytes, eb, addr * vb + l * eb);
                }
            }
            Mem::Local => out.copy_from_slice(&self.local[addr * self.lanes..(addr + 1) * self.lanes]),
            Mem::Accum => out.copy_from_slice(&self.accum[addr * self.lanes..(addr + 1) * self.lanes]),
        }
    }

    /// Writes an NHWC tensor of raw values into DRAM0.
    pub fn write_tensor(&mut self, slot: TensorSlot, raws: &[i64]) -> Result<(), VmError> {
        if raws.len() != slot.elements() {
            return Err(VmError::Input(format!(
                "expected {} values for a {}x{}x{} tensor, got {}",
                slot.elements(),
                slot.h,
                slot.w,
                slot.c,
                raws.len()
            )));
        }
        let (eb, vb, lanes) = (self.eb(), self.vb(), self.lanes);
        let (c, cb) = (slot.c as usize, slot.blocks(lanes));
        let base = slot.addr as usize * vb;
        let end = base + slot.vectors(lanes) * vb;
        if end > self.dram0.len() {
            return Err(VmError::Input("tensor slot lies outside DRAM0".into()));
        }
        self.dram0[base..end].fill(0);
        for (i, &v) in raws.iter().enumerate() {
            let (px, ch) = (i / c, i % c);
            let off = base + (px * cb + ch / lanes) * vb + (ch % lanes) * eb;
            let v = saturate(v, self.fmt);
            self.dram0[off..off + eb].copy_from_slice(&v.to_le_bytes()[..eb]);
        }
        Ok(())
    }

    /// Reads an NHWC tensor of raw values from DRAM0.
    pub fn read_tensor(&self, slot: TensorSlot) -> Vec<i64> {
        let (eb, vb, lanes) = (self.eb(), self.vb(), self.lanes);
        let (c, cb) = (slot.c as usize, slot.blocks(lanes));
        let base = slot.addr as usize * vb;
        (0..slot.elements())
            .map(|i| {
                let (px, ch) = (i / c, i % c);
                Self::dram_get(&self.dram0, eb, base + (px * cb + ch / lanes) * vb + (ch % lanes) * eb)
            })
            .collect()
    }

    pub fn run(&mut self, p: &Program) -> Result<(), VmError> {
        for (pc, i) in p.instrs.iter().enumerate() {
            self.step(pc, i)?;
        }
        Ok(())
    }

    pub fn step(&mut self, pc: usize, instr: &Instr) -> Result<(), VmError> {
        let lanes = self.lanes;
        let mut v = vec![0i64; lanes];
        match *instr {
            Instr::Config(g) => self.gather = Some(g),
            Instr::LoadWeights { dram, local, vectors } => {
                let span = |addr| Block { addr, stride: 0 };
                self.check(pc, Mem::Dram1, span(dram), 1, vectors)?;
                self.check(pc, Mem::Local, span(local), 1, vectors)?;
                for k in 0..vectors as usize {
                    self.read_vector(Mem::Dram1, dram as usize + k, &mut v);
                    let d = (local as usize + k) * lanes;
                    self.local[d..d + lanes].copy_from_slice(&v);
                }
            }
            Instr::LoadActivations {
                src,
                dst,
                rows,
                width,
                row0,
                from_local,
                gather,
            } => {
                let sm = if from_local { Mem::Local } else { Mem::Dram0 };
                self.check(pc, Mem::Local, dst, rows, width)?;
                if gather {
                    let g = self.gather.ok_or_else(|| VmError::Illegal {
                        pc,
                        reason: "gathered load before any config".into(),
                    })?;
                    if width as usize != g.row_vectors(lanes) || (row0 + rows) as usize > g.rows() {
                        return Err(VmError::Illegal {
                            pc,
                            reason: "gathered load does not match the configured window".into(),
                        });
                    }
                    self.check(pc, sm, src, (g.in_h * g.in_w) as u32, g.in_blocks(lanes) as u32)?;
                    let (eb, vb) = (self.eb(), self.vb());
                    for r in 0..rows as usize {
                        for j in 0..width as usize {
                            for (l, o) in v.iter_mut().enumerate() {
                                *o = match g.source(lanes, row0 as usize + r, j, l) {
                                    Source::Elem { pixel, c } => {
                                        let a = src.addr as usize + pixel * src.stride as usize + c / lanes;
                                        match sm {
                                            Mem::Local => self.local[a * lanes + c % lanes],
                                            _ => Self::dram_get(&self.dram0, eb, a * vb + (c % lanes) * eb),
                                        }
                                    }
                                    Source::Fill => g.fill,
                                    Source::Zero => 0,
                                };
                            }
                            let d = (dst.addr as usize + r * dst.stride as usize + j) * lanes;
                            self.local[d..d + lanes].copy_from_slice(&v);
                        }
                    }
                } else {
                    self.check(pc, sm, src, rows, width)?;
                    for r in 0..rows as usize {
                        for j in 0..width as usize {
                            self.read_vector(sm, src.addr as usize + r * src.stride as usize + j, &mut v);
                            let d = (dst.addr as usize + r * dst.stride as usize + j) * lanes;
                            self.local[d..d + lanes].copy_from_slice(&v);
                        }
                    }
                }
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
                let (k_rows, n) = (k_rows as usize, n as usize);
                if k_rows > lanes || n > lanes {
                    return Err(VmError::Illegal {
                        pc,
                        reason: format!("{k_rows}x{n} pass exceeds {lanes} lanes"),
                    });
                }
                let one = |addr| Block { addr, stride: 0 };
                self.check(pc, Mem::Local, one(weights), 1, k_rows as u32)?;
                if has_bias && !accumulate {
                    self.check(pc, Mem::Local, one(bias), 1, 1)?;
                }
                self.check(pc, Mem::Local, input, rows, 1)?;
                self.check(pc, Mem::Accum, acc, rows, 1)?;
                let bp = self.fmt.binary_point;
                let w = &self.local[weights as usize * lanes..(weights as usize + k_rows) * lanes];
                for r in 0..rows as usize {
                    let xi = (input.addr as usize + r * input.stride as usize) * lanes;
                    let x = &self.local[xi..xi + k_rows];
                    let ai = (acc.addr as usize + r * acc.stride as usize) * lanes;
                    for col in 0..lanes {
                        if col >= n {
                            if !accumulate {
                                self.accum[ai + col] = 0;
                            }
                            continue;
                        }
                        let mut s = if accumulate {
                            self.accum[ai + col]
                        } else if has_bias {
                            self.local[bias as usize * lanes + col] << bp
                        } else {
                            0
                        };
                        for (i, &xv) in x.iter().enumerate() {
                            // |s| < 2^47 and |product| <= 2^62, so the i64 sum cannot wrap
                            s += xv * w[i * lanes + col];
                            if !(ACC_MIN..=ACC_MAX).contains(&s) {
                                return Err(VmError::Arith {
                                    pc,
                                    source: FxpError::AccumulatorOverflow(i128::from(s)),
                                });
                            }
                        }
                        self.accum[ai + col] = s;
                    }
                }
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
            } => self.simd(pc, op, dst, a, b, rows, width, from_acc, accumulate)?,
            Instr::SaveActivations { dst, src, rows, width } => {
                self.check(pc, Mem::Local, src, rows, width)?;
                self.check(pc, Mem::Dram0, dst, rows, width)?;
                let (eb, vb) = (self.eb(), self.vb());
                for r in 0..rows as usize {
                    for j in 0..width as usize {
                        let s = (src.addr as usize + r * src.stride as usize + j) * lanes;
                        let d = (dst.addr as usize + r * dst.stride as usize + j) * vb;
                        for l in 0..lanes {
                            let val = self.local[s + l];
                            self.dram0[d + l * eb..d + (l + 1) * eb].copy_from_slice(&val.to_le_bytes()[..eb]);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn simd(
        &mut self,
        pc: usize,
        op: SimdOp,
        dst: Block,
        a: Block,
        b: Block,
        rows: u32,
        width: u32,
        from_acc: bool,
        accumulate: bool,
    ) -> Result<(), VmError> {
        let lanes = self.lanes;
        let fmt = self.fmt;
        let at = |blk: Block, r: usize, j: usize| blk.addr as usize + r * blk.stride as usize + j;
        let a_mem = if from_acc || op == SimdOp::Mean {
            Mem::Accum
        } else {
            Mem::Local
        };
        let d_mem = if op == SimdOp::Accumulate {
            Mem::Accum
        } else {
            Mem::Local
        };
        self.check(pc, a_mem, a, rows, width)?;
        self.check(pc, d_mem, dst, rows, width)?;
        if matches!(op, SimdOp::Add | SimdOp::Max) {
            self.check(pc, Mem::Local, b, rows, width)?;
        }
        let count = i128::from(b.addr);
        if op == SimdOp::Mean && count == 0 {
            return Err(VmError::Illegal {
                pc,
                reason: "mean over zero elements".into(),
            });
        }
        if op == SimdOp::Accumulate && !accumulate {
            for r in 0..rows as usize {
                for j in 0..width as usize {
                    let d = at(dst, r, j) * lanes;
                    self.accum[d..d + lanes].fill(0);
                }
            }
        }
        let mut av = vec![0i64; lanes];
        let mut bv = vec![0i64; lanes];
        for r in 0..rows as usize {
            for j in 0..width as usize {
                self.read_vector(a_mem, at(a, r, j), &mut av);
                if from_acc && op != SimdOp::Mean {
                    for x in av.iter_mut() {
                        *x = requantize(*x, fmt).raw;
                    }
                }
                if matches!(op, SimdOp::Add | SimdOp::Max) {
                    self.read_vector(Mem::Local, at(b, r, j), &mut bv);
                }
                let d = at(dst, r, j) * lanes;
                for l in 0..lanes {
                    let x = av[l];
                    let out = match op {
                        SimdOp::Identity => x,
                        SimdOp::Relu => x.max(0),
                        SimdOp::Add => saturate(x + bv[l], fmt),
                        SimdOp::Max => x.max(bv[l]),
                        SimdOp::Accumulate => {
                            let s = i128::from(self.accum[d + l]) + i128::from(x);
                            self.accum[d + l] = check_acc(s).map_err(|source| VmError::Arith { pc, source })?;
                            continue;
                        }
                        SimdOp::Mean => saturate(div_round(i128::from(x), count, fmt.rounding) as i64, fmt),
                    };
                    self.local[d + l] = out;
                }
            }
        }
        Ok(())
    }
}

/// Runs `p` on one NHWC input of raw values and returns the raw output.
pub fn execute(p: &Program, input: &[i64], state: &mut MachineState) -> Result<Vec<i64>, VmError> {
    state.reset(p)?;
    state.write_tensor(p.input, input)?;
    state.run(p)?;
    Ok(state.read_tensor(p.output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{preset, Preset};
    use crate::fxp::quantize_raw;
    use crate::nnir::{
        build_resnet20, infer_shapes, quantized_forward, random_input, random_weights, DType, Graph, LayerNode, Op,
        Tensor, TensorShape, WeightBlob, WeightRef,
    };
    use crate::scheduler::{schedule_graph, Strategy};
    use crate::vm::emit;

    fn small_cfg() -> ArchConfig {
        let mut c = preset(Preset::Baseline);
        c.array_rows = 4;
        c.array_cols = 4;
        c.local_mem_kv = 1;
        c.accum_kv = 1;
        c
    }

    fn quantized(t: &Tensor, cfg: &ArchConfig) -> Vec<i64> {
        t.data.iter().map(|&v| quantize_raw(v, cfg.fmt).unwrap()).collect()
    }

    /// input -> conv(k, stride, pad) -> relu, plus optional residual add.
    fn conv_graph(hw: usize, c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Graph {
        let mut nodes = vec![
            LayerNode {
                id: 0,
                name: "in".into(),
                op: Op::Input,
                inputs: vec![],
                out_shape: Some(TensorShape::hwc(hw, hw, c)),
                weights: None,
            },
            LayerNode {
                id: 1,
                name: "conv".into(),
                op: Op::Conv2d {
                    kernel_h: k,
                    kernel_w: k,
                    stride,
                    padding: pad,
                    out_channels: out_c,
                },
                inputs: vec![0],
                out_shape: None,
                weights: Some(WeightRef {
                    tensor: 0,
                    shape: vec![k, k, c, out_c],
                    offset: 0,
                    dtype: DType::Float32,
                    bias: true,
                }),
            },
            LayerNode {
                id: 2,
                name: "relu".into(),
                op: Op::Relu,
                inputs: vec![1],
                out_shape: None,
                weights: None,
            },
        ];
        nodes.push(LayerNode {
            id: 3,
            name: "pool".into(),
            op: Op::MaxPool {
                kernel: 2,
                stride: 2,
                padding: 0,
            },
            inputs: vec![2],
            out_shape: None,
            weights: None,
        });
        let g = Graph {
            nodes,
            input: 0,
            output: 3,
        };
        infer_shapes(&g, TensorShape::hwc(hw, hw, c)).unwrap()
    }

    fn identity_conv(c: usize) -> (Graph, WeightBlob) {
        let mut g = conv_graph(3, c, c, 1, 1, 0);
        g.nodes.truncate(2);
        g.output = 1;
        let mut w = vec![0.0f32; c * c + c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        (g, WeightBlob::from_floats(w))
    }

    #[test]
    fn identity_conv_returns_quantized_input() {
        let cfg = small_cfg();
        let (g, blob) = identity_conv(6);
        let x = random_input(g.input_shape(1, 0), 3);
        for s in Strategy::ALL {
            let gs = schedule_graph(&g, &cfg, s).unwrap();
            let p = emit(&gs, &g, &blob, &cfg).unwrap();
            let mut st = MachineState::new(&cfg);
            let q = quantized(&x, &cfg);
            assert_eq!(execute(&p, &q, &mut st).unwrap(), q, "{s}");
        }
    }

    #[test]
    fn small_conv_matches_oracle_for_every_strategy() {
        let cfg = small_cfg();
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (5, 1, 2)] {
            let g = conv_graph(8, 5, 7, k, stride, pad);
            let blob = random_weights(&g, 11);
            let x = random_input(g.input_shape(1, 0), 5);
            let want = &quantized_forward(&g, &blob, &x, cfg.fmt).unwrap()[g.output];
            for s in Strategy::ALL {
                let gs = match schedule_graph(&g, &cfg, s) {
                    Ok(gs) => gs,
                    // lowered inputs of the larger kernels do not fit on chip
                    Err(_) if s == Strategy::LocalResident => continue,
                    Err(e) => panic!("{e}"),
                };
                let p = emit(&gs, &g, &blob, &cfg).unwrap();
                let got = execute(&p, &quantized(&x, &cfg), &mut MachineState::new(&cfg)).unwrap();
                assert_eq!(&got, want, "k={k} stride={stride} pad={pad} {s}");
            }
        }
    }

    #[test]
    fn resnet20_bit_exact_across_presets() {
        let g = build_resnet20(10);
        let blob = random_weights(&g, 1);
        let x = random_input(g.input_shape(1, 0), 2);
        let want = quantized_forward(&g, &blob, &x, preset(Preset::Baseline).fmt).unwrap();
        for (pr, s) in [
            (Preset::Baseline, Strategy::PartitionedWeightStationary),
            (Preset::Baseline, Strategy::InputStationary),
            (Preset::Uram, Strategy::PartitionedWeightStationary),
            (Preset::UramStrategy, Strategy::Auto),
        ] {
            let cfg = preset(pr);
            let gs = schedule_graph(&g, &cfg, s).unwrap();
            let p = emit(&gs, &g, &blob, &cfg).unwrap();
            let mut st = MachineState::new(&cfg);
            let got = execute(&p, &quantized(&x, &cfg), &mut st).unwrap();
            assert_eq!(got, want[g.output], "{} {s}", pr.name());
            // every saved intermediate matches its node too
            for (l, ls) in p.layers.iter().zip(&gs.layers) {
                if let Some(slot) = l.saved {
                    assert_eq!(st.read_tensor(slot), want[ls.layer.output], "{}", l.name);
                }
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let cfg = small_cfg();
        let (g, blob) = identity_conv(4);
        let gs = schedule_graph(&g, &cfg, Strategy::Auto).unwrap();
        let p = emit(&gs, &g, &blob, &cfg).unwrap();
        let mut other = cfg.clone();
        other.host_clock_hz += 1;
        let err = execute(&p, &[0; 36], &mut MachineState::new(&other)).unwrap_err();
        assert!(matches!(err, VmError::Fingerprint { .. }));
    }

    #[test]
    fn address_fault_reported() {
        let cfg = small_cfg();
        let (g, blob) = identity_conv(4);
        let gs = schedule_graph(&g, &cfg, Strategy::PartitionedWeightStationary).unwrap();
        let mut p = emit(&gs, &g, &blob, &cfg).unwrap();
        p.instrs.push(Instr::LoadWeights {
            dram: 0,
            local: cfg.local_vectors() as u32,
            vectors: 1,
        });
        let err = execute(&p, &[0; 36], &mut MachineState::new(&cfg)).unwrap_err();
        assert!(
            matches!(
                err,
                VmError::AddressFault {
                    mem: "local memory",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn accumulator_overflow_is_an_error() {
        let cfg = small_cfg();
        let mut st = MachineState::new(&cfg);
        st.local[..8].fill(cfg.fmt.raw_max());
        st.accum[0] = ACC_MAX - 1000;
        let mm = Instr::MatMul {
            bias: 0,
            weights: 0,
            input: Block { addr: 1, stride: 0 },
            acc: Block::default(),
            rows: 1,
            k_rows: 1,
            n: 1,
            accumulate: true,
            has_bias: false,
        };
        let err = st.step(7, &mm).unwrap_err();
        assert!(matches!(err, VmError::Arith { pc: 7, .. }), "{err}");
        // the same product from a small start fits
        st.accum[0] = 0;
        st.step(0, &mm).unwrap();
        assert_eq!(st.accum[0], 32767 * 32767);
    }

    #[test]
    fn wrong_input_length_rejected() {
        let cfg = small_cfg();
        let (g, blob) = identity_conv(4);
        let gs = schedule_graph(&g, &cfg, Strategy::Auto).unwrap();
        let p = emit(&gs, &g, &blob, &cfg).unwrap();
        assert!(matches!(
            execute(&p, &[0; 5], &mut MachineState::new(&cfg)),
            Err(VmError::Input(_))
        ));
    }
}
