//! The compiled program and its on-disk form.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SACCPROG" | version u32 | fingerprint u64 | lanes u32 | dram0_vectors u32
//! input slot | output slot                       (4 x u32 each: addr, h, w, c)
//! layer count u32 | per layer: start u32, end u32, saved u8, slot, name len u32, name
//! instruction count u32 | 36-byte records
//! const byte count u64 | DRAM1 image
//! ```

use std::path::Path;

use super::isa::{Instr, INSTR_BYTES};
use super::VmError;

pub const PROGRAM_MAGIC: &[u8; 8] = b"SACCPROG";
pub const PROGRAM_VERSION: u32 = 1;

/// An NHWC tensor in DRAM0, one row of `ceil(c / lanes)` vectors per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TensorSlot {
    pub addr: u32,
    pub h: u32,
    pub w: u32,
    pub c: u32,
}

impl TensorSlot {
    pub fn pixels(&self) -> usize {
        self.h as usize * self.w as usize
    }

    pub fn blocks(&self, lanes: usize) -> usize {
        (self.c as usize).div_ceil(lanes)
    }

    pub fn vectors(&self, lanes: usize) -> usize {
        self.pixels() * self.blocks(lanes)
    }

    pub fn elements(&self) -> usize {
        self.pixels() * self.c as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMarker {
    pub name: String,
    /// Instruction range `start..end`.
    pub start: u32,
    pub end: u32,
    /// Where the layer leaves its output in DRAM0, if it saves one.
    pub saved: Option<TensorSlot>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub fingerprint: u64,
    pub lanes: u32,
    pub dram0_vectors: u32,
    pub input: TensorSlot,
    pub output: TensorSlot,
    pub layers: Vec<LayerMarker>,
    pub instrs: Vec<Instr>,
    /// DRAM1 image (quantized weights and biases).
    pub consts: Vec<u8>,
}

fn put_slot(out: &mut Vec<u8>, s: &TensorSlot) {
    for v in [s.addr, s.h, s.w, s.c] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VmError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| VmError::Format(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, VmError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, VmError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, VmError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn slot(&mut self) -> Result<TensorSlot, VmError> {
        Ok(TensorSlot {
            addr: self.u32()?,
            h: self.u32()?,
            w: self.u32()?,
            c: self.u32()?,
        })
    }
}

impl Program {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.instrs.len() * INSTR_BYTES + self.consts.len());
        out.extend_from_slice(PROGRAM_MAGIC);
        out.extend_from_slice(&PROGRAM_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.lanes.to_le_bytes());
        out.extend_from_slice(&self.dram0_vectors.to_le_bytes());
        put_slot(&mut out, &self.input);
        put_slot(&mut out, &self.output);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&l.start.to_le_bytes());
            out.extend_from_slice(&l.end.to_le_bytes());
            out.push(u8::from(l.saved.is_some()));
            put_slot(&mut out, &l.saved.unwrap_or_default());
            out.extend_from_slice(&(l.name.len() as u32).to_le_bytes());
            out.extend_from_slice(l.name.as_bytes());
        }
        out.extend_from_slice(&(self.instrs.len() as u32).to_le_bytes());
        for i in &self.instrs {
            out.extend_from_slice(&i.encode());
        }
        out.extend_from_slice(&(self.consts.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.consts);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VmError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != PROGRAM_MAGIC {
            return Err(VmError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != PROGRAM_VERSION {
            return Err(VmError::Format(format!("unsupported version {version}")));
        }
        let fingerprint = r.u64()?;
        let lanes = r.u32()?;
        let dram0_vectors = r.u32()?;
        let input = r.slot()?;
        let output = r.slot()?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let start = r.u32()?;
            let end = r.u32()?;
            let saved = r.u8()? != 0;
            let slot = r.slot()?;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| VmError::Format("layer name is not UTF-8".into()))?;
            layers.push(LayerMarker {
                name,
                start,
                end,
                saved: saved.then_some(slot),
            });
        }
        let n_instrs = r.u32()? as usize;
        let instrs = (0..n_instrs)
            .map(|_| Instr::decode(r.take(INSTR_BYTES)?))
            .collect::<Result<Vec<_>, _>>()?;
        let n_consts = usize::try_from(r.u64()?).map_err(|_| VmError::Format("const section too large".into()))?;
        let consts = r.take(n_consts)?.to_vec();
        if r.at != bytes.len() {
            return Err(VmError::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let p = Program {
            fingerprint,
            lanes,
            dram0_vectors,
            input,
            output,
            layers,
            instrs,
            consts,
        };
        p.check_markers()?;
        Ok(p)
    }

    fn check_markers(&self) -> Result<(), VmError> {
        let mut at = 0;
        for l in &self.layers {
            if l.start != at || l.end < l.start || l.end as usize > self.instrs.len() {
                return Err(VmError::Format(format!("layer marker `{}` out of order", l.name)));
            }
            at = l.end;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), VmError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| VmError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, VmError> {
        let bytes = std::fs::read(path).map_err(|source| VmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn layer_instrs(&self, i: usize) -> &[Instr] {
        let l = &self.layers[i];
        &self.instrs[l.start as usize..l.end as usize]
    }

    /// Human-readable listing, one instruction per line under layer headers.
    pub fn listing(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.layers.iter().enumerate() {
            s.push_str(&format!("; layer {i} {}\n", l.name));
            for (pc, ins) in (l.start..l.end).zip(self.layer_instrs(i)) {
                s.push_str(&format!("{pc:6}  {ins:?}\n"));
            }
        }
        s
    }
}
