//! Cycle-approximate cost model.
//!
//! Phases run one after another: every instruction costs its compute or
//! transfer cycles plus a fixed dispatch overhead. DRAM transfers move
//! `bytes_per_cycle` bytes per accelerator cycle, the narrower of the
//! accelerator port and the host port scaled by the clock ratio.

use num_rational::Ratio;
use serde::Serialize;

use super::isa::Instr;
use super::program::Program;
use crate::archspec::ArchConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostModel {
    pub bytes_per_cycle: Ratio<u64>,
    pub array_rows: u64,
    pub array_cols: u64,
    pub vector_bytes: u64,
    /// Dispatch cycles charged to every instruction.
    pub overhead_cycles: u64,
    pub accel_clock_hz: u64,
    /// Overlap weight (DRAM1) and activation (DRAM0) transfers that sit
    /// between the same pair of compute instructions.
    pub port_parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Port {
    Dram0,
    Dram1,
}

impl CostModel {
    pub const DEFAULT_OVERHEAD: u64 = 4;

    pub fn from_arch(cfg: &ArchConfig) -> Self {
        let accel = Ratio::from_integer(u64::from(cfg.accel_port_bits));
        let host = Ratio::new(u64::from(cfg.host_port_bits) * cfg.host_clock_hz, cfg.accel_clock_hz);
        CostModel {
            bytes_per_cycle: accel.min(host) / 8,
            array_rows: u64::from(cfg.array_rows),
            array_cols: u64::from(cfg.array_cols),
            vector_bytes: cfg.vector_bytes(),
            overhead_cycles: Self::DEFAULT_OVERHEAD,
            accel_clock_hz: cfg.accel_clock_hz,
            port_parallel: false,
        }
    }

    /// `ceil(bytes / bytes_per_cycle)`.
    pub fn transfer_cycles(&self, bytes: u64) -> u64 {
        let (n, d) = (
            *self.bytes_per_cycle.numer() as u128,
            *self.bytes_per_cycle.denom() as u128,
        );
        (u128::from(bytes) * d).div_ceil(n) as u64
    }

    /// Compute cycles, and the port and byte count of a DRAM transfer.
    fn cost(&self, i: &Instr) -> (u64, Option<(Port, u64)>) {
        let vb = self.vector_bytes;
        let area = |rows: u32, width: u32| u64::from(rows) * u64::from(width);
        match *i {
            Instr::Config(_) => (0, None),
            Instr::LoadWeights { vectors, .. } => (0, Some((Port::Dram1, u64::from(vectors) * vb))),
            Instr::LoadActivations {
                rows,
                width,
                from_local,
                ..
            } => {
                if from_local {
                    (area(rows, width), None)
                } else {
                    (0, Some((Port::Dram0, area(rows, width) * vb)))
                }
            }
            Instr::MatMul {
                rows,
                k_rows,
                accumulate,
                has_bias,
                ..
            } => (
                u64::from(k_rows)
                    + u64::from(has_bias && !accumulate)
                    + u64::from(rows)
                    + self.array_rows
                    + self.array_cols,
                None,
            ),
            Instr::Simd { rows, width, .. } => (area(rows, width), None),
            Instr::SaveActivations { rows, width, .. } => (0, Some((Port::Dram0, area(rows, width) * vb))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub instructions: u64,
    pub compute_cycles: u64,
    pub transfer_cycles: u64,
    pub overhead_cycles: u64,
    /// DRAM bytes read (weights included).
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub weight_bytes: u64,
}

impl LayerCost {
    pub fn total_cycles(&self) -> u64 {
        self.compute_cycles + self.transfer_cycles + self.overhead_cycles
    }

    fn add(&mut self, o: &LayerCost) {
        self.instructions += o.instructions;
        self.compute_cycles += o.compute_cycles;
        self.transfer_cycles += o.transfer_cycles;
        self.overhead_cycles += o.overhead_cycles;
        self.bytes_in += o.bytes_in;
        self.bytes_out += o.bytes_out;
        self.weight_bytes += o.weight_bytes;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimReport {
    pub total_cycles: u64,
    pub compute_cycles: u64,
    pub transfer_cycles: u64,
    pub overhead_cycles: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub weight_bytes: u64,
    pub accel_clock_hz: u64,
    pub layers: Vec<LayerCost>,
}

impl SimReport {
    fn from_layers(layers: Vec<LayerCost>, accel_clock_hz: u64) -> Self {
        let mut t = LayerCost::default();
        for l in &layers {
            t.add(l);
        }
        SimReport {
            total_cycles: t.total_cycles(),
            compute_cycles: t.compute_cycles,
            transfer_cycles: t.transfer_cycles,
            overhead_cycles: t.overhead_cycles,
            bytes_in: t.bytes_in,
            bytes_out: t.bytes_out,
            weight_bytes: t.weight_bytes,
            accel_clock_hz,
            layers,
        }
    }

    /// Frames per second, exact. An empty program counts as one cycle.
    pub fn fps(&self) -> Ratio<u64> {
        Ratio::new(self.accel_clock_hz, self.total_cycles.max(1))
    }

    pub fn fps_f64(&self) -> f64 {
        self.accel_clock_hz as f64 / self.total_cycles.max(1) as f64
    }

    pub fn latency_seconds(&self) -> f64 {
        self.total_cycles as f64 / self.accel_clock_hz as f64
    }

    pub fn bytes_moved(&self) -> u64 {
        self.bytes_in + self.bytes_out
    }

    /// One row per layer, then a `total` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layer",
            "instructions",
            "compute_cycles",
            "transfer_cycles",
            "overhead_cycles",
            "total_cycles",
            "bytes_in",
            "bytes_out",
            "weight_bytes",
        ])
        .expect("in-memory write");
        let total = LayerCost {
            name: "total".into(),
            instructions: self.layers.iter().map(|l| l.instructions).sum(),
            compute_cycles: self.compute_cycles,
            transfer_cycles: self.transfer_cycles,
            overhead_cycles: self.overhead_cycles,
            bytes_in: self.bytes_in,
            bytes_out: self.bytes_out,
            weight_bytes: self.weight_bytes,
        };
        for l in self.layers.iter().chain(std::iter::once(&total)) {
            let n = |v: u64| v.to_string();
            w.write_record([
                l.name.clone(),
                n(l.instructions),
                n(l.compute_cycles),
                n(l.transfer_cycles),
                n(l.overhead_cycles),
                n(l.total_cycles()),
                n(l.bytes_in),
                n(l.bytes_out),
                n(l.weight_bytes),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ASCII")
    }
}

fn layer_cost(name: &str, instrs: &[Instr], m: &CostModel) -> LayerCost {
    let mut c = LayerCost {
        name: name.into(),
        instructions: instrs.len() as u64,
        overhead_cycles: instrs.len() as u64 * m.overhead_cycles,
        ..LayerCost::default()
    };
    // transfer cycles pending per port since the last compute instruction
    let mut pending = [0u64; 2];
    let flush = |c: &mut LayerCost, pending: &mut [u64; 2]| {
        c.transfer_cycles += if m.port_parallel {
            pending[0].max(pending[1])
        } else {
            pending[0] + pending[1]
        };
        *pending = [0, 0];
    };
    for i in instrs {
        let (compute, xfer) = m.cost(i);
        if compute > 0 {
            flush(&mut c, &mut pending);
            c.compute_cycles += compute;
        }
        if let Some((port, bytes)) = xfer {
            pending[port as usize] += m.transfer_cycles(bytes);
            match (port, i) {
                (Port::Dram1, _) => {
                    c.bytes_in += bytes;
                    c.weight_bytes += bytes;
                }
                (Port::Dram0, Instr::SaveActivations { .. }) => c.bytes_out += bytes,
                (Port::Dram0, _) => c.bytes_in += bytes,
            }
        }
    }
    flush(&mut c, &mut pending);
    c
}

pub fn simulate_cost(p: &Program, m: &CostModel) -> SimReport {
    let layers = if p.layers.is_empty() && !p.instrs.is_empty() {
        vec![layer_cost("program", &p.instrs, m)]
    } else {
        (0..p.layers.len())
            .map(|i| layer_cost(&p.layers[i].name, p.layer_instrs(i), m))
            .collect()
    };
    SimReport::from_layers(layers, m.accel_clock_hz)
}
