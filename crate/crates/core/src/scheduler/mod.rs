//! Layer scheduling: splits every layer into stages and partitions that fit
//! local memory and the accumulators, and accounts for DRAM traffic.
//!
//! The unit of scheduling is a [`FusedLayer`]: one anchor op (conv, dense,
//! a windowed SIMD op or global pooling) followed by a chain of element-wise
//! post-ops (ReLU, residual add) that are applied to the anchor's output
//! window before it is saved.
//!
//! Budgets are counted in vectors (`array_cols` datapath elements).
//! Streamed activation windows are allocated [`PIPELINE_DEPTH`] times so the
//! load, compute and save phases of consecutive partitions use disjoint
//! buffers; weights and accumulators are single-buffered.

mod graph;
mod layer;
mod plan;
mod report;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::archspec::ArchConfig;
use crate::nnir::NnirError;

pub use graph::{schedule_graph, GraphSchedule, Residency};
pub use layer::{schedule_layer, schedule_layer_with};
pub use plan::{
    lower_to_matmul, plan_layers, FusedLayer, Gather, GatherMode, LayerKind, MatMulLowering, PostOp, Reduce, Source,
    WindowLowering,
};
pub use report::{layer_report, schedule_report};

/// Number of activation buffers a streamed partition occupies.
pub const PIPELINE_DEPTH: usize = 3;

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("layer {layer} is infeasible: {reason}")]
    Infeasible { layer: String, reason: String },
    #[error("cannot lower `{0}` to a matrix multiply")]
    Unsupported(String),
    #[error(transparent)]
    Graph(#[from] NnirError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Weights loaded once per stage; inputs re-streamed for every stage.
    PartitionedWeightStationary,
    /// Every layer's weights, inputs and outputs stay in local memory.
    LocalResident,
    /// Inputs loaded once per stage; weights re-streamed for every stage.
    InputStationary,
    /// Local-resident when the whole graph fits, weight-stationary otherwise.
    Auto,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::PartitionedWeightStationary,
        Strategy::LocalResident,
        Strategy::InputStationary,
        Strategy::Auto,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::PartitionedWeightStationary => "weight_stationary",
            Strategy::LocalResident => "local_resident",
            Strategy::InputStationary => "input_stationary",
            Strategy::Auto => "auto",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "weight_stationary" | "partitioned_weight_stationary" | "ws" => Ok(Strategy::PartitionedWeightStationary),
            "local_resident" | "lr" => Ok(Strategy::LocalResident),
            "input_stationary" | "is" => Ok(Strategy::InputStationary),
            "auto" => Ok(Strategy::Auto),
            _ => Err(format!(
                "unknown strategy `{s}` (expected weight_stationary, local_resident, input_stationary or auto)"
            )),
        }
    }
}

/// Local-memory and accumulator capacity in vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capacity {
    pub local: usize,
    pub accum: usize,
}

impl Capacity {
    pub fn of(cfg: &ArchConfig) -> Self {
        Capacity {
            local: cfg.local_vectors() as usize,
            accum: cfg.accum_vectors() as usize,
        }
    }
}

/// One systolic-array pass: `k` weight rows (at most `array_rows`) against
/// `m` streamed input vectors, producing `n` output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Tile {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Partition {
    /// Output rows (lowered output pixels) produced.
    pub rows: Range<usize>,
    /// Output channel blocks produced.
    pub blocks: Range<usize>,
    pub tiles: Vec<Tile>,
    pub local_vectors_used: usize,
    pub accum_vectors_used: usize,
}

impl Partition {
    /// Output vectors covered, as `rows x blocks`.
    pub fn output_vectors(&self) -> usize {
        self.rows.len() * self.blocks.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub rows: Range<usize>,
    pub blocks: Range<usize>,
    /// Weight vectors resident while the stage runs.
    pub weight_vectors: usize,
    pub partitions: Vec<Partition>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrafficStats {
    pub weight_bytes_loaded: u64,
    /// Anchor input bytes loaded from DRAM, in lowered (gathered) form.
    pub input_bytes_loaded: u64,
    /// Residual-add operand bytes loaded from DRAM.
    pub skip_bytes_loaded: u64,
    pub output_bytes_stored: u64,
    pub stage_count: usize,
    pub partition_count: usize,
}

impl TrafficStats {
    pub fn activation_bytes(&self) -> u64 {
        self.input_bytes_loaded + self.skip_bytes_loaded + self.output_bytes_stored
    }

    pub fn total_bytes(&self) -> u64 {
        self.weight_bytes_loaded + self.activation_bytes()
    }
}

impl std::ops::Add for TrafficStats {
    type Output = TrafficStats;

    fn add(self, o: TrafficStats) -> TrafficStats {
        TrafficStats {
            weight_bytes_loaded: self.weight_bytes_loaded + o.weight_bytes_loaded,
            input_bytes_loaded: self.input_bytes_loaded + o.input_bytes_loaded,
            skip_bytes_loaded: self.skip_bytes_loaded + o.skip_bytes_loaded,
            output_bytes_stored: self.output_bytes_stored + o.output_bytes_stored,
            stage_count: self.stage_count + o.stage_count,
            partition_count: self.partition_count + o.partition_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSchedule {
    pub layer: FusedLayer,
    pub strategy: Strategy,
    pub stages: Vec<Stage>,
    pub traffic: TrafficStats,
}

impl LayerSchedule {
    pub fn partition_count(&self) -> usize {
        self.stages.iter().map(|s| s.partitions.len()).sum()
    }

    pub fn partitions(&self) -> impl Iterator<Item = &Partition> {
        self.stages.iter().flat_map(|s| s.partitions.iter())
    }
}

/// Field-wise sum over all layers.
pub fn traffic_totals(schedules: &[LayerSchedule]) -> TrafficStats {
    schedules.iter().fold(TrafficStats::default(), |acc, s| acc + s.traffic)
}

/// Splits `total` into `parts` contiguous ranges whose sizes differ by at
/// most one, larger ranges first.
pub(crate) fn balanced_split(total: usize, parts: usize) -> Vec<Range<usize>> {
    assert!(parts >= 1 && parts <= total.max(1));
    let (base, extra) = (total / parts, total % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}
