//! Neural-network graph IR.
//!
//! Graphs are flat, topologically ordered node lists in which a node's id is
//! its position. Tensors are NHWC with batch 1. Weighted layers reference a
//! float32 little-endian weight blob; batch-norm is expected to be folded
//! into conv weights and bias before export (see [`fold_batch_norm`]).

mod cifar;
mod manifest;
mod reference;
mod resnet;
mod shape;
mod synth;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub use cifar::{read_cifar_batch, CifarRecord, CIFAR_RECORD_BYTES};
pub use manifest::{load_model, parse_manifest, write_manifest, write_model, MANIFEST_FORMAT};
pub use reference::{argmax, quantized_forward, reference_forward, reference_forward_all, QuantizedError, Tensor};
pub use resnet::build_resnet20;
pub use shape::infer_shapes;
pub use synth::{random_input, random_weights};

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum NnirError {
    #[error("shape error at node {node}: {msg}")]
    Shape { node: NodeId, msg: String },
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("unknown op `{0}` in manifest")]
    UnknownOp(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("weights for node {node} out of bounds: need bytes {start}..{end}, blob has {len}")]
    OutOfBounds {
        node: NodeId,
        start: u64,
        end: u64,
        len: u64,
    },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TensorShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl TensorShape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        TensorShape { n, h, w, c }
    }

    /// Batch-1 image shape.
    pub const fn hwc(h: usize, w: usize, c: usize) -> Self {
        TensorShape { n: 1, h, w, c }
    }

    pub fn elements(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    /// Graph input placeholder.
    Input,
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        out_channels: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    Add,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPoolGlobal,
    /// Symmetric spatial zero padding.
    Pad {
        padding: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense { .. } => "dense",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::MaxPool { .. } => "maxpool",
            Op::AvgPoolGlobal => "avgpool_global",
            Op::Pad { .. } => "pad",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Op::Conv2d { .. } | Op::Dense { .. })
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input => 0,
            Op::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Float32,
}

/// Location of one layer's parameters in the weight blob.
///
/// The kernel is stored first (conv: `[kh, kw, in_c, out_c]`, dense:
/// `[in_features, out_features]`); when `bias` is set, one extra row of
/// `out` floats follows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightRef {
    pub tensor: usize,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub dtype: DType,
    pub bias: bool,
}

impl WeightRef {
    pub fn kernel_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn out_len(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn float_len(&self) -> usize {
        self.kernel_len() + if self.bias { self.out_len() } else { 0 }
    }

    pub fn byte_len(&self) -> u64 {
        self.float_len() as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNode {
    pub id: NodeId,
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub out_shape: Option<TensorShape>,
    pub weights: Option<WeightRef>,
}

impl LayerNode {
    /// Inferred output shape; panics if shapes were never inferred.
    pub fn shape(&self) -> TensorShape {
        self.out_shape
            .unwrap_or_else(|| panic!("node {} has no inferred shape", self.id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub nodes: Vec<LayerNode>,
    pub input: NodeId,
    pub output: NodeId,
}

impl Graph {
    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes that read `id`, in order. A node that reads `id` twice appears twice.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter().filter(move |&&i| i == id).map(move |_| n.id))
            .collect()
    }

    pub fn input_shape(&self, id: NodeId, operand: usize) -> TensorShape {
        self.node(self.node(id).inputs[operand]).shape()
    }

    /// Structural checks: dense ordered ids, topological inputs, arity,
    /// weights on exactly the weighted ops.
    pub fn check(&self) -> Result<(), NnirError> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        for (pos, node) in self.nodes.iter().enumerate() {
            if node.id != pos {
                return Err(NnirError::Graph(format!(
                    "node at position {pos} has id {}; ids must be dense and ordered",
                    node.id
                )));
            }
            for &i in &node.inputs {
                if i >= self.nodes.len() {
                    return Err(NnirError::Graph(format!("node {pos} references missing node {i}")));
                }
                if i >= pos {
                    return Err(NnirError::Graph(format!(
                        "node {pos} reads node {i}, which does not precede it"
                    )));
                }
            }
            if node.inputs.len() != node.op.arity() {
                return Err(NnirError::Graph(format!(
                    "node {pos} ({}) has {} inputs, expected {}",
                    node.op.name(),
                    node.inputs.len(),
                    node.op.arity()
                )));
            }
            if node.op.is_weighted() != node.weights.is_some() {
                return Err(NnirError::Graph(format!(
                    "node {pos} ({}) weight reference mismatch",
                    node.op.name()
                )));
            }
            if node.op == Op::Input && pos != self.input {
                return Err(NnirError::Graph(format!("input node {pos} is not the graph input")));
            }
        }
        if self.input >= self.nodes.len() || self.nodes[self.input].op != Op::Input {
            return Err(NnirError::Graph("graph input must be an input node".into()));
        }
        if self.output >= self.nodes.len() {
            return Err(NnirError::Graph(format!("graph output {} does not exist", self.output)));
        }
        Ok(())
    }

    /// Total multiply-accumulates over conv and dense nodes.
    pub fn mac_count(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Conv2d { kernel_h, kernel_w, .. } => {
                    let out = n.shape();
                    let in_c = self.input_shape(n.id, 0).c;
                    (out.pixels() * out.c * kernel_h * kernel_w * in_c) as u64
                }
                Op::Dense { out_features } => {
                    let inp = self.input_shape(n.id, 0);
                    (inp.pixels() * inp.c * out_features) as u64
                }
                _ => 0,
            })
            .sum()
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = &LayerNode> {
        self.nodes.iter().filter(|n| n.op.is_weighted())
    }
}

/// Raw float32 parameters addressed by [`WeightRef`] byte offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlob {
    data: Vec<f32>,
}

impl WeightBlob {
    pub fn from_floats(data: Vec<f32>) -> Self {
        WeightBlob { data }
    }

    /// Decodes little-endian float32 bytes; a trailing partial float is an error.
    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self, NnirError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(NnirError::Manifest(format!(
                "weight blob length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(WeightBlob { data })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn byte_len(&self) -> u64 {
        self.data.len() as u64 * 4
    }

    pub fn floats(&self) -> &[f32] {
        &self.data
    }

    pub fn floats_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Kernel and optional bias for `w`.
    pub fn get(&self, w: &WeightRef) -> (&[f32], Option<&[f32]>) {
        let start = (w.offset / 4) as usize;
        let k = w.kernel_len();
        let kernel = &self.data[start..start + k];
        let bias = w.bias.then(|| &self.data[start + k..start + k + w.out_len()]);
        (kernel, bias)
    }

    /// Verifies every reference in `g` lies inside the blob.
    pub fn check_refs(&self, g: &Graph) -> Result<(), NnirError> {
        check_refs_len(g, self.byte_len())
    }
}

pub(crate) fn check_refs_len(g: &Graph, len: u64) -> Result<(), NnirError> {
    for n in &g.nodes {
        if let Some(w) = &n.weights {
            let end = w.offset + w.byte_len();
            if w.offset % 4 != 0 || end > len {
                return Err(NnirError::OutOfBounds {
                    node: n.id,
                    start: w.offset,
                    end,
                    len,
                });
            }
        }
    }
    Ok(())
}

/// Folds an inference-mode batch norm into the preceding conv.
///
/// `kernel` is `[.., out_c]` with output channel innermost; `bias` has one
/// entry per output channel and is created as zeros by the caller if absent.
pub fn fold_batch_norm(
    kernel: &mut [f32],
    bias: &mut [f32],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) {
    let out_c = bias.len();
    assert!(out_c > 0 && kernel.len().is_multiple_of(out_c));
    let scale: Vec<f32> = (0..out_c).map(|c| gamma[c] / (var[c] + eps).sqrt()).collect();
    for (i, w) in kernel.iter_mut().enumerate() {
        *w *= scale[i % out_c];
    }
    for c in 0..out_c {
        bias[c] = (bias[c] - mean[c]) * scale[c] + beta[c];
    }
}
