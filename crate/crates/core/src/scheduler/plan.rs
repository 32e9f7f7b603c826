//! Grouping graph nodes into fused layers and lowering anchors onto the array.

use serde::Serialize;

use super::SchedError;
use crate::nnir::{Graph, NodeId, Op, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GatherMode {
    /// im2col rows: taps and channels packed densely across vectors.
    Packed,
    /// One channel-block run of vectors per tap.
    PerPosition,
}

/// Where one lane of a gathered row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Input element at `pixel` (row-major `h * in_w + w`), channel `c`.
    Elem { pixel: usize, c: usize },
    /// Spatial padding.
    Fill,
    /// Beyond the reduction length or channel count.
    Zero,
}

/// Windowed gather geometry: turns an NHWC tensor into one row of vectors
/// per output pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Gather {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Raw value written for spatial padding.
    pub fill: i64,
    pub mode: GatherMode,
}

impl Gather {
    pub fn rows(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_blocks(&self, lanes: usize) -> usize {
        self.in_c.div_ceil(lanes)
    }

    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn row_vectors(&self, lanes: usize) -> usize {
        match self.mode {
            GatherMode::Packed => (self.taps() * self.in_c).div_ceil(lanes),
            GatherMode::PerPosition => self.taps() * self.in_blocks(lanes),
        }
    }

    /// True when every gathered row is exactly one input pixel's vectors.
    pub fn is_identity(&self) -> bool {
        self.kernel_h == 1
            && self.kernel_w == 1
            && self.stride == 1
            && self.padding == 0
            && (self.out_h, self.out_w) == (self.in_h, self.in_w)
    }

    pub fn source(&self, lanes: usize, row: usize, vector: usize, lane: usize) -> Source {
        let (tap, c) = match self.mode {
            GatherMode::Packed => {
                let f = vector * lanes + lane;
                if f >= self.taps() * self.in_c {
                    return Source::Zero;
                }
                (f / self.in_c, f % self.in_c)
            }
            GatherMode::PerPosition => {
                let cb = self.in_blocks(lanes);
                let c = (vector % cb) * lanes + lane;
                if c >= self.in_c {
                    return Source::Zero;
                }
                (vector / cb, c)
            }
        };
        let (ky, kx) = (tap / self.kernel_w, tap % self.kernel_w);
        let (oh, ow) = (row / self.out_w, row % self.out_w);
        let ih = (oh * self.stride + ky).checked_sub(self.padding);
        let iw = (ow * self.stride + kx).checked_sub(self.padding);
        match (ih, iw) {
            (Some(ih), Some(iw)) if ih < self.in_h && iw < self.in_w => Source::Elem {
                pixel: ih * self.in_w + iw,
                c,
            },
            _ => Source::Fill,
        }
    }
}

/// A conv or dense layer as a matrix multiply: `m` output rows, `k`
/// reduction vectors per row, `n` output channels in `n_blocks` blocks of
/// at most `lanes` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatMulLowering {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub n_blocks: usize,
    /// Scalar reduction length `kernel_h * kernel_w * in_c`.
    pub reduction: usize,
    pub lanes: usize,
    pub has_bias: bool,
    pub gather: Gather,
}

impl MatMulLowering {
    /// Vectors of one output block's weight image: optional bias row, then
    /// `lanes` rows per reduction vector.
    pub fn block_vectors(&self) -> usize {
        self.k * self.lanes + usize::from(self.has_bias)
    }

    pub fn weight_vectors(&self) -> usize {
        self.n_blocks * self.block_vectors()
    }

    /// Weight rows used by reduction vector `j` (the last one may be short).
    pub fn rows_in_pass(&self, j: usize) -> usize {
        (self.reduction - j * self.lanes).min(self.lanes)
    }

    /// Output channels in block `b`.
    pub fn cols_in_block(&self, b: usize) -> usize {
        (self.n - b * self.lanes).min(self.lanes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    /// Copy the single gathered tap.
    None,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowLowering {
    pub gather: Gather,
    pub reduce: Reduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    MatMul(MatMulLowering),
    /// Per-pixel SIMD op over a gathered window (max-pool, pad, or a plain
    /// copy that carries standalone ReLU/add post-ops).
    Window(WindowLowering),
    /// Channel means over all pixels, summed in the accumulators.
    GlobalPool {
        pixels: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum PostOp {
    Relu,
    /// Saturating add of an already materialized tensor.
    Add {
        skip: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FusedLayer {
    pub index: usize,
    pub name: String,
    pub anchor: NodeId,
    /// Producer of the anchor's input tensor.
    pub input: NodeId,
    pub post: Vec<PostOp>,
    /// Node whose value this layer materializes.
    pub output: NodeId,
    pub nodes: Vec<NodeId>,
    pub kind: LayerKind,
    pub in_shape: TensorShape,
    pub out_shape: TensorShape,
    pub lanes: usize,
}

impl FusedLayer {
    /// Output rows (pixels).
    pub fn rows(&self) -> usize {
        match self.kind {
            LayerKind::GlobalPool { .. } => 1,
            _ => self.out_shape.pixels(),
        }
    }

    /// Output channel blocks per row.
    pub fn out_blocks(&self) -> usize {
        self.out_shape.c.div_ceil(self.lanes)
    }

    pub fn in_blocks(&self) -> usize {
        self.in_shape.c.div_ceil(self.lanes)
    }

    pub fn skips(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.post.iter().filter_map(|p| match p {
            PostOp::Add { skip } => Some(*skip),
            PostOp::Relu => None,
        })
    }

    pub fn skip_count(&self) -> usize {
        self.skips().count()
    }

    /// Vectors of one lowered input row.
    pub fn in_row_vectors(&self) -> usize {
        match &self.kind {
            LayerKind::MatMul(l) => l.k,
            LayerKind::Window(w) => w.gather.row_vectors(self.lanes),
            LayerKind::GlobalPool { .. } => self.in_blocks(),
        }
    }

    pub fn matmul(&self) -> Option<&MatMulLowering> {
        match &self.kind {
            LayerKind::MatMul(l) => Some(l),
            _ => None,
        }
    }

    /// Vectors of a tensor of shape `s` in NHWC vector layout.
    pub fn tensor_vectors(s: TensorShape, lanes: usize) -> usize {
        s.pixels() * s.c.div_ceil(lanes)
    }
}

/// im2col lowering of a conv or dense node. Dense layers are treated as a
/// conv whose kernel covers the whole input, producing a 1x1 output.
pub fn lower_to_matmul(g: &Graph, node: NodeId, lanes: usize) -> Result<MatMulLowering, SchedError> {
    let n = g.node(node);
    let x = g.input_shape(node, 0);
    let o = n.shape();
    let (kernel_h, kernel_w, stride, padding) = match n.op {
        Op::Conv2d {
            kernel_h,
            kernel_w,
            stride,
            padding,
            ..
        } => (kernel_h, kernel_w, stride, padding),
        Op::Dense { .. } => (x.h, x.w, 1, 0),
        ref other => return Err(SchedError::Unsupported(other.name().into())),
    };
    let gather = Gather {
        in_h: x.h,
        in_w: x.w,
        in_c: x.c,
        kernel_h,
        kernel_w,
        stride,
        padding,
        out_h: o.h,
        out_w: o.w,
        fill: 0,
        mode: GatherMode::Packed,
    };
    let reduction = kernel_h * kernel_w * x.c;
    Ok(MatMulLowering {
        m: o.h * o.w,
        k: reduction.div_ceil(lanes),
        n: o.c,
        n_blocks: o.c.div_ceil(lanes),
        reduction,
        lanes,
        has_bias: n.weights.as_ref().is_some_and(|w| w.bias),
        gather,
    })
}

fn window_lowering(g: &Graph, node: NodeId, raw_min: i64) -> WindowLowering {
    let x = g.input_shape(node, 0);
    let o = g.node(node).shape();
    let (k, stride, padding, fill, reduce) = match g.node(node).op {
        Op::MaxPool {
            kernel,
            stride,
            padding,
        } => (kernel, stride, padding, raw_min, Reduce::Max),
        Op::Pad { padding } => (1, 1, padding, 0, Reduce::None),
        _ => (1, 1, 0, 0, Reduce::None),
    };
    WindowLowering {
        gather: Gather {
            in_h: x.h,
            in_w: x.w,
            in_c: x.c,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding,
            out_h: o.h,
            out_w: o.w,
            fill,
            mode: GatherMode::PerPosition,
        },
        reduce,
    }
}

/// Groups `g` into fused layers in execution order.
///
/// A chain grows from an anchor while its tail has exactly one consumer,
/// is not the graph output, and that consumer is a ReLU of the tail or an
/// add of the tail with a tensor some earlier layer already produced.
pub fn plan_layers(g: &Graph, lanes: usize, raw_min: i64) -> Result<Vec<FusedLayer>, SchedError> {
    g.check()?;
    let mut assigned = vec![false; g.len()];
    let mut available = vec![false; g.len()];
    if !g.is_empty() {
        available[g.input] = true;
    }
    let mut layers = Vec::new();
    for id in 0..g.len() {
        let node = g.node(id);
        if assigned[id] || node.op == Op::Input {
            continue;
        }
        assigned[id] = true;
        let input = node.inputs[0];
        let (kind, mut post) = match node.op {
            Op::Conv2d { .. } | Op::Dense { .. } => (LayerKind::MatMul(lower_to_matmul(g, id, lanes)?), vec![]),
            Op::AvgPoolGlobal => (
                LayerKind::GlobalPool {
                    pixels: g.input_shape(id, 0).pixels(),
                },
                vec![],
            ),
            Op::MaxPool { .. } | Op::Pad { .. } => (LayerKind::Window(window_lowering(g, id, raw_min)), vec![]),
            Op::Relu => (LayerKind::Window(window_lowering(g, id, raw_min)), vec![PostOp::Relu]),
            Op::Add => (
                LayerKind::Window(window_lowering(g, id, raw_min)),
                vec![PostOp::Add { skip: node.inputs[1] }],
            ),
            Op::Input => unreachable!(),
        };
        let mut nodes = vec![id];
        let mut tail = id;
        loop {
            let cons = g.consumers(tail);
            if cons.len() != 1 || tail == g.output {
                break;
            }
            let c = cons[0];
            let next = match g.node(c).op {
                Op::Relu => PostOp::Relu,
                Op::Add => {
                    let ins = &g.node(c).inputs;
                    let other = if ins[0] == tail { ins[1] } else { ins[0] };
                    if other == tail || !available[other] {
                        break;
                    }
                    PostOp::Add { skip: other }
                }
                _ => break,
            };
            post.push(next);
            nodes.push(c);
            assigned[c] = true;
            tail = c;
        }
        available[tail] = true;
        layers.push(FusedLayer {
            index: layers.len(),
            name: node.name.clone(),
            anchor: id,
            input,
            post,
            output: tail,
            nodes,
            kind,
            in_shape: g.input_shape(id, 0),
            out_shape: g.node(tail).shape(),
            lanes,
        });
    }
    Ok(layers)
}
