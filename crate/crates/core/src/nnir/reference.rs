//! Direct (loop-nest) evaluators used as oracles.
//!
//! `reference_forward*` runs the graph in floating point. `quantized_forward`
//! runs it with the exact integer semantics of the accelerator datapath:
//! weights, bias and input are quantized to the datapath format, products are
//! summed in the wide accumulator (seeded with the bias), and each layer
//! output is requantized. Element-wise ops work on datapath values with
//! saturation; global average pooling sums raw values and divides once.

use super::{Graph, NnirError, Op, TensorShape, WeightBlob};
use crate::archspec::FixedFormat;
use crate::fxp::{check_acc, div_round, quantize_raw, requantize, FxpError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<f32>) -> Self {
        assert_eq!(shape.elements(), data.len(), "tensor data does not match {shape}");
        Tensor { shape, data }
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.elements()],
        }
    }

    pub fn at(&self, h: usize, w: usize, c: usize) -> f32 {
        self.data[(h * self.shape.w + w) * self.shape.c + c]
    }

    /// Index of the largest element (first one on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_input(g: &Graph, shape: TensorShape) -> Result<(), NnirError> {
    let want = g.node(g.input).shape();
    if shape != want {
        return Err(NnirError::Shape {
            node: g.input,
            msg: format!("input tensor is {shape}, graph expects {want}"),
        });
    }
    Ok(())
}

/// Float output of the graph output node.
pub fn reference_forward(g: &Graph, blob: &WeightBlob, input: &Tensor) -> Result<Tensor, NnirError> {
    let mut all = reference_forward_all(g, blob, input)?;
    Ok(all.swap_remove(g.output))
}

/// Float outputs of every node, indexed by node id.
pub fn reference_forward_all(g: &Graph, blob: &WeightBlob, input: &Tensor) -> Result<Vec<Tensor>, NnirError> {
    check_input(g, input.shape)?;
    blob.check_refs(g)?;
    let mut outs: Vec<Tensor> = Vec::with_capacity(g.len());
    for n in &g.nodes {
        let o = n.shape();
        let t = match &n.op {
            Op::Input => input.clone(),
            Op::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                let x = &outs[n.inputs[0]];
                let (k, bias) = blob.get(n.weights.as_ref().expect("checked"));
                let mut t = Tensor::zeros(o);
                let ic = x.shape.c;
                for oh in 0..o.h {
                    for ow in 0..o.w {
                        for oc in 0..o.c {
                            let mut acc = bias.map_or(0.0, |b| f64::from(b[oc]));
                            for ky in 0..*kernel_h {
                                let Some(ih) = (oh * stride + ky).checked_sub(*padding) else {
                                    continue;
                                };
                                if ih >= x.shape.h {
                                    continue;
                                }
                                for kx in 0..*kernel_w {
                                    let Some(iw) = (ow * stride + kx).checked_sub(*padding) else {
                                        continue;
                                    };
                                    if iw >= x.shape.w {
                                        continue;
                                    }
                                    for c in 0..ic {
                                        let wi = ((ky * kernel_w + kx) * ic + c) * o.c + oc;
                                        acc += f64::from(x.at(ih, iw, c)) * f64::from(k[wi]);
                                    }
                                }
                            }
                            t.data[(oh * o.w + ow) * o.c + oc] = acc as f32;
                        }
                    }
                }
                t
            }
            Op::Dense { out_features } => {
                let x = &outs[n.inputs[0]];
                let (k, bias) = blob.get(n.weights.as_ref().expect("checked"));
                let data = (0..*out_features)
                    .map(|j| {
                        let mut acc = bias.map_or(0.0, |b| f64::from(b[j]));
                        for (i, &v) in x.data.iter().enumerate() {
                            acc += f64::from(v) * f64::from(k[i * out_features + j]);
                        }
                        acc as f32
                    })
                    .collect();
                Tensor::new(o, data)
            }
            Op::Relu => {
                let x = &outs[n.inputs[0]];
                Tensor::new(o, x.data.iter().map(|v| v.max(0.0)).collect())
            }
            Op::Add => {
                let (a, b) = (&outs[n.inputs[0]], &outs[n.inputs[1]]);
                Tensor::new(o, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
            }
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let x = &outs[n.inputs[0]];
                let mut t = Tensor::zeros(o);
                for oh in 0..o.h {
                    for ow in 0..o.w {
                        for c in 0..o.c {
                            let mut m = f32::NEG_INFINITY;
                            for (ih, iw) in window(oh, ow, *kernel, *stride, *padding, x.shape) {
                                m = m.max(x.at(ih, iw, c));
                            }
                            t.data[(oh * o.w + ow) * o.c + c] = m;
                        }
                    }
                }
                t
            }
            Op::AvgPoolGlobal => {
                let x = &outs[n.inputs[0]];
                let count = x.shape.pixels() as f64;
                let data = (0..o.c)
                    .map(|c| {
                        let s: f64 = x.data.iter().skip(c).step_by(o.c).map(|&v| f64::from(v)).sum();
                        (s / count) as f32
                    })
                    .collect();
                Tensor::new(o, data)
            }
            Op::Pad { padding } => {
                let x = &outs[n.inputs[0]];
                let mut t = Tensor::zeros(o);
                for h in 0..x.shape.h {
                    for w in 0..x.shape.w {
                        for c in 0..o.c {
                            t.data[((h + padding) * o.w + w + padding) * o.c + c] = x.at(h, w, c);
                        }
                    }
                }
                t
            }
        };
        outs.push(t);
    }
    Ok(outs)
}

/// In-bounds input positions covered by one pooling window.
fn window(
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    x: TensorShape,
) -> impl Iterator<Item = (usize, usize)> {
    (0..kernel).flat_map(move |ky| {
        (0..kernel).filter_map(move |kx| {
            let ih = (oh * stride + ky).checked_sub(padding)?;
            let iw = (ow * stride + kx).checked_sub(padding)?;
            (ih < x.h && iw < x.w).then_some((ih, iw))
        })
    })
}

#[derive(Debug, thiserror::Error)]
pub enum QuantizedError {
    #[error(transparent)]
    Graph(#[from] NnirError),
    #[error("node {node}: {source}")]
    Fxp { node: usize, source: FxpError },
}

/// Raw datapath values of every node, NHWC flattened, indexed by node id.
pub fn quantized_forward(
    g: &Graph,
    blob: &WeightBlob,
    input: &Tensor,
    fmt: FixedFormat,
) -> Result<Vec<Vec<i64>>, QuantizedError> {
    check_input(g, input.shape)?;
    blob.check_refs(g)?;
    let q = |node: usize, v: f32| quantize_raw(v, fmt).map_err(|source| QuantizedError::Fxp { node, source });
    let sat = |v: i64| v.clamp(fmt.raw_min(), fmt.raw_max());
    let bp = fmt.binary_point;
    let mut outs: Vec<Vec<i64>> = Vec::with_capacity(g.len());
    for n in &g.nodes {
        let o = n.shape();
        let at = |x: &[i64], s: TensorShape, h: usize, w: usize, c: usize| x[(h * s.w + w) * s.c + c];
        let v = match &n.op {
            Op::Input => input.data.iter().map(|&v| q(n.id, v)).collect::<Result<_, _>>()?,
            Op::Conv2d { .. } | Op::Dense { .. } => {
                let (kernel_h, kernel_w, stride, padding) = match n.op {
                    Op::Conv2d {
                        kernel_h,
                        kernel_w,
                        stride,
                        padding,
                        ..
                    } => (kernel_h, kernel_w, stride, padding),
                    // dense = conv whose kernel covers the whole input
                    _ => {
                        let s = g.input_shape(n.id, 0);
                        (s.h, s.w, 1, 0)
                    }
                };
                let xs = g.input_shape(n.id, 0);
                let x = &outs[n.inputs[0]];
                let (k, bias) = blob.get(n.weights.as_ref().expect("checked"));
                let kq: Vec<i64> = k.iter().map(|&v| q(n.id, v)).collect::<Result<_, _>>()?;
                let bq: Vec<i64> = match bias {
                    Some(b) => b.iter().map(|&v| q(n.id, v)).collect::<Result<_, _>>()?,
                    None => vec![0; o.c],
                };
                let mut out = vec![0i64; o.elements()];
                for oh in 0..o.h {
                    for ow in 0..o.w {
                        for oc in 0..o.c {
                            let mut acc = bq[oc] << bp;
                            for ky in 0..kernel_h {
                                let Some(ih) = (oh * stride + ky).checked_sub(padding) else {
                                    continue;
                                };
                                if ih >= xs.h {
                                    continue;
                                }
                                for kx in 0..kernel_w {
                                    let Some(iw) = (ow * stride + kx).checked_sub(padding) else {
                                        continue;
                                    };
                                    if iw >= xs.w {
                                        continue;
                                    }
                                    for c in 0..xs.c {
                                        let wi = ((ky * kernel_w + kx) * xs.c + c) * o.c + oc;
                                        let p = at(x, xs, ih, iw, c) as i128 * kq[wi] as i128;
                                        acc = check_acc(acc as i128 + p)
                                            .map_err(|source| QuantizedError::Fxp { node: n.id, source })?;
                                    }
                                }
                            }
                            out[(oh * o.w + ow) * o.c + oc] = requantize(acc, fmt).raw;
                        }
                    }
                }
                out
            }
            Op::Relu => outs[n.inputs[0]].iter().map(|&v| v.max(0)).collect(),
            Op::Add => {
                let (a, b) = (&outs[n.inputs[0]], &outs[n.inputs[1]]);
                a.iter().zip(b).map(|(x, y)| sat(x + y)).collect()
            }
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let xs = g.input_shape(n.id, 0);
                let x = &outs[n.inputs[0]];
                let mut out = vec![0i64; o.elements()];
                for oh in 0..o.h {
                    for ow in 0..o.w {
                        for c in 0..o.c {
                            let m = window(oh, ow, *kernel, *stride, *padding, xs)
                                .map(|(ih, iw)| at(x, xs, ih, iw, c))
                                .max()
                                .expect("padding < kernel keeps every window non-empty");
                            out[(oh * o.w + ow) * o.c + c] = m;
                        }
                    }
                }
                out
            }
            Op::AvgPoolGlobal => {
                let xs = g.input_shape(n.id, 0);
                let x = &outs[n.inputs[0]];
                (0..o.c)
                    .map(|c| {
                        let s: i128 = x.iter().skip(c).step_by(o.c).map(|&v| v as i128).sum();
                        sat(div_round(s, xs.pixels() as i128, fmt.rounding) as i64)
                    })
                    .collect()
            }
            Op::Pad { padding } => {
                let xs = g.input_shape(n.id, 0);
                let x = &outs[n.inputs[0]];
                let mut out = vec![0i64; o.elements()];
                for h in 0..xs.h {
                    for w in 0..xs.w {
                        for c in 0..o.c {
                            out[((h + padding) * o.w + w + padding) * o.c + c] = at(x, xs, h, w, c);
                        }
                    }
                }
                out
            }
        };
        outs.push(v);
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnir::{build_resnet20, random_input, random_weights, DType, LayerNode, WeightRef};

    fn tiny_conv() -> (Graph, WeightBlob) {
        // 3x3 input, 1 channel, 2x2 kernel, stride 1, no padding, 1 output channel.
        let nodes = vec![
            LayerNode {
                id: 0,
                name: "in".into(),
                op: Op::Input,
                inputs: vec![],
                out_shape: None,
                weights: None,
            },
            LayerNode {
                id: 1,
                name: "conv".into(),
                op: Op::Conv2d {
                    kernel_h: 2,
                    kernel_w: 2,
                    stride: 1,
                    padding: 0,
                    out_channels: 1,
                },
                inputs: vec![0],
                out_shape: None,
                weights: Some(WeightRef {
                    tensor: 0,
                    shape: vec![2, 2, 1, 1],
                    offset: 0,
                    dtype: DType::Float32,
                    bias: true,
                }),
            },
        ];
        let g = Graph {
            nodes,
            input: 0,
            output: 1,
        };
        let g = crate::nnir::infer_shapes(&g, TensorShape::hwc(3, 3, 1)).unwrap();
        (g, WeightBlob::from_floats(vec![1.0, 0.0, 0.0, -1.0, 0.5]))
    }

    #[test]
    fn hand_computed_conv() {
        let (g, blob) = tiny_conv();
        let x = Tensor::new(TensorShape::hwc(3, 3, 1), (1..=9).map(|v| v as f32).collect());
        // out[i][j] = x[i][j] - x[i+1][j+1] + 0.5 = -4 + 0.5
        let y = reference_forward(&g, &blob, &x).unwrap();
        assert_eq!(y.data, vec![-3.5; 4]);
        let q = quantized_forward(&g, &blob, &x, FixedFormat::q8_8()).unwrap();
        assert_eq!(q[1], vec![-896; 4]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let (g, blob) = tiny_conv();
        let x = Tensor::zeros(TensorShape::hwc(4, 4, 1));
        assert!(reference_forward(&g, &blob, &x).is_err());
    }

    #[test]
    fn quantized_tracks_float_on_resnet() {
        let g = build_resnet20(10);
        let blob = random_weights(&g, 1);
        let x = random_input(g.node(g.input).shape(), 2);
        let f = reference_forward(&g, &blob, &x).unwrap();
        let q = quantized_forward(&g, &blob, &x, FixedFormat::q8_8()).unwrap();
        let ulp = FixedFormat::q8_8().ulp();
        for (a, &b) in f.data.iter().zip(&q[g.output]) {
            assert!(
                (f64::from(*a) - b as f64 * ulp).abs() < 0.5,
                "{a} vs {}",
                b as f64 * ulp
            );
        }
    }
}
