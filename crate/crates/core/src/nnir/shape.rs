use super::{Graph, NnirError, Op, TensorShape};

fn window_out(node: usize, input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, NnirError> {
    if stride == 0 || kernel == 0 {
        return Err(NnirError::Shape {
            node,
            msg: "kernel and stride must be > 0".into(),
        });
    }
    if input + 2 * pad < kernel {
        return Err(NnirError::Shape {
            node,
            msg: format!("kernel {kernel} larger than padded input {}", input + 2 * pad),
        });
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Returns a copy of `g` with every `out_shape` populated for `input`.
///
/// Spatial rule for conv and max-pool: `out = (in + 2*pad - k) / stride + 1`.
pub fn infer_shapes(g: &Graph, input: TensorShape) -> Result<Graph, NnirError> {
    g.check()?;
    if input.elements() == 0 {
        return Err(NnirError::Shape {
            node: g.input,
            msg: "input dimensions must be > 0".into(),
        });
    }
    let mut out = g.clone();
    for id in 0..out.nodes.len() {
        let shape_of = |i: usize| -> TensorShape { out.nodes[out.nodes[id].inputs[i]].shape() };
        let node = &out.nodes[id];
        let err = |msg: String| NnirError::Shape { node: id, msg };
        let shape = match &node.op {
            Op::Input => input,
            Op::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                out_channels,
            } => {
                let x = shape_of(0);
                let w = node.weights.as_ref().expect("checked");
                let expect = [*kernel_h, *kernel_w, x.c, *out_channels];
                if w.shape != expect {
                    return Err(err(format!(
                        "conv weight shape {:?} does not match {:?}",
                        w.shape, expect
                    )));
                }
                TensorShape::new(
                    x.n,
                    window_out(id, x.h, *kernel_h, *stride, *padding)?,
                    window_out(id, x.w, *kernel_w, *stride, *padding)?,
                    *out_channels,
                )
            }
            Op::Dense { out_features } => {
                let x = shape_of(0);
                let w = node.weights.as_ref().expect("checked");
                let expect = [x.h * x.w * x.c, *out_features];
                if w.shape != expect {
                    return Err(err(format!(
                        "dense weight shape {:?} does not match {:?}",
                        w.shape, expect
                    )));
                }
                TensorShape::new(x.n, 1, 1, *out_features)
            }
            Op::Relu => shape_of(0),
            Op::Add => {
                let (a, b) = (shape_of(0), shape_of(1));
                if a != b {
                    return Err(err(format!("add operands differ: {a} vs {b}")));
                }
                a
            }
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let x = shape_of(0);
                if padding >= kernel {
                    return Err(err("max-pool padding must be smaller than the kernel".into()));
                }
                TensorShape::new(
                    x.n,
                    window_out(id, x.h, *kernel, *stride, *padding)?,
                    window_out(id, x.w, *kernel, *stride, *padding)?,
                    x.c,
                )
            }
            Op::AvgPoolGlobal => {
                let x = shape_of(0);
                TensorShape::new(x.n, 1, 1, x.c)
            }
            Op::Pad { padding } => {
                let x = shape_of(0);
                TensorShape::new(x.n, x.h + 2 * padding, x.w + 2 * padding, x.c)
            }
        };
        out.nodes[id].out_shape = Some(shape);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnir::{DType, LayerNode, WeightRef};

    fn node(id: usize, op: Op, inputs: Vec<usize>) -> LayerNode {
        let weights = match &op {
            Op::Conv2d {
                kernel_h,
                kernel_w,
                out_channels,
                ..
            } => Some(WeightRef {
                tensor: id,
                shape: vec![*kernel_h, *kernel_w, 0, *out_channels],
                offset: 0,
                dtype: DType::Float32,
                bias: false,
            }),
            _ => None,
        };
        LayerNode {
            id,
            name: format!("n{id}"),
            op,
            inputs,
            out_shape: None,
            weights,
        }
    }

    fn conv(k: usize, s: usize, p: usize, c: usize) -> Op {
        Op::Conv2d {
            kernel_h: k,
            kernel_w: k,
            stride: s,
            padding: p,
            out_channels: c,
        }
    }

    fn fix_in_channels(g: &mut Graph, id: usize, c: usize) {
        g.nodes[id].weights.as_mut().unwrap().shape[2] = c;
    }

    #[test]
    fn conv_rules() {
        let mut g = Graph {
            nodes: vec![
                node(0, Op::Input, vec![]),
                node(1, conv(3, 1, 1, 16), vec![0]),
                node(2, conv(3, 2, 1, 32), vec![1]),
            ],
            input: 0,
            output: 2,
        };
        fix_in_channels(&mut g, 1, 3);
        fix_in_channels(&mut g, 2, 16);
        let s = infer_shapes(&g, TensorShape::hwc(32, 32, 3)).unwrap();
        assert_eq!(s.nodes[1].shape(), TensorShape::hwc(32, 32, 16));
        assert_eq!(s.nodes[2].shape(), TensorShape::hwc(16, 16, 32));
        // idempotent
        assert_eq!(infer_shapes(&s, TensorShape::hwc(32, 32, 3)).unwrap(), s);
    }

    #[test]
    fn add_mismatch_is_error() {
        let mut g = Graph {
            nodes: vec![
                node(0, Op::Input, vec![]),
                node(1, conv(3, 1, 1, 16), vec![0]),
                node(2, conv(3, 2, 1, 32), vec![1]),
                node(3, Op::Add, vec![1, 2]),
            ],
            input: 0,
            output: 3,
        };
        fix_in_channels(&mut g, 1, 3);
        fix_in_channels(&mut g, 2, 16);
        let err = infer_shapes(&g, TensorShape::hwc(32, 32, 3)).unwrap_err();
        assert!(matches!(err, NnirError::Shape { node: 3, .. }), "{err}");
    }

    #[test]
    fn weight_shape_mismatch_is_error() {
        let g = Graph {
            nodes: vec![node(0, Op::Input, vec![]), node(1, conv(3, 1, 1, 16), vec![0])],
            input: 0,
            output: 1,
        };
        assert!(infer_shapes(&g, TensorShape::hwc(8, 8, 3)).is_err());
    }

    #[test]
    fn pool_and_pad_rules() {
        let g = Graph {
            nodes: vec![
                node(0, Op::Input, vec![]),
                node(
                    1,
                    Op::MaxPool {
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    },
                    vec![0],
                ),
                node(2, Op::Pad { padding: 2 }, vec![1]),
                node(3, Op::AvgPoolGlobal, vec![2]),
            ],
            input: 0,
            output: 3,
        };
        let s = infer_shapes(&g, TensorShape::hwc(9, 9, 5)).unwrap();
        assert_eq!(s.nodes[1].shape(), TensorShape::hwc(5, 5, 5));
        assert_eq!(s.nodes[2].shape(), TensorShape::hwc(9, 9, 5));
        assert_eq!(s.nodes[3].shape(), TensorShape::hwc(1, 1, 5));
    }
}
