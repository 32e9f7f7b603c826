use super::{infer_shapes, DType, Graph, LayerNode, NodeId, Op, TensorShape, WeightRef};

struct Builder {
    nodes: Vec<LayerNode>,
    next_tensor: usize,
    offset: u64,
}

impl Builder {
    fn push(&mut self, name: String, op: Op, inputs: Vec<NodeId>, weight_shape: Option<Vec<usize>>) -> NodeId {
        let id = self.nodes.len();
        let weights = weight_shape.map(|shape| {
            let w = WeightRef {
                tensor: self.next_tensor,
                shape,
                offset: self.offset,
                dtype: DType::Float32,
                bias: true,
            };
            self.next_tensor += 1;
            self.offset += w.byte_len();
            w
        });
        self.nodes.push(LayerNode {
            id,
            name,
            op,
            inputs,
            out_shape: None,
            weights,
        });
        id
    }

    fn conv(&mut self, name: String, input: NodeId, in_c: usize, out_c: usize, k: usize, stride: usize) -> NodeId {
        let op = Op::Conv2d {
            kernel_h: k,
            kernel_w: k,
            stride,
            padding: k / 2,
            out_channels: out_c,
        };
        self.push(name, op, vec![input], Some(vec![k, k, in_c, out_c]))
    }
}

/// ResNet20 for 32x32x3 inputs.
///
/// Stem 3x3 conv to 16 channels, then three groups of three basic blocks at
/// 16/32/64 channels; the first block of groups two and three downsamples
/// with stride 2 and uses a 1x1 stride-2 projection on the shortcut. Global
/// average pool and a dense classifier finish the network. All weighted
/// layers carry a bias (folded batch norm). Weight offsets are assigned in
/// node order, so the blob for this graph is the concatenation of every
/// layer's kernel and bias.
pub fn build_resnet20(num_classes: usize) -> Graph {
    assert!(num_classes >= 2, "num_classes must be >= 2");
    let mut b = Builder {
        nodes: Vec::new(),
        next_tensor: 0,
        offset: 0,
    };
    let input = b.push("input".into(), Op::Input, vec![], None);
    let stem = b.conv("stem.conv".into(), input, 3, 16, 3, 1);
    let mut x = b.push("stem.relu".into(), Op::Relu, vec![stem], None);
    let mut in_c = 16;
    for (g, &c) in [16usize, 32, 64].iter().enumerate() {
        for blk in 0..3 {
            let stride = if g > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("g{}b{}", g + 1, blk + 1);
            let shortcut = if stride != 1 || in_c != c {
                b.conv(format!("{p}.proj"), x, in_c, c, 1, stride)
            } else {
                x
            };
            let c1 = b.conv(format!("{p}.conv1"), x, in_c, c, 3, stride);
            let r1 = b.push(format!("{p}.relu1"), Op::Relu, vec![c1], None);
            let c2 = b.conv(format!("{p}.conv2"), r1, c, c, 3, 1);
            let sum = b.push(format!("{p}.add"), Op::Add, vec![c2, shortcut], None);
            x = b.push(format!("{p}.relu2"), Op::Relu, vec![sum], None);
            in_c = c;
        }
    }
    let pool = b.push("pool".into(), Op::AvgPoolGlobal, vec![x], None);
    let fc = b.push(
        "fc".into(),
        Op::Dense {
            out_features: num_classes,
        },
        vec![pool],
        Some(vec![in_c, num_classes]),
    );
    let g = Graph {
        nodes: b.nodes,
        input,
        output: fc,
    };
    infer_shapes(&g, TensorShape::hwc(32, 32, 3)).expect("resnet20 is well formed")
}
