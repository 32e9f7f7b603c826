//! Seeded synthetic weights and inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Op, Tensor, TensorShape, WeightBlob};

/// Gain applied to a conv whose output feeds a residual add, so the
/// residual stream grows slowly with depth.
const RESIDUAL_GAIN: f64 = 0.5;
const BIAS_RANGE: f64 = 0.05;

/// Uniform He-style initialization for every weighted node of `g`.
///
/// The blob is sized to the furthest reference; gaps stay zero.
pub fn random_weights(g: &Graph, seed: u64) -> WeightBlob {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = g
        .weighted_layers()
        .filter_map(|n| n.weights.as_ref())
        .map(|w| (w.offset + w.byte_len()) / 4)
        .max()
        .unwrap_or(0) as usize;
    let mut data = vec![0.0f32; len];
    for n in g.weighted_layers() {
        let w = n.weights.as_ref().expect("weighted");
        let fan_in = (w.kernel_len() / w.out_len().max(1)).max(1) as f64;
        let feeds_add = g.consumers(n.id).iter().any(|&c| g.node(c).op == Op::Add);
        let gain = if feeds_add { RESIDUAL_GAIN } else { 1.0 };
        let limit = gain * (6.0 / fan_in).sqrt();
        let start = (w.offset / 4) as usize;
        for v in &mut data[start..start + w.kernel_len()] {
            *v = rng.gen_range(-limit..limit) as f32;
        }
        if w.bias {
            let b = start + w.kernel_len();
            for v in &mut data[b..b + w.out_len()] {
                *v = rng.gen_range(-BIAS_RANGE..BIAS_RANGE) as f32;
            }
        }
    }
    WeightBlob::from_floats(data)
}

/// Input tensor with elements drawn from U(-1, 1).
pub fn random_input(shape: TensorShape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        shape,
        (0..shape.elements()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
}
