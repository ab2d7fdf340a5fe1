//! Weight initialization.

use rand::Rng;

use crate::tensor::Tensor;

/// Fan-in/fan-out of a weight tensor: (in, out) for a rank-2 matmul weight
/// laid out (in_features, out_features); channels times receptive-field size
/// for a rank-5 conv weight (Co, Ci, kt, kh, kw).
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        5 => {
            let receptive = shape[2] * shape[3] * shape[4];
            (shape[1] * receptive, shape[0] * receptive)
        }
        _ => panic!("no fan convention for shape {:?}", shape),
    }
}

/// Glorot (Xavier) uniform init scaled by `gain`: samples from
/// U(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out)), which has variance
/// 2 * gain^2 / (fan_in + fan_out).
pub fn glorot_uniform(rng: &mut impl Rng, shape: &[usize], gain: f32) -> Tensor {
    let (fan_in, fan_out) = fans(shape);
    let a = gain * (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
}
