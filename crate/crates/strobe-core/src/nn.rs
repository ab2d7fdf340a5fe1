//! Shared trainable layers.
//!
//! Parameters are exposed through a visitor (`visit`) that yields
//! `name -> &mut Var` pairs in a stable order; the optimizer and the
//! checkpoint code are built on it.
//!
//! Batch normalization always normalizes with current-batch statistics, in
//! sampling as well as training. That keeps the dense inference path
//! numerically identical to the rate-1 training path (they see the same
//! batches), at the usual cost that sampling statistics depend on the batch
//! being generated together.

use rand::Rng;
use strobe_grad::{concat, init, Tensor, Var};

use crate::config::Activation;

pub type Visit<'a> = dyn FnMut(String, &mut Var) + 'a;

pub fn apply_activation(x: &Var, a: Activation) -> Var {
    match a {
        Activation::Relu => x.relu(),
        Activation::Tanh => x.tanh(),
    }
}

/// Fully connected layer; weight is (in, out), bias (1, out).
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, input: usize, output: usize, gain: f32) -> Linear {
        Linear {
            w: Var::param(init::glorot_uniform(rng, &[input, output], gain)),
            b: Var::param(Tensor::zeros(&[1, output])),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.matmul(&self.w).add(&self.b)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visit) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Stride-1 convolution with zero padding and bias. 2-D convolutions are the
/// special case kernel (1, k, k) applied framewise.
pub struct Conv3 {
    pub w: Var,
    pub b: Var,
    pub pad: [usize; 3],
}

impl Conv3 {
    pub fn new(
        rng: &mut impl Rng,
        ci: usize,
        co: usize,
        k: [usize; 3],
        gain: f32,
    ) -> Conv3 {
        let pad = [(k[0] - 1) / 2, (k[1] - 1) / 2, (k[2] - 1) / 2];
        Conv3 {
            w: Var::param(init::glorot_uniform(rng, &[co, ci, k[0], k[1], k[2]], gain)),
            b: Var::param(Tensor::zeros(&[1, co, 1, 1, 1])),
            pad,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.conv3d(&self.w, self.pad).add(&self.b)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visit) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Batch normalization over (N, T, H, W) per channel, with per-class scale
/// and shift when `classes > 0` (conditional variant).
pub struct BatchNorm {
    /// (max(classes, 1), C) scale and shift.
    pub gamma: Var,
    pub beta: Var,
    pub eps: f32,
}

impl BatchNorm {
    pub fn new(channels: usize, classes: usize) -> BatchNorm {
        let rows = classes.max(1);
        BatchNorm {
            gamma: Var::param(Tensor::full(&[rows, channels], 1.0)),
            beta: Var::param(Tensor::zeros(&[rows, channels])),
            eps: 2e-5,
        }
    }

    /// `labels` must be given iff the layer was built conditional.
    pub fn forward(&self, x: &Var, labels: Option<&[usize]>) -> Var {
        let c = x.shape()[1];
        let mu = x.mean_axes(&[0, 2, 3, 4]);
        let xc = x.sub(&mu);
        let var = xc.square().mean_axes(&[0, 2, 3, 4]);
        let xn = xc.div(&var.add_scalar(self.eps).sqrt());
        let (g, b) = match labels {
            Some(ls) => {
                assert!(
                    self.gamma.shape()[0] > 1,
                    "labels passed to an unconditional batch norm"
                );
                let n = ls.len();
                (
                    self.gamma.index_select(0, ls).reshape(&[n, c, 1, 1, 1]),
                    self.beta.index_select(0, ls).reshape(&[n, c, 1, 1, 1]),
                )
            }
            None => {
                assert!(
                    self.gamma.shape()[0] == 1,
                    "conditional batch norm needs labels"
                );
                (
                    self.gamma.reshape(&[1, c, 1, 1, 1]),
                    self.beta.reshape(&[1, c, 1, 1, 1]),
                )
            }
        };
        xn.mul(&g).add(&b)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visit) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Convolutional LSTM cell (3x3 spatial kernel, framewise).
pub struct Clstm {
    /// Input-to-gates convolution (C -> 4C), no bias.
    pub wx: Var,
    /// Hidden-to-gates convolution (C -> 4C), no bias.
    pub wh: Var,
    /// Shared gate bias (1, 4C, 1, 1, 1).
    pub b: Var,
    channels: usize,
}

impl Clstm {
    pub fn new(rng: &mut impl Rng, channels: usize) -> Clstm {
        Clstm {
            wx: Var::param(init::glorot_uniform(rng, &[4 * channels, channels, 1, 3, 3], 1.0)),
            wh: Var::param(init::glorot_uniform(rng, &[4 * channels, channels, 1, 3, 3], 1.0)),
            b: Var::param(Tensor::zeros(&[1, 4 * channels, 1, 1, 1])),
            channels,
        }
    }

    /// Zero state for a batch over an (h, w) grid.
    pub fn zero_state(&self, n: usize, h: usize, w: usize) -> (Var, Var) {
        let z = Var::constant(Tensor::zeros(&[n, self.channels, 1, h, w]));
        (z.clone(), z)
    }

    /// One step: x, h, c are (N, C, 1, h, w). Returns (h', c').
    pub fn step(&self, x: &Var, h: &Var, c: &Var) -> (Var, Var) {
        let gates = x
            .conv3d(&self.wx, [0, 1, 1])
            .add(&h.conv3d(&self.wh, [0, 1, 1]))
            .add(&self.b);
        let ch = self.channels;
        let part = |k: usize| {
            let idx: Vec<usize> = (k * ch..(k + 1) * ch).collect();
            gates.index_select(1, &idx)
        };
        let i = part(0).sigmoid();
        let f = part(1).sigmoid();
        let o = part(2).sigmoid();
        let u = part(3).tanh();
        let c_next = f.mul(c).add(&i.mul(&u));
        let h_next = o.mul(&c_next.tanh());
        (h_next, c_next)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visit) {
        f(format!("{prefix}.wx"), &mut self.wx);
        f(format!("{prefix}.wh"), &mut self.wh);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Stack per-step maps (N, C, 1, h, w) into (N, C, T, h, w).
pub fn stack_time(steps: &[Var]) -> Var {
    concat(steps, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_output_has_zero_mean_unit_variance_per_channel() {
        let bn = BatchNorm::new(3, 0);
        let x = Var::constant(Tensor::from_fn(&[4, 3, 2, 5, 5], |i| ((i * 31 % 97) as f32) * 0.1));
        let y = bn.forward(&x, None);
        let c = 3;
        let per = y.value().len() / c;
        for ch in 0..c {
            let mut vals = Vec::with_capacity(per);
            let (n, t, h, w) = (4, 2, 5, 5);
            for ni in 0..n {
                for ti in 0..t {
                    for hi in 0..h {
                        for wi in 0..w {
                            let off = (((ni * c + ch) * t + ti) * h + hi) * w + wi;
                            vals.push(y.value().data()[off] as f64);
                        }
                    }
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "channel {} mean {}", ch, mean);
            assert!((var - 1.0).abs() < 1e-2, "channel {} variance {}", ch, var);
        }
    }

    #[test]
    fn conditional_batch_norm_selects_per_sample_scales() {
        let mut bn = BatchNorm::new(1, 2);
        // Class 0 scales by 1, class 1 by 10 (beta shifts by 0 / 5).
        bn.gamma = Var::param(Tensor::new(vec![2, 1], vec![1.0, 10.0]));
        bn.beta = Var::param(Tensor::new(vec![2, 1], vec![0.0, 5.0]));
        let x = Var::constant(Tensor::new(vec![2, 1, 1, 1, 2], vec![-1.0, 1.0, -1.0, 1.0]));
        let y = bn.forward(&x, Some(&[0, 1]));
        let d = y.value().data().to_vec();
        // Normalized x is (+-1); sample 1's entries are 10x + 5.
        assert!((d[0] + 1.0).abs() < 1e-3 && (d[1] - 1.0).abs() < 1e-3, "{:?}", d);
        assert!((d[2] + 5.0).abs() < 1e-2 && (d[3] - 15.0).abs() < 1e-2, "{:?}", d);
    }

    #[test]
    fn clstm_zero_input_zero_state_stays_bounded_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = Clstm::new(&mut rng, 4);
        let x = Var::constant(Tensor::zeros(&[1, 4, 1, 3, 3]));
        let (mut h, mut c) = cell.zero_state(1, 3, 3);
        for _ in 0..5 {
            let (h2, c2) = cell.step(&x, &h, &c);
            h = h2;
            c = c2;
        }
        for &v in h.value().data() {
            assert!(v.abs() <= 1.0, "hidden state out of tanh range: {}", v);
        }
        // Same seed, same trajectory.
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let cell2 = Clstm::new(&mut rng2, 4);
        let (mut h2, mut c2) = cell2.zero_state(1, 3, 3);
        for _ in 0..5 {
            let (a, b) = cell2.step(&x, &h2, &c2);
            h2 = a;
            c2 = b;
        }
        assert_eq!(h.value().data(), h2.value().data());
    }

    #[test]
    fn linear_bias_shifts_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(&mut rng, 3, 2, 1.0);
        lin.b = Var::param(Tensor::new(vec![1, 2], vec![1.0, -1.0]));
        let zero = Var::constant(Tensor::zeros(&[4, 3]));
        let y = lin.forward(&zero);
        assert_eq!(y.value().data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn visitors_use_stable_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cell = Clstm::new(&mut rng, 2);
        let mut names = Vec::new();
        cell.visit("core", &mut |n, _| names.push(n));
        assert_eq!(names, vec!["core.wx", "core.wh", "core.b"]);
    }
}
