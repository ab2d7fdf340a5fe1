//! Per-level discriminators and their aggregation.
//!
//! Every rendered level gets its own sub-discriminator, and all of them share
//! one template: a fixed number of residual 3-D blocks whose channels double
//! per block (capped), each followed by average pooling that halves every
//! axis longer than 1. Smaller inputs simply saturate their pooling chain
//! earlier, so the same template serves every level. No normalization layers
//! anywhere; class conditioning uses a projection onto the pooled features.

use rand::Rng;
use strobe_grad::{init, Tensor, Var};

use crate::config::{Activation, DiscriminatorConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{apply_activation, Conv3, Linear, Visit};

/// One residual block. The first block of a sub-discriminator uses the
/// "optimized" layout (convolutions before any activation, shortcut pooled
/// before its projection); later blocks are pre-activation.
struct DBlock {
    first: bool,
    conv1: Conv3,
    conv2: Conv3,
    shortcut: Conv3,
    act: Activation,
}

impl DBlock {
    fn new(rng: &mut impl Rng, ci: usize, co: usize, first: bool, act: Activation) -> DBlock {
        let root2 = 2.0f32.sqrt();
        DBlock {
            first,
            conv1: Conv3::new(rng, ci, co, [3, 3, 3], root2),
            conv2: Conv3::new(rng, co, co, [3, 3, 3], root2),
            shortcut: Conv3::new(rng, ci, co, [1, 1, 1], 1.0),
            act,
        }
    }

    /// Halve every axis of size > 1.
    fn pool(x: &Var) -> Var {
        let s = x.shape();
        let f = [
            if s[2] > 1 { 2 } else { 1 },
            if s[3] > 1 { 2 } else { 1 },
            if s[4] > 1 { 2 } else { 1 },
        ];
        if f == [1, 1, 1] {
            return x.clone();
        }
        x.avg_pool3d(f)
    }

    fn forward(&self, x: &Var) -> Var {
        if self.first {
            let h = self.conv1.forward(x);
            let h = apply_activation(&h, self.act);
            let h = Self::pool(&self.conv2.forward(&h));
            let s = self.shortcut.forward(&Self::pool(x));
            h.add(&s)
        } else {
            let h = apply_activation(x, self.act);
            let h = self.conv1.forward(&h);
            let h = apply_activation(&h, self.act);
            let h = Self::pool(&self.conv2.forward(&h));
            let s = Self::pool(&self.shortcut.forward(x));
            h.add(&s)
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut Visit) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.shortcut.visit(&format!("{prefix}.shortcut"), f);
    }
}

/// One level's critic: blocks, global sum pooling, a linear head, and an
/// optional class-projection term.
struct SubDisc {
    blocks: Vec<DBlock>,
    fc: Linear,
    embed: Option<Var>,
    act: Activation,
}

impl SubDisc {
    fn new(
        rng: &mut impl Rng,
        colors: usize,
        cfg: &DiscriminatorConfig,
        classes: usize,
    ) -> SubDisc {
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut ci = colors;
        for i in 0..cfg.blocks {
            let co = cfg.block_channels(i);
            blocks.push(DBlock::new(rng, ci, co, i == 0, cfg.activation));
            ci = co;
        }
        let fc = Linear::new(rng, ci, 1, 1.0);
        let embed = (classes > 0)
            .then(|| Var::param(init::glorot_uniform(rng, &[classes, ci], 1.0)));
        SubDisc { blocks, fc, embed, act: cfg.activation }
    }

    fn forward(&self, x: &Var, labels: Option<&[usize]>) -> Var {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h);
        }
        let h = apply_activation(&h, self.act);
        let n = h.shape()[0];
        let c = h.shape()[1];
        let feat = h.sum_axes(&[2, 3, 4]).reshape(&[n, c]);
        let mut logit = self.fc.forward(&feat);
        if let (Some(embed), Some(ls)) = (&self.embed, labels) {
            let rows = embed.index_select(0, ls); // (N, C)
            logit = logit.add(&rows.mul(&feat).sum_axes(&[1]));
        }
        logit
    }

    fn visit(&mut self, prefix: &str, f: &mut Visit) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        self.fc.visit(&format!("{prefix}.fc"), f);
        if let Some(e) = &mut self.embed {
            f(format!("{prefix}.embed"), e);
        }
    }
}

pub struct Discriminator {
    subs: Vec<SubDisc>,
    frame_sub: Option<SubDisc>,
    classes: usize,
}

impl Discriminator {
    /// `level_count` sub-discriminators plus, optionally, a single-frame one.
    pub fn new(
        model: &ModelConfig,
        cfg: &DiscriminatorConfig,
        level_count: usize,
        rng: &mut impl Rng,
    ) -> Result<Discriminator> {
        cfg.validate()?;
        if level_count == 0 {
            return Err(Error::config("discriminator needs at least one level"));
        }
        let subs = (0..level_count)
            .map(|_| SubDisc::new(rng, model.color_channels, cfg, model.labels))
            .collect();
        let frame_sub = cfg
            .frame_discriminator
            .then(|| SubDisc::new(rng, model.color_channels, cfg, model.labels));
        Ok(Discriminator { subs, frame_sub, classes: model.labels })
    }

    pub fn level_count(&self) -> usize {
        self.subs.len()
    }

    pub fn has_frame_critic(&self) -> bool {
        self.frame_sub.is_some()
    }

    fn check_labels(&self, labels: Option<&[usize]>, n: usize) -> Result<()> {
        match (self.classes, labels) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::config("unconditional critic; labels not allowed")),
            (_, None) => Err(Error::config("conditional critic requires labels")),
            (k, Some(ls)) if ls.len() == n && ls.iter().all(|&l| l < k) => Ok(()),
            _ => Err(Error::config("bad label batch")),
        }
    }

    /// Logit of level `level` (0-based) for a video batch: (N, 1).
    pub fn sub_score(&self, level: usize, x: &Var, labels: Option<&[usize]>) -> Result<Var> {
        if level >= self.subs.len() {
            return Err(Error::config(format!(
                "level {} of a {}-level critic",
                level,
                self.subs.len()
            )));
        }
        if x.shape().len() != 5 {
            return Err(Error::shape(format!("critic input must be rank 5, got {:?}", x.shape())));
        }
        self.check_labels(labels, x.shape()[0])?;
        Ok(self.subs[level].forward(x, labels))
    }

    /// Logit of the single-frame critic for (N, C, 1, H, W) inputs.
    pub fn frame_score(&self, x: &Var, labels: Option<&[usize]>) -> Result<Var> {
        let sub = self
            .frame_sub
            .as_ref()
            .ok_or_else(|| Error::config("no frame critic configured"))?;
        if x.shape().len() != 5 || x.shape()[2] != 1 {
            return Err(Error::shape(format!(
                "frame critic input must be (N,C,1,H,W), got {:?}",
                x.shape()
            )));
        }
        self.check_labels(labels, x.shape()[0])?;
        Ok(sub.forward(x, labels))
    }

    pub fn visit_params(&mut self, f: &mut Visit) {
        for (l, s) in self.subs.iter_mut().enumerate() {
            s.visit(&format!("disc.l{}", l + 1), f);
        }
        if let Some(s) = &mut self.frame_sub {
            s.visit("disc.frame", f);
        }
    }

    pub fn named_params(&mut self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, v| out.push((name, v.clone())));
        out
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, v| n += v.value().len());
        n
    }
}

/// Overall decision: sigmoid of the sum of per-level logits, (N, 1) in (0,1).
pub fn aggregate(level_logits: &[Var]) -> Var {
    assert!(!level_logits.is_empty(), "aggregate of zero levels");
    let mut sum = level_logits[0].clone();
    for l in &level_logits[1..] {
        sum = sum.add(l);
    }
    sum.sigmoid()
}

/// Sum of per-level logits without the sigmoid (loss-side aggregation).
pub fn logit_sum(level_logits: &[Var]) -> Var {
    assert!(!level_logits.is_empty());
    let mut sum = level_logits[0].clone();
    for l in &level_logits[1..] {
        sum = sum.add(l);
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_disc(seed: u64, levels: usize) -> Discriminator {
        let cfg = preset("tiny-16").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Discriminator::new(&cfg.model, &cfg.discriminator, levels, &mut rng).unwrap()
    }

    #[test]
    fn scores_every_pyramid_level_shape() {
        let d = tiny_disc(1, 4);
        // Level shapes for a 16x16, T=16, rate-2, 4-level model.
        let shapes: [[usize; 5]; 4] =
            [[2, 1, 16, 2, 2], [2, 1, 8, 4, 4], [2, 1, 4, 8, 8], [2, 1, 2, 16, 16]];
        for (l, s) in shapes.iter().enumerate() {
            let x = Var::constant(Tensor::from_fn(s, |i| ((i % 13) as f32) * 0.1 - 0.6));
            let y = d.sub_score(l, &x, None).unwrap();
            assert_eq!(y.shape(), &[2, 1], "level {}", l);
            assert!(y.value().data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn aggregate_of_zero_logits_is_exactly_half() {
        let zeros = vec![Var::constant(Tensor::zeros(&[3, 1])); 4];
        let p = aggregate(&zeros);
        assert_eq!(p.value().data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn single_frame_critic_accepts_one_frame_only() {
        let cfg = preset("3d+2d").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Discriminator::new(&cfg.model, &cfg.discriminator, 1, &mut rng).unwrap();
        assert!(d.has_frame_critic());
        let frame = Var::constant(Tensor::zeros(&[2, 3, 1, 64, 64]));
        assert_eq!(d.frame_score(&frame, None).unwrap().shape(), &[2, 1]);
        let clip = Var::constant(Tensor::zeros(&[2, 3, 4, 64, 64]));
        assert!(d.frame_score(&clip, None).is_err());
    }

    #[test]
    fn conv_init_variance_matches_glorot_formula() {
        let mut d = tiny_disc(3, 1);
        // Grab a large-ish interior conv weight and check its sample
        // variance against 2 * gain^2 / (fan_in + fan_out), gain = sqrt(2).
        let mut w: Option<Tensor> = None;
        d.visit_params(&mut |name, v| {
            if name == "disc.l1.block1.conv2.w" {
                w = Some(v.value().clone());
            }
        });
        let w = w.expect("conv weight present");
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var: f64 = w.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let (fi, fo) = strobe_grad::init::fans(w.shape());
        let expect = 2.0 * 2.0 / (fi + fo) as f64; // gain^2 = 2
        assert!(
            (var - expect).abs() / expect < 0.05,
            "variance {} vs formula {} for {:?}",
            var,
            expect,
            w.shape()
        );
    }

    #[test]
    fn projection_conditioning_shifts_scores_per_label() {
        let mut cfg = preset("tiny-16").unwrap();
        cfg.model.labels = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Discriminator::new(&cfg.model, &cfg.discriminator, 1, &mut rng).unwrap();
        let x = Var::constant(Tensor::from_fn(&[2, 1, 16, 2, 2], |i| (i as f32 * 0.13).sin()));
        let a = d.sub_score(0, &x, Some(&[0, 0])).unwrap();
        let b = d.sub_score(0, &x, Some(&[3, 3])).unwrap();
        assert_ne!(a.value().data(), b.value().data());
        assert!(d.sub_score(0, &x, None).is_err());
    }

    #[test]
    fn same_template_at_every_level_means_equal_param_counts() {
        let mut d = tiny_disc(5, 4);
        let mut per_level = std::collections::BTreeMap::<String, usize>::new();
        d.visit_params(&mut |name, v| {
            let level = name.split('.').nth(1).unwrap().to_string();
            *per_level.entry(level).or_default() += v.value().len();
        });
        let counts: Vec<usize> = per_level.values().copied().collect();
        assert_eq!(counts.len(), 4);
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{:?}", counts);
    }
}
