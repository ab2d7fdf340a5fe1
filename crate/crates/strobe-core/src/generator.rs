//! Multi-stage video generator.
//!
//! A recurrent convolutional core turns one latent vector into a T-step
//! sequence of low-resolution feature maps. A chain of residual upsampling
//! stages doubles the spatial size per level, and each level has a render
//! head producing a video at that resolution. During training, junctions
//! between stages drop frames (see [`crate::subsample`]); at inference the
//! same weights process every frame at every stage and only the final level
//! is rendered.

use rand::Rng;
use rand_distr::StandardNormal;
use strobe_grad::{concat, Tensor, Var};

use crate::config::{EmitLevels, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{stack_time, BatchNorm, Clstm, Conv3, Linear, Visit};
use crate::subsample::{subsample_frames, SubsampleSpec};
use crate::types::VideoBatch;

/// Residual upsampling block: pre-activation body with a learned shortcut,
/// doubling H and W. Normalization is class-conditional when labels exist.
struct UpBlock {
    bn1: BatchNorm,
    conv1: Conv3,
    bn2: BatchNorm,
    conv2: Conv3,
    shortcut: Conv3,
}

impl UpBlock {
    fn new(rng: &mut impl Rng, ci: usize, co: usize, classes: usize) -> UpBlock {
        let root2 = 2.0f32.sqrt();
        UpBlock {
            bn1: BatchNorm::new(ci, classes),
            conv1: Conv3::new(rng, ci, co, [1, 3, 3], root2),
            bn2: BatchNorm::new(co, classes),
            conv2: Conv3::new(rng, co, co, [1, 3, 3], root2),
            shortcut: Conv3::new(rng, ci, co, [1, 1, 1], 1.0),
        }
    }

    fn forward(&self, x: &Var, labels: Option<&[usize]>) -> Var {
        let h = self.bn1.forward(x, labels).relu().unpool2x();
        let h = self.conv1.forward(&h);
        let h = self.bn2.forward(&h, labels).relu();
        let h = self.conv2.forward(&h);
        let s = self.shortcut.forward(&x.unpool2x());
        h.add(&s)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visit) {
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.shortcut.visit(&format!("{prefix}.shortcut"), f);
    }
}

/// Per-level render head: normalize, activate, project to color, squash.
struct RenderHead {
    bn: BatchNorm,
    conv: Conv3,
}

impl RenderHead {
    fn new(rng: &mut impl Rng, ci: usize, colors: usize, classes: usize) -> RenderHead {
        RenderHead {
            bn: BatchNorm::new(ci, classes),
            conv: Conv3::new(rng, ci, colors, [1, 3, 3], 1.0),
        }
    }

    fn forward(&self, x: &Var, labels: Option<&[usize]>) -> Var {
        self.conv.forward(&self.bn.forward(x, labels).relu()).tanh()
    }

    fn visit(&mut self, prefix: &str, f: &mut Visit) {
        self.bn.visit(&format!("{prefix}.bn"), f);
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
}

pub struct Generator {
    pub cfg: ModelConfig,
    fc_h: Linear,
    fc_z: Linear,
    clstm: Clstm,
    ups: Vec<UpBlock>,
    renders: Vec<RenderHead>,
}

/// Standard-normal latent batch (N, latent_dim).
pub fn sample_z(n: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[n, dim], |_| rng.sample::<f32, _>(StandardNormal))
}

impl Generator {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Generator> {
        cfg.validate()?;
        let (h0, w0) = cfg.initial_hw();
        let zin = cfg.latent_dim + cfg.labels;
        let fc_h = Linear::new(rng, zin, cfg.clstm_channels * h0 * w0, 1.0);
        let fc_z = Linear::new(rng, zin, cfg.z_channels, 1.0);
        let clstm = Clstm::new(rng, cfg.clstm_channels);
        let mut ups = Vec::with_capacity(cfg.channel_plan.len());
        let mut ci = cfg.clstm_channels + cfg.z_channels;
        for &co in &cfg.channel_plan {
            ups.push(UpBlock::new(rng, ci, co, cfg.labels));
            ci = co;
        }
        let renders = (1..=cfg.levels)
            .map(|l| RenderHead::new(rng, cfg.render_channels(l), cfg.color_channels, cfg.labels))
            .collect();
        Ok(Generator { cfg: cfg.clone(), fc_h, fc_z, clstm, ups, renders })
    }

    fn check_labels(&self, labels: Option<&[usize]>, n: usize) -> Result<()> {
        match (self.cfg.labels, labels) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::config("model is unconditional; labels not allowed")),
            (_, None) => Err(Error::config("conditional model requires labels")),
            (k, Some(ls)) => {
                if ls.len() != n {
                    return Err(Error::shape(format!(
                        "{} labels for a batch of {}",
                        ls.len(),
                        n
                    )));
                }
                if ls.iter().any(|&l| l >= k) {
                    return Err(Error::config(format!("label out of range 0..{}", k)));
                }
                Ok(())
            }
        }
    }

    /// Latent plus one-hot label columns when conditional.
    fn latent_input(&self, z: &Var, labels: Option<&[usize]>) -> Var {
        match labels {
            None => z.clone(),
            Some(ls) => {
                let n = z.shape()[0];
                let mut onehot = Tensor::zeros(&[n, self.cfg.labels]);
                for (i, &l) in ls.iter().enumerate() {
                    onehot.data_mut()[i * self.cfg.labels + l] = 1.0;
                }
                concat(&[z.clone(), Var::constant(onehot)], 1)
            }
        }
    }

    /// Unroll the recurrent core over all T steps and attach the broadcast
    /// latent map: output is (N, clstm_channels + z_channels, T, h0, w0).
    /// The core sees the projected latent at t = 0 and the projection of a
    /// zero vector afterwards; state carries the signal forward.
    pub fn temporal_generate(&self, z: &Var, labels: Option<&[usize]>) -> Result<Var> {
        let n = z.shape()[0];
        if z.shape().len() != 2 || z.shape()[1] != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "latent batch must be (N, {}), got {:?}",
                self.cfg.latent_dim,
                z.shape()
            )));
        }
        self.check_labels(labels, n)?;
        let (h0, w0) = self.cfg.initial_hw();
        let c0 = self.cfg.clstm_channels;
        let zin = self.latent_input(z, labels);

        let first = self.fc_h.forward(&zin).reshape(&[n, c0, 1, h0, w0]);
        let rest = self
            .fc_h
            .forward(&Var::constant(Tensor::zeros(&[n, zin.shape()[1]])))
            .reshape(&[n, c0, 1, h0, w0]);

        let (mut h, mut c) = self.clstm.zero_state(n, h0, w0);
        let mut steps = Vec::with_capacity(self.cfg.frames);
        for t in 0..self.cfg.frames {
            let x = if t == 0 { &first } else { &rest };
            let (h2, c2) = self.clstm.step(x, &h, &c);
            h = h2;
            c = c2;
            steps.push(h.clone());
        }
        let core = stack_time(&steps);

        let zmap = self
            .fc_z
            .forward(&zin)
            .reshape(&[n, self.cfg.z_channels, 1, 1, 1])
            .broadcast_to(&[n, self.cfg.z_channels, self.cfg.frames, h0, w0]);
        Ok(concat(&[core, zmap], 1))
    }

    /// Blocks of stage `level` (1-based). Stage 1 owns the first
    /// `stage1_blocks()` blocks; each later stage has exactly one.
    fn stage_blocks(&self, level: usize) -> std::ops::Range<usize> {
        let s1 = self.cfg.stage1_blocks();
        if level == 1 {
            0..s1
        } else {
            s1 + level - 2..s1 + level - 1
        }
    }

    /// Run the upsampling blocks of one stage.
    pub fn abstract_forward(&self, level: usize, h: &Var, labels: Option<&[usize]>) -> Result<Var> {
        if level == 0 || level > self.cfg.levels {
            return Err(Error::config(format!("level {} outside 1..={}", level, self.cfg.levels)));
        }
        let mut x = h.clone();
        for b in self.stage_blocks(level) {
            x = self.ups[b].forward(&x, labels);
        }
        Ok(x)
    }

    /// Render the level-l video from that stage's feature map.
    pub fn render(&self, level: usize, h: &Var, labels: Option<&[usize]>) -> Result<Var> {
        if level == 0 || level > self.cfg.levels {
            return Err(Error::config(format!("level {} outside 1..={}", level, self.cfg.levels)));
        }
        let expect = self.cfg.render_channels(level);
        if h.shape()[1] != expect {
            return Err(Error::shape(format!(
                "level {} render expects {} channels, got {:?}",
                level,
                expect,
                h.shape()
            )));
        }
        Ok(self.renders[level - 1].forward(h, labels))
    }

    /// Dense path: every stage sees every frame; only the last level is
    /// rendered. This is the sampling path used by all commands.
    pub fn infer(&self, z: &Var, labels: Option<&[usize]>) -> Result<VideoBatch> {
        let mut h = self.temporal_generate(z, labels)?;
        for level in 1..=self.cfg.levels {
            h = self.abstract_forward(level, &h, labels)?;
        }
        let video = self.render(self.cfg.levels, &h, labels)?;
        VideoBatch::new(video.value().clone())
    }

    /// Dense path rendering every level (level-consistency evaluation).
    pub fn infer_levels(&self, z: &Var, labels: Option<&[usize]>) -> Result<Vec<VideoBatch>> {
        let mut h = self.temporal_generate(z, labels)?;
        let mut out = Vec::with_capacity(self.cfg.levels);
        for level in 1..=self.cfg.levels {
            h = self.abstract_forward(level, &h, labels)?;
            out.push(VideoBatch::new(self.render(level, &h, labels)?.value().clone())?);
        }
        Ok(out)
    }

    /// Training path: stages are separated by the given frame-subsampling
    /// junctions (`levels - 1` specs). Returns the rendered videos as graph
    /// nodes — all levels for `EmitLevels::All`, only the last for `Last`.
    pub fn train_forward(
        &self,
        z: &Var,
        labels: Option<&[usize]>,
        specs: &[SubsampleSpec],
        emit: EmitLevels,
    ) -> Result<Vec<Var>> {
        if specs.len() + 1 != self.cfg.levels {
            return Err(Error::config(format!(
                "{} levels need {} junction specs, got {}",
                self.cfg.levels,
                self.cfg.levels - 1,
                specs.len()
            )));
        }
        let mut h = self.temporal_generate(z, labels)?;
        let mut out = Vec::new();
        for level in 1..=self.cfg.levels {
            h = self.abstract_forward(level, &h, labels)?;
            let wanted = match emit {
                EmitLevels::All => true,
                EmitLevels::Last => level == self.cfg.levels,
            };
            if wanted {
                out.push(self.render(level, &h, labels)?);
            }
            if level < self.cfg.levels {
                h = subsample_frames(&h, &specs[level - 1])?;
            }
        }
        Ok(out)
    }

    /// Videos along the straight line between two latents (`steps` >= 2
    /// rows, endpoints included), generated as one batch.
    pub fn interpolate(
        &self,
        za: &Tensor,
        zb: &Tensor,
        steps: usize,
        labels: Option<&[usize]>,
    ) -> Result<VideoBatch> {
        if steps < 2 {
            return Err(Error::config("interpolation needs at least 2 steps"));
        }
        if za.shape() != [1, self.cfg.latent_dim] || zb.shape() != [1, self.cfg.latent_dim] {
            return Err(Error::shape(format!(
                "endpoints must be (1, {}), got {:?} and {:?}",
                self.cfg.latent_dim,
                za.shape(),
                zb.shape()
            )));
        }
        let d = self.cfg.latent_dim;
        let z = Tensor::from_fn(&[steps, d], |i| {
            let (row, col) = (i / d, i % d);
            let alpha = row as f32 / (steps - 1) as f32;
            (1.0 - alpha) * za.data()[col] + alpha * zb.data()[col]
        });
        self.infer(&Var::constant(z), labels)
    }

    pub fn visit_params(&mut self, f: &mut Visit) {
        self.fc_h.visit("gen.fc_h", f);
        self.fc_z.visit("gen.fc_z", f);
        self.clstm.visit("gen.clstm", f);
        for (i, up) in self.ups.iter_mut().enumerate() {
            up.visit(&format!("gen.up{i}"), f);
        }
        for (l, r) in self.renders.iter_mut().enumerate() {
            r.visit(&format!("gen.render{}", l + 1), f);
        }
    }

    /// Named parameter nodes in visitation order (clones share the graph).
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::subsample::make_train_specs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_gen(seed: u64) -> Generator {
        let cfg = preset("tiny-16").unwrap().model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Generator::new(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn infer_produces_full_resolution_clip() {
        let gen = tiny_gen(1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = Var::constant(sample_z(2, 64, &mut rng));
        let v = gen.infer(&z, None).unwrap();
        assert_eq!(v.tensor().shape(), &[2, 1, 16, 16, 16]);
    }

    #[test]
    fn train_forward_frame_counts_follow_schedule() {
        let gen = tiny_gen(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Var::constant(sample_z(2, 64, &mut rng));
        let specs = make_train_specs(16, 2, 4, &mut rng).unwrap();
        let vids = gen.train_forward(&z, None, &specs, EmitLevels::All).unwrap();
        let frames: Vec<usize> = vids.iter().map(|v| v.shape()[2]).collect();
        assert_eq!(frames, vec![16, 8, 4, 2]);
        let heights: Vec<usize> = vids.iter().map(|v| v.shape()[3]).collect();
        assert_eq!(heights, vec![2, 4, 8, 16]);

        let specs4 = make_train_specs(16, 4, 4, &mut rng).unwrap();
        // Same weights can train at another rate; only the junctions change.
        let vids4 = gen.train_forward(&z, None, &specs4, EmitLevels::All).unwrap();
        let frames4: Vec<usize> = vids4.iter().map(|v| v.shape()[2]).collect();
        assert_eq!(frames4, vec![16, 4, 1, 1]);
    }

    #[test]
    fn identity_junctions_match_dense_inference_bitwise() {
        let gen = tiny_gen(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = Var::constant(sample_z(3, 64, &mut rng));
        let specs: Vec<_> = crate::subsample::frame_schedule(16, 1, 4)[..3]
            .iter()
            .map(|&t| SubsampleSpec::identity(t))
            .collect();
        let sparse = gen.train_forward(&z, None, &specs, EmitLevels::All).unwrap();
        let dense = gen.infer(&z, None).unwrap();
        assert_eq!(sparse.last().unwrap().value().data(), dense.tensor().data());
    }

    #[test]
    fn emit_last_returns_single_video() {
        let gen = tiny_gen(4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = Var::constant(sample_z(1, 64, &mut rng));
        let specs = make_train_specs(16, 2, 4, &mut rng).unwrap();
        let vids = gen.train_forward(&z, None, &specs, EmitLevels::Last).unwrap();
        assert_eq!(vids.len(), 1);
        assert_eq!(vids[0].shape(), &[1, 1, 2, 16, 16]);
    }

    #[test]
    fn conditional_model_requires_and_uses_labels() {
        let mut cfg = preset("tiny-16").unwrap().model;
        cfg.labels = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = Generator::new(&cfg, &mut rng).unwrap();
        let z = Var::constant(sample_z(2, 64, &mut rng));
        assert!(gen.infer(&z, None).is_err());
        let a = gen.infer(&z, Some(&[0, 0])).unwrap();
        let b = gen.infer(&z, Some(&[2, 2])).unwrap();
        assert_ne!(a.tensor().data(), b.tensor().data(), "labels must steer the output");
    }

    #[test]
    fn interpolation_endpoints_and_shape() {
        let gen = tiny_gen(6);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let za = sample_z(1, 64, &mut rng);
        let zb = sample_z(1, 64, &mut rng);
        let v = gen.interpolate(&za, &zb, 5, None).unwrap();
        assert_eq!(v.tensor().shape(), &[5, 1, 16, 16, 16]);
        assert!(gen.interpolate(&za, &zb, 1, None).is_err());
    }

    #[test]
    fn same_seed_same_weights_same_output() {
        let g1 = tiny_gen(7);
        let g2 = tiny_gen(7);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let z = Var::constant(sample_z(2, 64, &mut rng));
        let a = g1.infer(&z, None).unwrap();
        let b = g2.infer(&z, None).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
    }
}
