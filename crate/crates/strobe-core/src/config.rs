//! Run configuration: model/discriminator/training/dataset/eval/output.
//!
//! Configs are TOML documents with unknown keys rejected. Named presets
//! cover the published training scales plus a desk-scale setup and two
//! single-video baselines (one full-resolution 3-D discriminator, optionally
//! paired with a 2-D frame discriminator).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonlinearity used inside the discriminator.
///
/// `Tanh` exists because finite-difference verification of gradient
/// penalties needs a twice-differentiable network; training defaults to
/// `Relu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Which rendered levels the training loop emits and scores.
/// `All` is the multi-level method; `Last` reproduces single-video baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitLevels {
    All,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of rendered levels L; level l outputs height/2^(L-l) pixels.
    pub levels: usize,
    /// Temporal subsampling rate s_t between stages during training.
    pub rate: usize,
    /// Full clip length T generated at inference.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Dimension of the latent noise vector z.
    pub latent_dim: usize,
    /// Channels of the recurrent temporal core.
    pub clstm_channels: usize,
    /// Channels of the per-frame latent map concatenated before the first
    /// upsample block.
    pub z_channels: usize,
    /// Output channels of each rendered video (3 for RGB data).
    pub color_channels: usize,
    /// Output channels of every upsample block, in forward order. The first
    /// `channel_plan.len() - (levels - 1)` blocks belong to stage 1; each
    /// later stage has exactly one block (one spatial doubling per level).
    pub channel_plan: Vec<usize>,
    /// Number of class labels; 0 disables conditioning.
    pub labels: usize,
}

impl ModelConfig {
    /// Upsample blocks belonging to stage 1.
    pub fn stage1_blocks(&self) -> usize {
        self.channel_plan.len() - (self.levels - 1)
    }

    /// Spatial size of the recurrent core's grid.
    pub fn initial_hw(&self) -> (usize, usize) {
        let f = 1usize << self.channel_plan.len();
        (self.height / f, self.width / f)
    }

    /// Height of the level-l render (1-based level).
    pub fn level_height(&self, level: usize) -> usize {
        self.height >> (self.levels - level)
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.width >> (self.levels - level)
    }

    /// Index into `channel_plan` of the last block of each level; the render
    /// head of level l reads this many channels.
    pub fn render_channels(&self, level: usize) -> usize {
        if level == 1 && self.stage1_blocks() == 0 {
            return self.clstm_channels;
        }
        let idx = if level == 1 {
            self.stage1_blocks() - 1
        } else {
            self.stage1_blocks() + (level - 2)
        };
        self.channel_plan[idx]
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("levels must be at least 1"));
        }
        if self.rate == 0 {
            return Err(Error::config("rate must be at least 1"));
        }
        if self.frames == 0 {
            return Err(Error::config("frames must be at least 1"));
        }
        if self.channel_plan.len() < self.levels.saturating_sub(1) {
            return Err(Error::config(format!(
                "channel_plan has {} blocks but {} levels need at least {}",
                self.channel_plan.len(),
                self.levels,
                self.levels - 1
            )));
        }
        let f = 1usize << self.channel_plan.len();
        if self.height % f != 0 || self.width % f != 0 || self.height / f == 0 || self.width / f == 0
        {
            return Err(Error::config(format!(
                "{}x{} is not {} doublings of a positive grid",
                self.height,
                self.width,
                self.channel_plan.len()
            )));
        }
        if self.latent_dim == 0 || self.clstm_channels == 0 || self.z_channels == 0 {
            return Err(Error::config("latent_dim, clstm_channels, z_channels must be positive"));
        }
        if self.color_channels == 0 {
            return Err(Error::config("color_channels must be positive"));
        }
        if self.channel_plan.iter().any(|&c| c == 0) {
            return Err(Error::config("channel_plan entries must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Residual blocks per sub-discriminator; identical at every level.
    pub blocks: usize,
    /// Channels of the first block; doubled per block up to `channel_cap`.
    pub base_channels: usize,
    pub channel_cap: usize,
    pub activation: Activation,
    /// Adds a 2-D discriminator on one random frame (single-video baseline).
    pub frame_discriminator: bool,
}

impl DiscriminatorConfig {
    /// Output channels of block i (0-based).
    pub fn block_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.channel_cap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::config("discriminator needs at least one block"));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(Error::config("discriminator channels must be positive and capped above base"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub iterations: usize,
    /// Base Adam learning rate, decayed linearly to zero over `iterations`.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the zero-centered gradient penalty on real inputs.
    pub r1_weight: f64,
    pub seed: u64,
    /// Snapshot cadence in iterations (also snapshots at the end).
    pub snapshot_every: usize,
    pub emit: EmitLevels,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if self.r1_weight < 0.0 {
            return Err(Error::config("r1_weight must be non-negative"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::config("snapshot_every must be positive"));
        }
        Ok(())
    }
}

/// Where training clips come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Procedural moving-shapes clips rendered on the fly.
    Toy {
        /// Squares per clip.
        shapes: usize,
        /// Square side length in pixels.
        size: f64,
        /// Per-frame speed range in pixels.
        speed_min: f64,
        speed_max: f64,
    },
    /// Directories of PNG frames listed in a JSONL manifest.
    Frames {
        manifest: PathBuf,
        /// Random horizontal flip augmentation.
        flip: bool,
    },
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Toy { shapes, size, speed_min, speed_max } => {
                if *shapes == 0 {
                    return Err(Error::config("toy dataset needs at least one shape"));
                }
                if !(*size > 0.0) {
                    return Err(Error::config("toy shape size must be positive"));
                }
                if *speed_min < 0.0 || speed_max < speed_min {
                    return Err(Error::config("toy speed range must satisfy 0 <= min <= max"));
                }
            }
            DatasetConfig::Frames { .. } => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Clips generated (and real clips sampled) per score estimate.
    pub samples: usize,
    /// Generation batch size during evaluation.
    pub batch: usize,
    /// Splits used by the inception-style score.
    pub splits: usize,
    /// Independent repeats aggregated into mean/std.
    pub repeats: usize,
    /// Feature network checkpoint; toy runs may omit it and train one.
    pub embedder: Option<PathBuf>,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.batch == 0 || self.splits == 0 || self.repeats == 0 {
            return Err(Error::config("eval sample/batch/split/repeat counts must be positive"));
        }
        if self.samples % self.splits != 0 {
            return Err(Error::config(format!(
                "eval samples {} must divide evenly into {} splits",
                self.samples, self.splits
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory; relative paths resolve under $STROBE_OUTPUT_ROOT when
    /// that is set.
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: TrainingConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.discriminator.validate()?;
        self.training.validate()?;
        self.dataset.validate()?;
        self.eval.validate()?;
        // Cross-checks.
        let pyramid = 1usize << (self.model.levels - 1);
        if self.model.height % pyramid != 0 || self.model.width % pyramid != 0 {
            return Err(Error::config(format!(
                "{}x{} cannot form a {}-level pyramid",
                self.model.height, self.model.width, self.model.levels
            )));
        }
        if self.model.labels > 0 {
            if let DatasetConfig::Toy { .. } = self.dataset {
                // Toy labels are motion-direction quadrants.
                if self.model.labels != 4 {
                    return Err(Error::config("toy dataset provides exactly 4 labels"));
                }
            }
        }
        Ok(())
    }

    pub fn parse_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("bad config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {}", path.display(), e)))?;
        RunConfig::parse_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Resolve the output directory against $STROBE_OUTPUT_ROOT.
    pub fn output_dir(&self) -> PathBuf {
        if self.output.dir.is_absolute() {
            return self.output.dir.clone();
        }
        match std::env::var_os("STROBE_OUTPUT_ROOT") {
            Some(root) => PathBuf::from(root).join(&self.output.dir),
            None => self.output.dir.clone(),
        }
    }
}

/// Named presets. `None` for unknown names; (`preset_names`) lists them.
pub fn preset(name: &str) -> Option<RunConfig> {
    let base_eval = EvalConfig { samples: 256, batch: 32, splits: 2, repeats: 4, embedder: None };
    let cfg = match name.to_ascii_lowercase().as_str() {
        "paper-192px" => RunConfig {
            model: ModelConfig {
                levels: 4,
                rate: 2,
                frames: 16,
                height: 192,
                width: 192,
                latent_dim: 256,
                clstm_channels: 1024,
                z_channels: 256,
                color_channels: 3,
                channel_plan: vec![512, 256, 128, 128, 64, 32],
                labels: 0,
            },
            discriminator: DiscriminatorConfig {
                blocks: 5,
                base_channels: 32,
                channel_cap: 1024,
                activation: Activation::Relu,
                frame_discriminator: false,
            },
            training: TrainingConfig {
                batch_size: 32,
                iterations: 100_000,
                lr: 1e-4,
                beta1: 0.0,
                beta2: 0.9,
                r1_weight: 0.5,
                seed: 1,
                snapshot_every: 10_000,
                emit: EmitLevels::All,
            },
            dataset: DatasetConfig::Frames { manifest: PathBuf::from("data/manifest.jsonl"), flip: true },
            eval: EvalConfig { samples: 2048, batch: 32, splits: 8, repeats: 4, embedder: None },
            output: OutputConfig { dir: PathBuf::from("runs/paper-192px") },
        },
        "paper-256px" => {
            let mut cfg = preset("paper-192px")?;
            cfg.model.height = 256;
            cfg.model.width = 256;
            cfg.output.dir = PathBuf::from("runs/paper-256px");
            cfg
        }
        "desk-64px" => RunConfig {
            model: ModelConfig {
                levels: 4,
                rate: 2,
                frames: 16,
                height: 64,
                width: 64,
                latent_dim: 256,
                clstm_channels: 256,
                z_channels: 64,
                color_channels: 3,
                channel_plan: vec![256, 128, 64, 32, 16],
                labels: 0,
            },
            discriminator: DiscriminatorConfig {
                blocks: 4,
                base_channels: 32,
                channel_cap: 256,
                activation: Activation::Relu,
                frame_discriminator: false,
            },
            training: TrainingConfig {
                batch_size: 16,
                iterations: 20_000,
                lr: 1e-4,
                beta1: 0.0,
                beta2: 0.9,
                r1_weight: 0.5,
                seed: 1,
                snapshot_every: 2_000,
                emit: EmitLevels::All,
            },
            dataset: DatasetConfig::Toy { shapes: 1, size: 20.0, speed_min: 0.5, speed_max: 2.0 },
            eval: base_eval.clone(),
            output: OutputConfig { dir: PathBuf::from("runs/desk-64px") },
        },
        "tiny-16" => RunConfig {
            model: ModelConfig {
                levels: 4,
                rate: 2,
                frames: 16,
                height: 16,
                width: 16,
                latent_dim: 64,
                clstm_channels: 64,
                z_channels: 32,
                color_channels: 1,
                channel_plan: vec![64, 32, 16, 16],
                labels: 0,
            },
            discriminator: DiscriminatorConfig {
                blocks: 3,
                base_channels: 16,
                channel_cap: 128,
                activation: Activation::Relu,
                frame_discriminator: false,
            },
            training: TrainingConfig {
                batch_size: 8,
                iterations: 1_500,
                lr: 1e-4,
                beta1: 0.0,
                beta2: 0.9,
                r1_weight: 0.5,
                seed: 1,
                snapshot_every: 500,
                emit: EmitLevels::All,
            },
            dataset: DatasetConfig::Toy { shapes: 1, size: 6.0, speed_min: 0.3, speed_max: 1.0 },
            eval: EvalConfig { samples: 256, batch: 32, splits: 2, repeats: 4, embedder: None },
            output: OutputConfig { dir: PathBuf::from("runs/tiny-16") },
        },
        "tiny-16-naive" => {
            // Identical architecture with every junction disabled: each level
            // trains on full-length clips.
            let mut cfg = preset("tiny-16")?;
            cfg.model.rate = 1;
            cfg.output.dir = PathBuf::from("runs/tiny-16-naive");
            cfg
        }
        "single-3d" => {
            // One full-resolution 3-D discriminator on full-length clips:
            // the classic single-video setup, no subsampling anywhere.
            let mut cfg = preset("desk-64px")?;
            cfg.model.rate = 1;
            cfg.training.emit = EmitLevels::Last;
            cfg.training.r1_weight = 10.0;
            cfg.output.dir = PathBuf::from("runs/single-3d");
            cfg
        }
        "3d+2d" => {
            let mut cfg = preset("single-3d")?;
            cfg.discriminator.frame_discriminator = true;
            cfg.output.dir = PathBuf::from("runs/3d2d");
            cfg
        }
        _ => return None,
    };
    debug_assert!(cfg.validate().is_ok(), "preset {} must validate", name);
    Some(cfg)
}

pub fn preset_names() -> &'static [&'static str] {
    &["paper-192px", "paper-256px", "desk-64px", "tiny-16", "tiny-16-naive", "single-3d", "3d+2d"]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for name in preset_names() {
            let cfg = preset(name).unwrap_or_else(|| panic!("missing preset {}", name));
            cfg.validate().unwrap_or_else(|e| panic!("preset {} invalid: {}", name, e));
        }
    }

    #[test]
    fn preset_geometry_derivations() {
        let cfg = preset("paper-192px").unwrap();
        assert_eq!(cfg.model.initial_hw(), (3, 3));
        assert_eq!(cfg.model.stage1_blocks(), 3);
        assert_eq!(cfg.model.level_height(1), 24);
        assert_eq!(cfg.model.level_height(4), 192);
        assert_eq!(cfg.model.render_channels(1), 128);
        assert_eq!(cfg.model.render_channels(4), 32);
        let d = &cfg.discriminator;
        assert_eq!(d.block_channels(0), 32);
        assert_eq!(d.block_channels(4), 512);
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let cfg = preset("desk-64px").unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::parse_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = preset("tiny-16").unwrap().to_toml();
        text.push_str("\n[model2]\nfoo = 1\n");
        assert!(RunConfig::parse_toml(&text).is_err());
        let sneaky = preset("tiny-16").unwrap().to_toml().replace(
            "latent_dim",
            "latent_dmi",
        );
        assert!(RunConfig::parse_toml(&sneaky).is_err());
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let mut cfg = preset("tiny-16").unwrap();
        cfg.model.height = 20; // not a power-of-two multiple of the plan
        assert!(cfg.validate().is_err());
        let mut cfg = preset("tiny-16").unwrap();
        cfg.model.channel_plan = vec![8]; // fewer blocks than levels - 1
        assert!(cfg.validate().is_err());
        let mut cfg = preset("tiny-16").unwrap();
        cfg.training.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn baseline_presets_flip_the_right_switches() {
        let single = preset("single-3d").unwrap();
        assert_eq!(single.training.emit, EmitLevels::Last);
        assert_eq!(single.training.r1_weight, 10.0);
        assert!(!single.discriminator.frame_discriminator);
        let dual = preset("3d+2d").unwrap();
        assert!(dual.discriminator.frame_discriminator);
    }
}
