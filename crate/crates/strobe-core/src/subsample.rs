//! Training-time frame subsampling.
//!
//! During training, a subsampling layer sits between consecutive generator
//! stages: it keeps every `rate`-th frame starting from a random offset, so
//! deeper (higher-resolution) stages see geometrically fewer frames. The real
//! data pipeline mirrors this with an image pyramid whose level-l entry is
//! spatially downsampled and independently frame-subsampled to the same frame
//! count the generator produces at that level.
//!
//! At inference time no subsampling happens anywhere.

use rand::Rng;
use strobe_grad::{tensor, Tensor, Var};

use crate::error::{Error, Result};
use crate::types::VideoBatch;

/// One frame-subsampling decision: keep indices `offset + k * rate` for
/// `k = 0 .. output_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsampleSpec {
    pub input_len: usize,
    pub rate: usize,
    pub offset: usize,
    pub output_len: usize,
}

impl SubsampleSpec {
    /// Build a spec, validating that every selected index lands in range.
    pub fn new(input_len: usize, rate: usize, offset: usize) -> Result<SubsampleSpec> {
        if input_len == 0 {
            return Err(Error::config("subsample input length must be positive"));
        }
        if rate == 0 {
            return Err(Error::config("subsample rate must be positive"));
        }
        let output_len = input_len.div_ceil(rate);
        let max = max_offset(input_len, rate);
        if offset > max {
            return Err(Error::config(format!(
                "offset {} too large: keeping {} of {} frames at rate {} allows offsets 0..={}",
                offset, output_len, input_len, rate, max
            )));
        }
        Ok(SubsampleSpec { input_len, rate, offset, output_len })
    }

    /// The frame indices this spec keeps, in increasing order.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.output_len).map(|k| self.offset + k * self.rate).collect()
    }

    /// The identity spec (rate 1 keeps everything).
    pub fn identity(input_len: usize) -> SubsampleSpec {
        SubsampleSpec { input_len, rate: 1, offset: 0, output_len: input_len }
    }
}

/// Largest offset that still fits `ceil(input_len / rate)` strided frames.
pub fn max_offset(input_len: usize, rate: usize) -> usize {
    let n = input_len.div_ceil(rate);
    input_len - rate * (n - 1) - 1
}

/// Draw a spec with a uniformly random legal offset.
pub fn make_spec(input_len: usize, rate: usize, rng: &mut impl Rng) -> Result<SubsampleSpec> {
    if input_len == 0 || rate == 0 {
        return Err(Error::config("subsample lengths and rates must be positive"));
    }
    let max = max_offset(input_len, rate);
    let offset = rng.gen_range(0..=max);
    SubsampleSpec::new(input_len, rate, offset)
}

/// Frame counts per level when `levels - 1` subsampling layers at `rate`
/// separate the stages: [T, ceil(T/r), ceil(ceil(T/r)/r), ...].
pub fn frame_schedule(frames: usize, rate: usize, levels: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(levels);
    let mut t = frames;
    for _ in 0..levels {
        out.push(t);
        t = t.div_ceil(rate);
    }
    out
}

/// Specs for the generator-side junctions: junction l subsamples the level-l
/// frame count at `rate`. Returns `levels - 1` specs.
pub fn make_train_specs(
    frames: usize,
    rate: usize,
    levels: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SubsampleSpec>> {
    let schedule = frame_schedule(frames, rate, levels);
    (0..levels - 1).map(|l| make_spec(schedule[l], rate, rng)).collect()
}

/// Specs for the real-data pyramid: level l (2-based here) subsamples the
/// *original* T frames at the cumulative rate `rate^(l-1)`, with its own
/// independent offset. Returns `levels - 1` specs for levels 2..=levels.
///
/// Because ceil(ceil(T/r)/r) = ceil(T/r^2), the output lengths match the
/// generator-side schedule frame for frame.
pub fn make_real_specs(
    frames: usize,
    rate: usize,
    levels: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SubsampleSpec>> {
    (1..levels)
        .map(|l| {
            let cumulative = rate.checked_pow(l as u32).ok_or_else(|| {
                Error::config(format!("cumulative rate {}^{} overflows", rate, l))
            })?;
            make_spec(frames, cumulative, rng)
        })
        .collect()
}

/// Keep the spec's frames of a feature map or video (axis 2 of N,C,T,H,W).
/// Differentiable: gradients scatter back to the kept frames.
pub fn subsample_frames(h: &Var, spec: &SubsampleSpec) -> Result<Var> {
    if h.shape().len() != 5 {
        return Err(Error::shape(format!("expected rank-5 input, got {:?}", h.shape())));
    }
    if h.shape()[2] != spec.input_len {
        return Err(Error::shape(format!(
            "spec expects {} input frames, input has {}",
            spec.input_len,
            h.shape()[2]
        )));
    }
    Ok(h.index_select(2, &spec.indices()))
}

/// Non-graph variant of [`subsample_frames`].
pub fn subsample_tensor(t: &Tensor, spec: &SubsampleSpec) -> Result<Tensor> {
    if t.rank() != 5 || t.shape()[2] != spec.input_len {
        return Err(Error::shape(format!(
            "spec expects rank-5 input with {} frames, got {:?}",
            spec.input_len,
            t.shape()
        )));
    }
    Ok(tensor::index_select(t, 2, &spec.indices()))
}

/// Halve H and W `times` times by 2x2 area averaging (frames untouched).
pub fn spatial_halve(t: &Tensor, times: usize) -> Tensor {
    let mut out = t.clone();
    for _ in 0..times {
        out = tensor::avg_pool3d(&out, [1, 2, 2]);
    }
    out
}

/// Real-data image pyramid for `levels` discriminators.
///
/// Level l in 1..=levels is spatially area-downsampled by 2^(levels - l); the
/// temporal spec for level l >= 2 comes from `specs[l - 2]` (level 1 keeps
/// all frames). Entries are returned lowest level first.
pub fn real_pyramid(
    x: &VideoBatch,
    levels: usize,
    specs: &[SubsampleSpec],
) -> Result<Vec<Tensor>> {
    if levels == 0 {
        return Err(Error::config("pyramid needs at least one level"));
    }
    if specs.len() + 1 != levels {
        return Err(Error::config(format!(
            "{} levels need {} temporal specs, got {}",
            levels,
            levels - 1,
            specs.len()
        )));
    }
    let (h, w) = (x.height(), x.width());
    let factor = 1usize << (levels - 1);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "{}x{} input not divisible by the pyramid factor {}",
            h, w, factor
        )));
    }
    let mut out = Vec::with_capacity(levels);
    for l in 1..=levels {
        let spatial = spatial_halve(x.tensor(), levels - l);
        let leveled = if l == 1 {
            spatial
        } else {
            subsample_tensor(&spatial, &specs[l - 2])?
        };
        out.push(leveled);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sixteen_frames_rate_four_allows_offsets_zero_to_three() {
        assert_eq!(max_offset(16, 4), 3);
        for b in 0..=3 {
            assert!(SubsampleSpec::new(16, 4, b).is_ok());
        }
        assert!(SubsampleSpec::new(16, 4, 4).is_err());
    }

    #[test]
    fn five_frames_rate_two_only_offset_zero() {
        // ceil(5/2) = 3 kept frames at stride 2 already span indices 0..=4.
        assert_eq!(max_offset(5, 2), 0);
        assert!(SubsampleSpec::new(5, 2, 0).is_ok());
        assert!(SubsampleSpec::new(5, 2, 1).is_err());
    }

    #[test]
    fn indices_follow_offset_plus_stride() {
        let spec = SubsampleSpec::new(16, 2, 1).unwrap();
        assert_eq!(spec.indices(), vec![1, 3, 5, 7, 9, 11, 13, 15]);
        let spec = SubsampleSpec::new(16, 4, 2).unwrap();
        assert_eq!(spec.indices(), vec![2, 6, 10, 14]);
    }

    #[test]
    fn frame_schedules_for_both_published_rates() {
        assert_eq!(frame_schedule(16, 2, 4), vec![16, 8, 4, 2]);
        assert_eq!(frame_schedule(16, 4, 4), vec![16, 4, 1, 1]);
        assert_eq!(frame_schedule(16, 1, 4), vec![16, 16, 16, 16]);
    }

    #[test]
    fn subsample_gathers_expected_frames() {
        // Frame t is filled with the constant t, so kept values identify
        // kept frames.
        let t = Tensor::from_fn(&[1, 1, 8, 1, 1], |i| i as f32);
        let spec = SubsampleSpec::new(8, 2, 1).unwrap();
        let out = subsample_tensor(&t, &spec).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 1, 1]);
        assert_eq!(out.data(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn subsample_rejects_mismatched_frame_count() {
        let t = Tensor::zeros(&[1, 1, 8, 1, 1]);
        let spec = SubsampleSpec::new(16, 2, 0).unwrap();
        assert!(subsample_tensor(&t, &spec).is_err());
    }

    #[test]
    fn real_specs_match_generator_schedule_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rate in 1..=4usize {
            let gen_schedule = frame_schedule(16, rate, 4);
            let real = make_real_specs(16, rate, 4, &mut rng).unwrap();
            for (l, spec) in real.iter().enumerate() {
                assert_eq!(
                    spec.output_len,
                    gen_schedule[l + 1],
                    "level {} at rate {}",
                    l + 2,
                    rate
                );
            }
        }
    }

    #[test]
    fn pyramid_shapes_halve_spatially_and_follow_schedule() {
        let x = VideoBatch::new(Tensor::zeros(&[2, 3, 16, 32, 32])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let specs = make_real_specs(16, 2, 4, &mut rng).unwrap();
        let pyr = real_pyramid(&x, 4, &specs).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes[0], vec![2, 3, 16, 4, 4]);
        assert_eq!(shapes[1], vec![2, 3, 8, 8, 8]);
        assert_eq!(shapes[2], vec![2, 3, 4, 16, 16]);
        assert_eq!(shapes[3], vec![2, 3, 2, 32, 32]);
    }

    #[test]
    fn pyramid_spatial_averaging_preserves_mean() {
        let x = VideoBatch::new(Tensor::from_fn(&[1, 1, 2, 8, 8], |i| {
            ((i % 17) as f32) / 17.0
        }))
        .unwrap();
        let pyr = real_pyramid(&x, 2, &[SubsampleSpec::identity(2)]).unwrap();
        // Area averaging keeps the per-frame mean exactly (up to float dust).
        let lo = &pyr[0];
        let full = &pyr[1];
        let mean_lo = lo.sum() / lo.len() as f64;
        let mean_full = full.sum() / full.len() as f64;
        assert!((mean_lo - mean_full).abs() < 1e-6);
    }
}
