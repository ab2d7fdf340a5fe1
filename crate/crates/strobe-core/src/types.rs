//! Domain newtypes for batched video data.
//!
//! All batched data is laid out (N, C, T, H, W). `VideoBatch` additionally
//! guarantees its samples are finite and normalized to [-1, 1]; feature maps
//! between model stages carry no range guarantee and stay plain tensors.

use strobe_grad::Tensor;

use crate::error::{Error, Result};

/// A batch of videos: rank 5, (N, C, T, H, W), finite values in [-1, 1].
#[derive(Clone, Debug)]
pub struct VideoBatch(Tensor);

impl VideoBatch {
    /// Validate shape and range. Values may overshoot [-1, 1] by float dust
    /// only.
    pub fn new(t: Tensor) -> Result<VideoBatch> {
        if t.rank() != 5 {
            return Err(Error::shape(format!(
                "video batch must be rank 5 (N,C,T,H,W), got {:?}",
                t.shape()
            )));
        }
        if t.shape().iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("video batch has an empty axis: {:?}", t.shape())));
        }
        const SLACK: f32 = 1e-4;
        for &v in t.data() {
            if !v.is_finite() || v < -1.0 - SLACK || v > 1.0 + SLACK {
                return Err(Error::data(format!(
                    "video batch value {} outside the normalized range [-1, 1]",
                    v
                )));
            }
        }
        Ok(VideoBatch(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[4]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_normalized_rank5() {
        let t = Tensor::full(&[2, 3, 4, 8, 8], 0.5);
        assert!(VideoBatch::new(t).is_ok());
    }

    #[test]
    fn rejects_wrong_rank_and_out_of_range() {
        assert!(VideoBatch::new(Tensor::zeros(&[2, 3, 4, 8])).is_err());
        assert!(VideoBatch::new(Tensor::full(&[1, 1, 1, 2, 2], 1.5)).is_err());
        assert!(VideoBatch::new(Tensor::full(&[1, 1, 1, 2, 2], f32::NAN)).is_err());
    }
}
