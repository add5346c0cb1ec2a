//! Training-time augmentation: per-sample random rotation and translation.
//! No flips, digits are not mirror-symmetric.

use super::corrupt::{warp_plane, Affine};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from `[-max_degrees, max_degrees]`.
    pub max_degrees: f64,
    /// Shift per axis drawn uniformly from `[-max_shift, max_shift]` pixels.
    pub max_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_degrees: 15.0,
            max_shift: 2.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            max_degrees: 0.0,
            max_shift: 0.0,
        }
    }
}

fn draw(rng: &mut Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        (rng.next_f64() * 2.0 - 1.0) * max
    }
}

/// Augment one `C × H × W` sample in place.
pub fn augment_image(sample: &mut [f32], shape: [usize; 3], cfg: &AugmentConfig, rng: &mut Rng) {
    let t = Affine {
        degrees: draw(rng, cfg.max_degrees),
        scale: 1.0,
        tx: draw(rng, cfg.max_shift),
        ty: draw(rng, cfg.max_shift),
    };
    if t.is_identity() {
        return;
    }
    let [_, h, w] = shape;
    let mut dst = vec![0f32; h * w];
    for plane in sample.chunks_mut(h * w) {
        warp_plane(plane, h, w, &t, &mut dst);
        plane.copy_from_slice(&dst);
    }
}

/// Augment every sample of an `N × C × H × W` batch; labels are untouched.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor {
    let mut out = batch.clone();
    let s = batch.shape();
    let shape = [s[1], s[2], s[3]];
    let per = batch.row_len();
    for sample in out.data_mut().chunks_mut(per) {
        augment_image(sample, shape, cfg, rng);
    }
    out
}
