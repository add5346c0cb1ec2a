//! Deterministic image corruptions and corrupted-dataset construction.

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::tensor::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Brightness,
    Contrast,
    Rotate,
    Translate,
    Scale,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Rotate,
        CorruptionKind::Translate,
        CorruptionKind::Scale,
    ];

    /// Corruption parameter for severities 1 through 5.
    pub fn severity_table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [8.0, 16.0, 24.0, 32.0, 40.0],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
            CorruptionKind::Brightness => [10.0, 20.0, 30.0, 40.0, 50.0],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            CorruptionKind::Rotate => [5.0, 10.0, 15.0, 25.0, 40.0],
            CorruptionKind::Translate => [1.0, 2.0, 3.0, 4.0, 6.0],
            CorruptionKind::Scale => [1.1, 1.2, 1.3, 1.5, 1.7],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Rotate => "rotate",
            CorruptionKind::Translate => "translate",
            CorruptionKind::Scale => "scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1 through 5.
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity, seed })
    }

    pub fn param(&self) -> f64 {
        self.kind.severity_table()[self.severity as usize - 1]
    }
}

/// Corrupt one `C × H × W` image using the severity table.
pub fn corrupt(image: &[u8], shape: [usize; 3], spec: &CorruptionSpec) -> Result<Vec<u8>> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::InvalidArgument(format!("severity {} outside 1..=5", spec.severity)));
    }
    Ok(corrupt_with_param(image, shape, spec.kind, spec.param(), spec.seed))
}

/// Corrupt one image with an explicit parameter instead of a table entry.
/// Noise draws and transform directions come from `seed` alone.
pub fn corrupt_with_param(image: &[u8], shape: [usize; 3], kind: CorruptionKind, param: f64, seed: u64) -> Vec<u8> {
    let mut rng = Rng::new(seed, 0xc0de);
    let clamp = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    match kind {
        CorruptionKind::GaussianNoise => image.iter().map(|&p| clamp(p as f64 + param * rng.normal())).collect(),
        CorruptionKind::ShotNoise => image
            .iter()
            .map(|&p| clamp(rng.poisson(p as f64 / 255.0 * param) / param * 255.0))
            .collect(),
        CorruptionKind::ImpulseNoise => image
            .iter()
            .map(|&p| {
                if rng.bernoulli(param) {
                    if rng.bernoulli(0.5) {
                        255
                    } else {
                        0
                    }
                } else {
                    p
                }
            })
            .collect(),
        CorruptionKind::Brightness => image.iter().map(|&p| clamp(p as f64 + param)).collect(),
        CorruptionKind::Contrast => {
            let plane = shape[1] * shape[2];
            let mut out = Vec::with_capacity(image.len());
            for ch in image.chunks(plane) {
                let mean = ch.iter().map(|&p| p as f64).sum::<f64>() / plane as f64;
                out.extend(ch.iter().map(|&p| clamp((p as f64 - mean) * param + mean)));
            }
            out
        }
        CorruptionKind::Rotate => {
            let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            warp_u8(image, shape, &Affine::rotation(sign * param))
        }
        CorruptionKind::Translate => {
            let theta = rng.next_f64() * std::f64::consts::TAU;
            warp_u8(image, shape, &Affine::translation(param * theta.cos(), param * theta.sin()))
        }
        CorruptionKind::Scale => warp_u8(image, shape, &Affine::scale(param)),
    }
}

/// Forward affine map about the image centre: rotation (degrees), uniform
/// scale, then translation (pixels).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Affine {
    pub degrees: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub fn rotation(degrees: f64) -> Self {
        Self {
            degrees,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            degrees: 0.0,
            scale: 1.0,
            tx,
            ty,
        }
    }

    pub fn scale(scale: f64) -> Self {
        Self {
            degrees: 0.0,
            scale,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.degrees == 0.0 && self.scale == 1.0 && self.tx == 0.0 && self.ty == 0.0
    }
}

/// Bilinear resampling of one `h × w` plane, zero outside the source.
pub(crate) fn warp_plane(src: &[f32], h: usize, w: usize, t: &Affine, dst: &mut [f32]) {
    if t.is_identity() {
        dst.copy_from_slice(src);
        return;
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = t.degrees.to_radians().sin_cos();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize] as f64
        }
    };
    for oy in 0..h {
        for ox in 0..w {
            // inverse map: undo translation, rotation, scale
            let (u, v) = (ox as f64 - cx - t.tx, oy as f64 - cy - t.ty);
            let sx = (cos * u + sin * v) / t.scale + cx;
            let sy = (-sin * u + cos * v) / t.scale + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
            dst[oy * w + ox] = v as f32;
        }
    }
}

fn warp_u8(image: &[u8], [_, h, w]: [usize; 3], t: &Affine) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.len());
    let mut dst = vec![0f32; h * w];
    for plane in image.chunks(h * w) {
        let src: Vec<f32> = plane.iter().map(|&p| p as f32).collect();
        warp_plane(&src, h, w, t, &mut dst);
        out.extend(dst.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }
    out
}

fn sample_seed(seed: u64, kind: CorruptionKind, index: usize) -> u64 {
    seed ^ ((kind as u64 + 1) << 56) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Every sample corrupted at one severity; labels preserved.
pub fn build_fixed_severity_dataset(id_set: &Dataset, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Dataset> {
    CorruptionSpec::new(kind, severity, seed)?;
    let shape = id_set.shape();
    let param = kind.severity_table()[severity as usize - 1];
    let mut out = id_set.map_images(|i, img| corrupt_with_param(img, shape, kind, param, sample_seed(seed, kind, i)));
    out.name = format!("{}-{}-s{severity}", id_set.name, kind.name());
    out.meta = format!("{} corrupted {} severity {severity} seed {seed}", id_set.meta, kind.name());
    Ok(out)
}

/// `p` distinct source samples per severity 1..=5, concatenated in
/// severity order. Returns the dataset and the severity of each sample.
pub fn build_cid_dataset(id_set: &Dataset, kind: CorruptionKind, p: usize, seed: u64) -> Result<(Dataset, Vec<u8>)> {
    if 5 * p > id_set.len() {
        return Err(Error::Data(format!("need {} source samples for p={p}, pool has {}", 5 * p, id_set.len())));
    }
    let perm = Rng::new(seed, 0xc1d0 + kind as u64).permutation(id_set.len());
    let chosen = &perm[..5 * p];
    let shape = id_set.shape();
    let table = kind.severity_table();
    let mut sel = id_set.subset(chosen);
    let severities: Vec<u8> = (0..5 * p).map(|i| (i / p.max(1)) as u8 + 1).collect();
    sel = sel.map_images(|i, img| corrupt_with_param(img, shape, kind, table[severities[i] as usize - 1], sample_seed(seed, kind, chosen[i])));
    sel.name = format!("{}-{}-mixed", id_set.name, kind.name());
    sel.meta = format!("{} corrupted {} severities 1-5 p={p} seed {seed}", id_set.meta, kind.name());
    Ok((sel, severities))
}
