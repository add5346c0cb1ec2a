//! Procedural 16×16 shape images. Sample `i` has label `i % classes`.

use super::Dataset;
use crate::tensor::Rng;
use crate::{Error, Result};

pub const SYNTH_SIZE: usize = 16;
const SHAPES: usize = 10;

/// Render `n` jittered shapes; up to 10 classes.
pub fn synth_dataset(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if !(2..=SHAPES).contains(&classes) {
        return Err(Error::InvalidArgument(format!("synth supports 2..={SHAPES} classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::InvalidArgument(format!(
            "need at least one sample per class: n={n} < classes={classes}"
        )));
    }
    let mut rng = Rng::new(seed, 0x5e7);
    let mut images = Vec::with_capacity(n * SYNTH_SIZE * SYNTH_SIZE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        images.extend(render(label, &mut rng));
        labels.push(label);
    }
    Ok(Dataset::new("synth", [1, SYNTH_SIZE, SYNTH_SIZE], images, labels)?.with_meta(format!("synth seed={seed}")))
}

fn render(shape: usize, rng: &mut Rng) -> Vec<u8> {
    let s = SYNTH_SIZE as f32;
    let cx = s / 2.0 - 0.5 + rng.uniform(-1.5, 1.5);
    let cy = s / 2.0 - 0.5 + rng.uniform(-1.5, 1.5);
    let r = rng.uniform(4.0, 6.0);
    let ink = rng.uniform(170.0, 255.0);
    let mut img = vec![0u8; SYNTH_SIZE * SYNTH_SIZE];
    for y in 0..SYNTH_SIZE {
        for x in 0..SYNTH_SIZE {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let (ax, ay) = (dx.abs(), dy.abs());
            let d = (dx * dx + dy * dy).sqrt();
            let on = match shape {
                0 => ax <= r && ay <= r && (ax >= r - 1.2 || ay >= r - 1.2),
                1 => ax <= r * 0.8 && ay <= r * 0.8,
                2 => (d - r).abs() <= 0.8,
                3 => d <= r * 0.8,
                4 => ay <= 1.0 && ax <= r,
                5 => ax <= 1.0 && ay <= r,
                6 => (dx - dy).abs() <= 1.2 && ax <= r,
                7 => (dx + dy).abs() <= 1.2 && ax <= r,
                8 => (ax <= 1.0 || ay <= 1.0) && ax <= r && ay <= r,
                _ => ((dx - dy).abs() <= 1.2 || (dx + dy).abs() <= 1.2) && ax <= r,
            };
            let noise = rng.uniform(0.0, 30.0);
            let v = if on { ink - noise } else { noise };
            img[y * SYNTH_SIZE + x] = v.clamp(0.0, 255.0) as u8;
        }
    }
    img
}
