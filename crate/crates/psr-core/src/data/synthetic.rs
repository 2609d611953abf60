//! Procedural shape classification data: each class renders a distinct
//! glyph with position jitter and additive uniform pixel noise.

use rand::Rng;

use crate::data::{DataSet, Provenance};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const BACKGROUND: f32 = 0.1;
const FOREGROUND: f32 = 0.9;

/// Renders `n_per_class` jittered exemplars per class on a single-channel
/// `size x size` canvas, then adds `U(-noise_level, noise_level)` pixel
/// noise and clamps to `[0,1]`. Identical seeds give identical bytes.
pub fn generate_synthetic(
    n_classes: usize,
    n_per_class: usize,
    size: usize,
    noise_level: f32,
    seed: u64,
) -> Result<DataSet> {
    if !(2..=10).contains(&n_classes) {
        return Err(Error::InvalidConfig(format!(
            "synthetic data supports 2..=10 classes, got {n_classes}"
        )));
    }
    if size < 8 {
        return Err(Error::InvalidConfig(format!("image size must be at least 8, got {size}")));
    }
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        for item in 0..n_per_class {
            let mut rng = rng::stream(seed, &[0x5E_ED, class as u64, item as u64]);
            let dx = rng.random_range(0..=1);
            let dy = rng.random_range(0..=1);
            let mut img = render_glyph(class, size, dx, dy);
            if noise_level > 0.0 {
                for v in &mut img {
                    *v = (*v + rng.random_range(-noise_level..=noise_level)).clamp(0.0, 1.0);
                }
            }
            data.extend_from_slice(&img);
            labels.push(class);
        }
    }
    DataSet::new(
        Tensor::new(vec![n, 1, size, size], data)?,
        labels,
        n_classes,
        Provenance::Synthetic { seed },
    )
}

// Solid silhouettes stay close to themselves under one-pixel jitter;
// stripe/checker phases anchor to the absolute pixel grid so only their
// bounding box moves. Both properties keep same-class 1-NN distances below
// cross-class ones.
fn render_glyph(class: usize, size: usize, dx: i32, dy: i32) -> Vec<f32> {
    let s = size as i32;
    let cx = s / 2 + dx;
    let cy = s / 2 + dy;
    let r = s / 3;
    let mut img = vec![BACKGROUND; size * size];
    for y in 0..s {
        for x in 0..s {
            let ux = x - cx;
            let uy = y - cy;
            let inside_box = ux.abs() <= r && uy.abs() <= r;
            let d2 = ux * ux + uy * uy;
            let on = match class {
                // filled disk
                0 => d2 <= r * r,
                // diagonal stripes, phase fixed to the pixel grid
                1 => inside_box && (x + y).rem_euclid(3) == 0,
                // full-width horizontal bar
                2 => uy.abs() <= 1,
                // horizontal stripes, phase fixed to the pixel grid
                3 => inside_box && y.rem_euclid(3) == 0,
                // anti-diagonal stripes
                4 => inside_box && (x - y).rem_euclid(3) == 0,
                // sparse dot grid
                5 => inside_box && x.rem_euclid(3) == 1 && y.rem_euclid(3) == 1,
                // solid blocks in two opposite box quadrants
                6 => inside_box && ux * uy > 0,
                // vertical stripes, phase fixed to the pixel grid
                7 => inside_box && x.rem_euclid(3) == 0,
                // full-height vertical bar
                8 => ux.abs() <= 1,
                // checkerboard of 2x2 cells
                9 => inside_box && (x.div_euclid(2) + y.div_euclid(2)).rem_euclid(2) == 0,
                _ => unreachable!("class count validated"),
            };
            if on {
                img[(y * s + x) as usize] = FOREGROUND;
            }
        }
    }
    img
}
