//! Six deterministic synthetic-domain transforms plus a seventh reserved
//! for held-out evaluation. Every transform is a pure function of
//! `(image, seed)`, preserves shape, and clips its output to `[0,1]`.
//!
//! The recipes are documented stand-ins (the exact augmentation chains the
//! training data originally used are not reproducible here); what matters
//! downstream is that each domain imprints a distinct, learnable statistic.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const NUM_DOMAINS: usize = 6;
pub const DOMAIN_NAMES: [&str; NUM_DOMAINS] = ["fog", "rain", "snow", "wind", "night", "sun"];

pub const FOG: u8 = 0;
pub const RAIN: u8 = 1;
pub const SNOW: u8 = 2;
pub const WIND: u8 = 3;
pub const NIGHT: u8 = 4;
pub const SUN: u8 = 5;

pub fn domain_name(id: u8) -> Result<&'static str> {
    DOMAIN_NAMES
        .get(id as usize)
        .copied()
        .ok_or(Error::DomainId(id))
}

pub fn domain_id(name: &str) -> Result<u8> {
    DOMAIN_NAMES
        .iter()
        .position(|&n| n == name)
        .map(|i| i as u8)
        .ok_or_else(|| Error::Format(format!("unknown domain '{name}'")))
}

/// Applies domain `domain_id` to `image` deterministically under `seed`.
pub fn apply_domain(image: &Array3<f32>, domain_id: u8, seed: u64) -> Result<Array3<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match domain_id {
        FOG => fog(image, &mut rng),
        RAIN => rain(image, &mut rng),
        SNOW => snow(image, &mut rng),
        WIND => wind(image, &mut rng),
        NIGHT => night(image, &mut rng),
        SUN => sun(image, &mut rng),
        other => return Err(Error::DomainId(other)),
    };
    Ok(clip(out))
}

/// A seventh appearance shift (sepia cast with a corner vignette) that none
/// of the six training domains produce; used to render held-out queries.
pub fn holdout_shift(image: &Array3<f32>, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = image.dim();
    debug_assert_eq!(c, 3);
    let strength: f32 = rng.random_range(0.35..0.5);
    let mut out = image.clone();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let max_d2 = cy * cy + cx * cx;
    for y in 0..h {
        for x in 0..w {
            let luma = 0.299 * image[[0, y, x]] + 0.587 * image[[1, y, x]]
                + 0.114 * image[[2, y, x]];
            let sepia = [luma * 1.0 + 0.10, luma * 0.82, luma * 0.55];
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            let vignette = 1.0 - 0.2 * (d2 / max_d2);
            for ch in 0..3 {
                let mixed =
                    image[[ch, y, x]] * (1.0 - strength) + sepia[ch] * strength;
                out[[ch, y, x]] = mixed * vignette * 0.97;
            }
        }
    }
    clip(out)
}

fn clip(mut img: Array3<f32>) -> Array3<f32> {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Blend toward white through a low-frequency haze mask, then flatten
/// contrast.
fn fog(image: &Array3<f32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (_, h, w) = image.dim();
    // 4x4 noise grid upsampled bilinearly gives the low-frequency mask
    let mut grid = [[0.0f32; 4]; 4];
    for row in grid.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.random_range(0.35..0.75);
        }
    }
    let sample = |fy: f32, fx: f32| -> f32 {
        let gy = fy * 3.0;
        let gx = fx * 3.0;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(3));
        let (ty, tx) = (gy - y0 as f32, gx - x0 as f32);
        let a = grid[y0][x0] * (1.0 - tx) + grid[y0][x1] * tx;
        let b = grid[y1][x0] * (1.0 - tx) + grid[y1][x1] * tx;
        a * (1.0 - ty) + b * ty
    };
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let t = sample(y as f32 / (h - 1).max(1) as f32, x as f32 / (w - 1).max(1) as f32);
            for c in 0..3 {
                let hazed = image[[c, y, x]] * (1.0 - t) + t;
                out[[c, y, x]] = 0.5 + (hazed - 0.5) * 0.82;
            }
        }
    }
    out
}

/// Semi-transparent bright streaks along a shared diagonal.
fn rain(image: &Array3<f32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let mut out = image.clone();
    let slope: f32 = rng.random_range(0.3..0.7); // dx per dy, one shared direction
    let count = (h * w / 40).max(4);
    for _ in 0..count {
        let y0 = rng.random_range(0..h) as f32;
        let x0 = rng.random_range(0..w) as f32;
        let len = rng.random_range(5..12);
        let alpha = rng.random_range(0.25..0.45);
        for t in 0..len {
            let y = (y0 + t as f32).round() as isize;
            let x = (x0 + t as f32 * slope).round() as isize;
            if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            for c in 0..3 {
                out[[c, y, x]] = out[[c, y, x]] * (1.0 - alpha) + 0.85 * alpha;
            }
        }
    }
    out
}

/// Bright speckles over a slightly desaturated base.
fn snow(image: &Array3<f32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let gray = (image[[0, y, x]] + image[[1, y, x]] + image[[2, y, x]]) / 3.0;
            for c in 0..3 {
                out[[c, y, x]] = image[[c, y, x]] * 0.75 + gray * 0.25;
            }
        }
    }
    let count = (h * w / 24).max(6);
    for _ in 0..count {
        let y = rng.random_range(0..h);
        let x = rng.random_range(0..w);
        let alpha = rng.random_range(0.6..0.95);
        for c in 0..3 {
            out[[c, y, x]] = out[[c, y, x]] * (1.0 - alpha) + alpha;
        }
    }
    out
}

/// Directional motion blur with a small random shear.
fn wind(image: &Array3<f32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let len = rng.random_range(5..9usize);
    let shear: f32 = rng.random_range(-0.3..0.3); // dy per dx of the blur path
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0f32;
                for k in 0..len {
                    let sx = (x + k).min(w - 1);
                    let sy = ((y as f32 + k as f32 * shear).round() as isize)
                        .clamp(0, h as isize - 1) as usize;
                    acc += image[[c, sy, sx]];
                }
                out[[c, y, x]] = acc / len as f32;
            }
        }
    }
    out
}

/// Gamma-darkening with a cool channel balance. Gamma > 1 and per-channel
/// scales < 1 guarantee the mean intensity strictly drops for any image
/// with a nonzero pixel.
fn night(image: &Array3<f32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let gamma: f32 = rng.random_range(1.6..2.0);
    let scales = [0.45f32, 0.50, 0.70]; // blue kept strongest
    let (_, h, w) = image.dim();
    let mut out = image.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[[c, y, x]] = image[[c, y, x]].powf(gamma) * scales[c];
            }
        }
    }
    out
}

/// Brightness lift plus a warm radial flare.
fn sun(image: &Array3<f32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let cy: f32 = rng.random_range(0.1..0.5) * h as f32;
    let cx: f32 = rng.random_range(0.2..0.8) * w as f32;
    let radius = rng.random_range(0.4..0.8) * h.min(w) as f32;
    let amp = [0.40f32, 0.33, 0.22]; // warm: red strongest
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            let falloff = (-d2 / (2.0 * (radius / 2.0).powi(2))).exp();
            for c in 0..3 {
                out[[c, y, x]] = image[[c, y, x]] * 1.10 + 0.06 + amp[c] * falloff;
            }
        }
    }
    out
}
