//! Procedural toy dataset: each place is a distinct texture-and-shape
//! composition rendered on an oversized canvas; per-image crops provide a
//! viewpoint proxy. Synthetic geo tags put same-place images within 25 m of
//! each other and different places hundreds of meters apart, so the
//! evaluation predicates behave like they do on real data.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, save_image, Manifest, ManifestRow, Split};
use crate::error::{Error, Result};

/// Grid pitch between place centers, degrees (~222 m per 0.002 deg).
const PLACE_PITCH_DEG: f64 = 0.002;
/// Per-image coordinate jitter, degrees (~4.5 m).
const IMAGE_JITTER_DEG: f64 = 0.00004;

/// Renders the oversized base canvas for one place.
fn render_canvas(seed: u64, place: usize, canvas: usize) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x9_1ace, place as u64]));
    let mut img = Array3::<f32>::zeros((3, canvas, canvas));

    // background
    let bg = [
        rng.random_range(0.15..0.85f32),
        rng.random_range(0.15..0.85f32),
        rng.random_range(0.15..0.85f32),
    ];
    for c in 0..3 {
        img.index_axis_mut(ndarray::Axis(0), c).fill(bg[c]);
    }

    // sinusoidal stripes along a random direction on a random channel mix
    let freq: f32 = rng.random_range(0.25..0.9);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = {
        let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        (a.sin(), a.cos())
    };
    let amp: f32 = rng.random_range(0.10..0.25);
    let mask = [rng.random_bool(0.7), rng.random_bool(0.7), rng.random_bool(0.7)];
    for y in 0..canvas {
        for x in 0..canvas {
            let s = ((y as f32 * dy + x as f32 * dx) * freq + phase).sin() * amp;
            for c in 0..3 {
                if mask[c] {
                    img[[c, y, x]] += s;
                }
            }
        }
    }

    // filled circles
    for _ in 0..rng.random_range(2..5usize) {
        let cy = rng.random_range(0..canvas) as f32;
        let cx = rng.random_range(0..canvas) as f32;
        let r: f32 = rng.random_range(canvas as f32 / 10.0..canvas as f32 / 4.0);
        let color = [
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.0..1.0f32),
        ];
        for y in 0..canvas {
            for x in 0..canvas {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                if d2 <= r * r {
                    for c in 0..3 {
                        img[[c, y, x]] = img[[c, y, x]] * 0.3 + color[c] * 0.7;
                    }
                }
            }
        }
    }

    // axis-aligned rectangles
    for _ in 0..rng.random_range(1..4usize) {
        let y0 = rng.random_range(0..canvas - 1);
        let x0 = rng.random_range(0..canvas - 1);
        let y1 = rng.random_range(y0 + 1..canvas);
        let x1 = rng.random_range(x0 + 1..canvas);
        let color = [
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.0..1.0f32),
        ];
        for y in y0..=y1 {
            for x in x0..=x1 {
                for c in 0..3 {
                    img[[c, y, x]] = img[[c, y, x]] * 0.4 + color[c] * 0.6;
                }
            }
        }
    }

    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// One rendered view of a place: a shifted crop with brightness jitter.
pub fn toy_image(seed: u64, place: usize, index: usize, size: usize) -> Array3<f32> {
    let margin = (size / 6).max(1);
    let canvas = size + 2 * margin;
    let base = render_canvas(seed, place, canvas);
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x10, place as u64, index as u64]));
    let oy = rng.random_range(0..=2 * margin);
    let ox = rng.random_range(0..=2 * margin);
    let bright: f32 = rng.random_range(-0.05..0.05);
    let mut out = Array3::<f32>::zeros((3, size, size));
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                out[[c, y, x]] = (base[[c, y + oy, x + ox]] + bright).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Geo tag of image `index` of `place`: places sit on a coarse grid,
/// images jitter a few meters around their place center.
pub fn toy_geo(seed: u64, n_places: usize, place: usize, index: usize) -> (f64, f64) {
    let cols = (n_places as f64).sqrt().ceil() as usize;
    let lat0 = (place / cols) as f64 * PLACE_PITCH_DEG;
    let lon0 = (place % cols) as f64 * PLACE_PITCH_DEG;
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x6e0, place as u64, index as u64]));
    (
        lat0 + rng.random_range(-IMAGE_JITTER_DEG..IMAGE_JITTER_DEG),
        lon0 + rng.random_range(-IMAGE_JITTER_DEG..IMAGE_JITTER_DEG),
    )
}

/// Generates `n_places * imgs_per_place` images under `out_dir/images/`,
/// writes `out_dir/manifest.csv`, and returns the manifest. Per place the
/// first image is the database view, the second the query view, and the
/// rest are training views (a place with fewer images simply has fewer
/// roles). Frame ids stride by 1000 between places so the frame-tolerance
/// protocol never crosses places.
pub fn generate_toy_places(
    n_places: usize,
    imgs_per_place: usize,
    image_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_places < 2 {
        return Err(Error::Config("need at least 2 places".into()));
    }
    if imgs_per_place == 0 {
        return Err(Error::Config("need at least 1 image per place".into()));
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut rows = Vec::with_capacity(n_places * imgs_per_place);
    for p in 0..n_places {
        for k in 0..imgs_per_place {
            let img = toy_image(seed, p, k, image_size);
            let name = format!("images/place{p:03}_img{k:02}.png");
            save_image(&out_dir.join(&name), &img)?;
            let (lat, lon) = toy_geo(seed, n_places, p, k);
            let split = match k {
                0 => Split::Db,
                1 => Split::Query,
                _ => Split::Train,
            };
            rows.push(ManifestRow {
                image_path: name,
                place_id: p as u32,
                lat: Some(lat),
                lon: Some(lon),
                frame_id: Some((p * 1000 + k) as i64),
                split,
            });
        }
    }
    let manifest = Manifest { rows };
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    /// Independent haversine (R = 6371 km) for checking the generated tags.
    fn haversine_oracle(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
        let r = 6_371_000.0f64;
        let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
        let dp = (lat2 - lat1).to_radians();
        let dl = (lon2 - lon1).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * r * a.sqrt().asin()
    }

    #[test]
    fn counting_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy_places(8, 6, 16, 0, dir.path()).unwrap();
        assert_eq!(m.rows.len(), 48);
        let ids: std::collections::BTreeSet<u32> =
            m.rows.iter().map(|r| r.place_id).collect();
        assert_eq!(ids.len(), 8);
        assert_eq!(m.rows_in(Split::Db).len(), 8);
        assert_eq!(m.rows_in(Split::Query).len(), 8);
        assert_eq!(m.rows_in(Split::Train).len(), 32);
    }

    #[test]
    fn deterministic_by_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_toy_places(3, 3, 12, 7, d1.path()).unwrap();
        let m2 = generate_toy_places(3, 3, 12, 7, d2.path()).unwrap();
        for (a, b) in m1.rows.iter().zip(m2.rows.iter()) {
            assert_eq!(a.image_path, b.image_path);
            assert_eq!(a.lat, b.lat);
            assert_eq!(a.lon, b.lon);
        }
        let img1 = std::fs::read(d1.path().join(&m1.rows[4].image_path)).unwrap();
        let img2 = std::fs::read(d2.path().join(&m2.rows[4].image_path)).unwrap();
        assert_eq!(img1, img2);
        // a different seed must change pixels
        let d3 = tempfile::tempdir().unwrap();
        let m3 = generate_toy_places(3, 3, 12, 8, d3.path()).unwrap();
        let img3 = std::fs::read(d3.path().join(&m3.rows[4].image_path)).unwrap();
        assert_ne!(img1, img3);
    }

    #[test]
    fn geo_tags_respect_place_structure() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy_places(6, 4, 12, 3, dir.path()).unwrap();
        for a in &m.rows {
            for b in &m.rows {
                if std::ptr::eq(a, b) {
                    continue;
                }
                let d = haversine_oracle(
                    a.lat.unwrap(),
                    a.lon.unwrap(),
                    b.lat.unwrap(),
                    b.lon.unwrap(),
                );
                if a.place_id == b.place_id {
                    assert!(d < 25.0, "same place {d} m apart");
                } else {
                    assert!(d > 100.0, "different places only {d} m apart");
                }
            }
        }
    }

    #[test]
    fn frame_ids_separate_places() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy_places(3, 8, 12, 1, dir.path()).unwrap();
        for a in &m.rows {
            for b in &m.rows {
                let delta = (a.frame_id.unwrap() - b.frame_id.unwrap()).abs();
                if a.place_id == b.place_id {
                    assert!(delta <= 10);
                } else {
                    assert!(delta > 10);
                }
            }
        }
    }

    #[test]
    fn places_are_visually_distinct() {
        // coarse check: mean color difference between places exceeds the
        // within-place variation
        let a0 = toy_image(5, 0, 0, 16);
        let a1 = toy_image(5, 0, 1, 16);
        let b0 = toy_image(5, 1, 0, 16);
        let diff = |x: &Array3<f32>, y: &Array3<f32>| {
            x.iter()
                .zip(y.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f32>()
                / x.len() as f32
        };
        let within = diff(&a0, &a1);
        let across = diff(&a0, &b0);
        assert!(
            across > within,
            "across {across} should exceed within {within}"
        );
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_toy_places(1, 4, 12, 0, dir.path()).is_err());
        assert!(generate_toy_places(4, 0, 12, 0, dir.path()).is_err());
    }
}
