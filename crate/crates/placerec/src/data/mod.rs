//! Dataset plumbing: manifest files, image loading, synthetic-domain
//! transforms, batch sampling, and a procedural toy dataset generator.

pub mod sampler;
pub mod toygen;
pub mod transforms;

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// Which role a manifest row plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Db,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Db => "db",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "db" => Ok(Split::Db),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

/// One image entry. Geo tags and frame ids are optional for train rows but
/// evaluation rows need whichever their protocol uses.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub image_path: String,
    pub place_id: u32,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub frame_id: Option<i64>,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn rows_in(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    /// Reads `image_path,place_id,lat,lon,frame_id,split` with empty strings
    /// for absent optional fields.
    pub fn read_csv(path: &Path) -> Result<Manifest> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
            let opt_f64 = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::Format(format!("bad number '{s}' in manifest")))
                }
            };
            let opt_i64 = |s: &str| -> Result<Option<i64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<i64>()
                        .map(Some)
                        .map_err(|_| Error::Format(format!("bad integer '{s}' in manifest")))
                }
            };
            rows.push(ManifestRow {
                image_path: field(0),
                place_id: field(1)
                    .parse()
                    .map_err(|_| Error::Format("bad place_id".into()))?,
                lat: opt_f64(&field(2))?,
                lon: opt_f64(&field(3))?,
                frame_id: opt_i64(&field(4))?,
                split: Split::parse(&field(5))?,
            });
        }
        Ok(Manifest { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["image_path", "place_id", "lat", "lon", "frame_id", "split"])?;
        for r in &self.rows {
            writer.write_record([
                r.image_path.as_str(),
                &r.place_id.to_string(),
                &r.lat.map(|v| v.to_string()).unwrap_or_default(),
                &r.lon.map(|v| v.to_string()).unwrap_or_default(),
                &r.frame_id.map(|v| v.to_string()).unwrap_or_default(),
                r.split.as_str(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Image I/O: 8-bit RGB files <-> [3,H,W] float arrays in [0,1]
// ---------------------------------------------------------------------------

pub fn load_image(path: &Path, resize: Option<usize>) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = match resize {
        Some(s) if img.width() as usize != s || img.height() as usize != s => {
            image::imageops::resize(
                &img,
                s as u32,
                s as u32,
                image::imageops::FilterType::Triangle,
            )
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_image(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::InputShape("expected [3,H,W] image".into()));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Saves a single-channel map as a grayscale PNG, min-max normalized.
pub fn save_heatmap(path: &Path, map: &ndarray::Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = ((map[[y, x]] - lo) / span * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Mean intensity over all channels and pixels.
pub fn mean_intensity(img: &Array3<f32>) -> f32 {
    img.sum() / img.len() as f32
}

/// Bilinear upsampling of a single-channel map to `(out_h, out_w)`.
pub fn upsample_map(map: &ndarray::Array2<f32>, out_h: usize, out_w: usize) -> ndarray::Array2<f32> {
    let (h, w) = map.dim();
    let mut out = ndarray::Array2::<f32>::zeros((out_h, out_w));
    for y in 0..out_h {
        for x in 0..out_w {
            let fy = if out_h > 1 {
                y as f32 * (h - 1) as f32 / (out_h - 1) as f32
            } else {
                0.0
            };
            let fx = if out_w > 1 {
                x as f32 * (w - 1) as f32 / (out_w - 1) as f32
            } else {
                0.0
            };
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (dy, dx) = (fy - y0 as f32, fx - x0 as f32);
            out[[y, x]] = map[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
                + map[[y0, x1]] * (1.0 - dy) * dx
                + map[[y1, x0]] * dy * (1.0 - dx)
                + map[[y1, x1]] * dy * dx;
        }
    }
    out
}

/// Splitmix-style seed derivation so nested RNG streams never collide.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        z ^= p.wrapping_add(0x9e3779b97f4a7c15).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}
