//! Local feature extraction: a small trainable patch backbone for
//! self-contained experiments, plus an on-disk format for precomputed
//! features from an external extractor.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fileio;
use crate::nn::{EncoderLayer, Linear, ParamList};

/// Stride of the patch grid; images resized to multiples of this yield an
/// exact grid.
pub const PATCH: usize = 14;

const FEATURE_MAGIC: &[u8; 4] = b"QFEA";
const FEATURE_VERSION: u32 = 1;

/// Local features for one image plus the spatial grid they came from.
pub struct FeatureMap {
    /// `[N, d]` with `N = h * w`, rows in row-major grid order.
    pub x: Tensor,
    pub h: usize,
    pub w: usize,
}

/// Cuts an `[3,H,W]` image into non-overlapping `PATCH x PATCH` tiles
/// (trailing partial tiles dropped) and flattens each tile channel-major.
pub fn patchify(image: &Array3<f32>, patch: usize) -> Result<(Array2<f32>, usize, usize)> {
    let img = image;
    let (c, height, width) = img.dim();
    let (gh, gw) = (height / patch, width / patch);
    if gh == 0 || gw == 0 {
        return Err(Error::SpatialSize(format!(
            "image {height}x{width} smaller than patch {patch}"
        )));
    }
    let mut out = Array2::<f32>::zeros((gh * gw, c * patch * patch));
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out[[row, k]] = img[[ch, py * patch + dy, px * patch + dx]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok((out, gh, gw))
}

/// Patch embedding followed by two transformer encoder layers.
pub struct ToyBackbone {
    pub proj: Linear,
    pub layers: Vec<EncoderLayer>,
}

impl ToyBackbone {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, ffn_dim: usize) -> ToyBackbone {
        let in_dim = 3 * PATCH * PATCH;
        ToyBackbone {
            proj: Linear::new(rng, in_dim, dim, true),
            layers: (0..2)
                .map(|_| EncoderLayer::new(rng, dim, heads, ffn_dim))
                .collect(),
        }
    }

    /// `[3,H,W]` image in `[0,1]` -> feature map over the patch grid.
    pub fn forward(&self, image: &Array3<f32>) -> Result<FeatureMap> {
        let (patches, h, w) = patchify(image, PATCH)?;
        let mut x = self.proj.forward(&Tensor::constant(patches.into_dyn()));
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        Ok(FeatureMap { x, h, w })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.proj.collect_params(&format!("{prefix}.proj"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&format!("{prefix}.enc{i}"), out);
        }
    }
}

// ---------------------------------------------------------------------------
// Precomputed feature files
// ---------------------------------------------------------------------------

/// A batch of precomputed local features: `count` images, each `[n, d]`.
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    /// `count * n * d` values, image-major then row-major.
    pub data: Vec<f32>,
}

impl FeatureSet {
    pub fn count(&self) -> usize {
        if self.n * self.d == 0 {
            0
        } else {
            self.data.len() / (self.n * self.d)
        }
    }

    /// Features of image `i` as `[n, d]`.
    pub fn image(&self, i: usize) -> Array2<f32> {
        let stride = self.n * self.d;
        let slice = &self.data[i * stride..(i + 1) * stride];
        Array2::from_shape_vec((self.n, self.d), slice.to_vec()).unwrap()
    }

    /// Feature map for image `i`; the token count must form a square grid.
    pub fn feature_map(&self, i: usize) -> Result<FeatureMap> {
        let side = (self.n as f64).sqrt().round() as usize;
        if side * side != self.n {
            return Err(Error::SpatialSize(format!(
                "feature count {} is not a square grid",
                self.n
            )));
        }
        Ok(FeatureMap {
            x: Tensor::constant(self.image(i).into_dyn()),
            h: side,
            w: side,
        })
    }
}

/// Writes a feature set: magic, version, image count (u64), tokens per
/// image (u32), feature dim (u32), then raw f32 little-endian data.
pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    fileio::write_magic(&mut w, FEATURE_MAGIC)?;
    fileio::write_u32(&mut w, FEATURE_VERSION)?;
    fileio::write_u64(&mut w, set.count() as u64)?;
    fileio::write_u32(&mut w, set.n as u32)?;
    fileio::write_u32(&mut w, set.d as u32)?;
    fileio::write_f32_slice(&mut w, &set.data)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let mut r = BufReader::new(File::open(path)?);
    fileio::expect_magic(&mut r, FEATURE_MAGIC)?;
    let version = fileio::read_u32(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature file version {version}"
        )));
    }
    let count = fileio::read_u64(&mut r)? as usize;
    let n = fileio::read_u32(&mut r)? as usize;
    let d = fileio::read_u32(&mut r)? as usize;
    let data = fileio::read_f32_vec(&mut r, count * n * d)?;
    Ok(FeatureSet { n, d, data })
}
