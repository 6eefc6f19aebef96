//! Retrieval evaluation: an exact brute-force descriptor index, Recall@N
//! under geo / frame / pairwise positive definitions, and the descriptor
//! file format.

pub mod pca;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::data::{ManifestRow, Split};
use crate::error::{Error, Result};
use crate::fileio;

/// Spherical Earth radius used by the geo predicate, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance between two lat/lon points in degrees, meters.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}

/// Metadata attached to one indexed descriptor.
#[derive(Debug, Clone, Default)]
pub struct Tag {
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub frame_id: Option<i64>,
}

impl Tag {
    pub fn from_row(row: &ManifestRow) -> Tag {
        Tag {
            lat: row.lat,
            lon: row.lon,
            frame_id: row.frame_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolMode {
    Geo,
    Frame,
    /// Query `i` counts only database row `i` as its positive.
    Pairwise,
}

impl ProtocolMode {
    pub fn parse(s: &str) -> Result<ProtocolMode> {
        match s {
            "geo" => Ok(ProtocolMode::Geo),
            "frame" => Ok(ProtocolMode::Frame),
            "pairwise" => Ok(ProtocolMode::Pairwise),
            other => Err(Error::Protocol(format!("unknown protocol '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub mode: ProtocolMode,
    pub geo_threshold_m: f64,
    pub frame_tolerance: i64,
    pub recall_ranks: Vec<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            mode: ProtocolMode::Geo,
            geo_threshold_m: 25.0,
            frame_tolerance: 10,
            recall_ranks: vec![1, 5, 10],
        }
    }
}

/// Brute-force descriptor database with parallel metadata.
pub struct DescriptorIndex {
    data: Array2<f32>,
    tags: Vec<Tag>,
}

impl DescriptorIndex {
    /// Rows must be unit norm to 1e-4 (retrieval assumes cosine ranking).
    pub fn new(data: Array2<f32>, tags: Vec<Tag>) -> Result<DescriptorIndex> {
        if data.nrows() != tags.len() {
            return Err(Error::InputShape(format!(
                "{} descriptors but {} tags",
                data.nrows(),
                tags.len()
            )));
        }
        for (i, row) in data.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::InputShape(format!(
                    "descriptor {i} has norm {norm}, expected unit"
                )));
            }
        }
        Ok(DescriptorIndex { data, tags })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    /// Top-`k` database rows by descending dot product; equal scores rank by
    /// ascending index.
    pub fn knn(&self, query: ArrayView1<f32>, k: usize) -> Result<Vec<usize>> {
        if query.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        if k > self.len() {
            return Err(Error::InputShape(format!(
                "k={k} exceeds database size {}",
                self.len()
            )));
        }
        let scores = self.data.dot(&query);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("descriptor scores must not be NaN")
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        Ok(idx)
    }
}

/// Geo positives: haversine distance at or under the threshold.
pub fn positives_geo(query: &Tag, db: &[Tag], threshold_m: f64) -> Result<Vec<bool>> {
    let (qlat, qlon) = match (query.lat, query.lon) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Protocol("query lacks geo tags".into())),
    };
    db.iter()
        .map(|t| match (t.lat, t.lon) {
            (Some(lat), Some(lon)) => {
                Ok(haversine_m(qlat, qlon, lat, lon) <= threshold_m)
            }
            _ => Err(Error::Protocol("database row lacks geo tags".into())),
        })
        .collect()
}

/// Frame positives: `|db_frame - query_frame| <= tolerance`.
pub fn positives_frame(query: &Tag, db: &[Tag], tolerance: i64) -> Result<Vec<bool>> {
    let qf = query
        .frame_id
        .ok_or_else(|| Error::Protocol("query lacks a frame id".into()))?;
    db.iter()
        .map(|t| {
            let f = t
                .frame_id
                .ok_or_else(|| Error::Protocol("database row lacks a frame id".into()))?;
            Ok((f - qf).abs() <= tolerance)
        })
        .collect()
}

/// Recall@N results plus diagnostics.
#[derive(Debug, Clone)]
pub struct RecallReport {
    pub ranks: Vec<usize>,
    /// Percentage per rank, parallel to `ranks`.
    pub values: Vec<f64>,
    pub num_queries: usize,
    /// Queries with no positive anywhere in the database (counted as misses).
    pub zero_positive_queries: usize,
}

impl RecallReport {
    pub fn value_at(&self, rank: usize) -> Option<f64> {
        self.ranks
            .iter()
            .position(|&r| r == rank)
            .map(|i| self.values[i])
    }

    pub fn text_table(&self) -> String {
        let mut s = String::new();
        s.push_str("rank    recall%\n");
        for (r, v) in self.ranks.iter().zip(&self.values) {
            s.push_str(&format!("{r:<8}{v:.2}\n"));
        }
        s.push_str(&format!("queries {}\n", self.num_queries));
        s.push_str(&format!(
            "queries_without_positives {}\n",
            self.zero_positive_queries
        ));
        s
    }

    /// Machine-readable `recall@{N}=value` lines.
    pub fn kv_lines(&self) -> String {
        let mut s = String::new();
        for (r, v) in self.ranks.iter().zip(&self.values) {
            s.push_str(&format!("recall@{r}={v:.4}\n"));
        }
        s
    }

    /// Writes `<base>.txt` (table) and `<base>.kv` (key-value lines).
    pub fn write_files(&self, base: &Path) -> Result<()> {
        std::fs::write(base.with_extension("txt"), self.text_table())?;
        std::fs::write(base.with_extension("kv"), self.kv_lines())?;
        Ok(())
    }
}

/// Computes Recall@N for `queries` (rows, unit norm) against the index.
pub fn recall_at_n(
    index: &DescriptorIndex,
    queries: &Array2<f32>,
    query_tags: &[Tag],
    protocol: &EvalProtocol,
) -> Result<RecallReport> {
    if queries.nrows() != query_tags.len() {
        return Err(Error::InputShape("one tag per query required".into()));
    }
    if protocol.recall_ranks.is_empty() {
        return Err(Error::Protocol("no recall ranks requested".into()));
    }
    let mut ranks = protocol.recall_ranks.clone();
    ranks.sort_unstable();
    let max_n = (*ranks.last().unwrap()).min(index.len());
    let mut hits = vec![0usize; ranks.len()];
    let mut zero_positive = 0usize;
    for (qi, (q, tag)) in queries.rows().into_iter().zip(query_tags).enumerate() {
        let mask = match protocol.mode {
            ProtocolMode::Geo => positives_geo(tag, index.tags(), protocol.geo_threshold_m)?,
            ProtocolMode::Frame => positives_frame(tag, index.tags(), protocol.frame_tolerance)?,
            ProtocolMode::Pairwise => {
                if qi >= index.len() {
                    return Err(Error::Protocol(
                        "pairwise protocol needs a database row per query".into(),
                    ));
                }
                let mut m = vec![false; index.len()];
                m[qi] = true;
                m
            }
        };
        if !mask.iter().any(|&b| b) {
            zero_positive += 1;
            continue; // miss at every rank
        }
        let ranked = index.knn(q, max_n)?;
        let first_hit = ranked.iter().position(|&db| mask[db]);
        if let Some(pos) = first_hit {
            for (ri, &n) in ranks.iter().enumerate() {
                if pos < n {
                    hits[ri] += 1;
                }
            }
        }
    }
    let nq = queries.nrows();
    let values = hits
        .iter()
        .map(|&h| if nq == 0 { 0.0 } else { 100.0 * h as f64 / nq as f64 })
        .collect();
    Ok(RecallReport {
        ranks,
        values,
        num_queries: nq,
        zero_positive_queries: zero_positive,
    })
}

// ---------------------------------------------------------------------------
// Descriptor files
// ---------------------------------------------------------------------------

const DESCRIPTOR_MAGIC: &[u8; 4] = b"QDAV";
const DESCRIPTOR_VERSION: u32 = 1;

pub struct DescriptorFile {
    pub descriptors: Array2<f32>,
    pub rows: Vec<ManifestRow>,
}

/// Header (magic, version, count, dim), raw f32 data, then one metadata
/// record per descriptor mirroring its manifest row.
pub fn write_descriptors(
    path: &Path,
    descriptors: &Array2<f32>,
    rows: &[ManifestRow],
) -> Result<()> {
    if descriptors.nrows() != rows.len() {
        return Err(Error::InputShape("one manifest row per descriptor".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    fileio::write_magic(&mut w, DESCRIPTOR_MAGIC)?;
    fileio::write_u32(&mut w, DESCRIPTOR_VERSION)?;
    fileio::write_u64(&mut w, descriptors.nrows() as u64)?;
    fileio::write_u32(&mut w, descriptors.ncols() as u32)?;
    let flat = descriptors.as_standard_layout();
    fileio::write_f32_slice(&mut w, flat.as_slice().unwrap())?;
    for row in rows {
        fileio::write_str(&mut w, &row.image_path)?;
        fileio::write_u32(&mut w, row.place_id)?;
        let flags = (row.lat.is_some() as u8) | ((row.frame_id.is_some() as u8) << 1);
        w.write_all(&[flags])?;
        if let (Some(lat), Some(lon)) = (row.lat, row.lon) {
            fileio::write_f64(&mut w, lat)?;
            fileio::write_f64(&mut w, lon)?;
        }
        if let Some(f) = row.frame_id {
            fileio::write_u64(&mut w, f as u64)?;
        }
        fileio::write_str(&mut w, row.split.as_str())?;
    }
    Ok(())
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorFile> {
    let mut r = BufReader::new(File::open(path)?);
    fileio::expect_magic(&mut r, DESCRIPTOR_MAGIC)?;
    let version = fileio::read_u32(&mut r)?;
    if version != DESCRIPTOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported descriptor file version {version}"
        )));
    }
    let count = fileio::read_u64(&mut r)? as usize;
    let dim = fileio::read_u32(&mut r)? as usize;
    let data = fileio::read_f32_vec(&mut r, count * dim)?;
    let descriptors = Array2::from_shape_vec((count, dim), data)
        .map_err(|_| Error::Format("descriptor data truncated".into()))?;
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let image_path = fileio::read_str(&mut r)?;
        let place_id = fileio::read_u32(&mut r)?;
        let mut flags = [0u8; 1];
        std::io::Read::read_exact(&mut r, &mut flags)?;
        let (lat, lon) = if flags[0] & 1 != 0 {
            (Some(fileio::read_f64(&mut r)?), Some(fileio::read_f64(&mut r)?))
        } else {
            (None, None)
        };
        let frame_id = if flags[0] & 2 != 0 {
            Some(fileio::read_u64(&mut r)? as i64)
        } else {
            None
        };
        let split = Split::parse(&fileio::read_str(&mut r)?)?;
        rows.push(ManifestRow {
            image_path,
            place_id,
            lat,
            lon,
            frame_id,
            split,
        });
    }
    Ok(DescriptorFile { descriptors, rows })
}
