//! The semantic representation matrix and user pooling.
//!
//! Embedding files come in two layouts: whitespace text with one row per line,
//! or binary: the magic `BIFE`, `u32` rows, `u32` cols, then little-endian
//! `f32` values in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, GroupAssignment};
use crate::seeds::{self, Role};
use crate::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"BIFE";

/// Item representation matrix, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMatrix {
    data: Array2<f64>,
    normalized: bool,
}

impl SemanticMatrix {
    pub fn new(data: Array2<f64>, normalize: bool) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::Shape("embedding dimension is 0".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("semantic matrix".into()));
        }
        let mut data = data.as_standard_layout().into_owned();
        if normalize {
            for mut row in data.rows_mut() {
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    row.mapv_inplace(|v| v / norm);
                }
            }
        }
        Ok(Self {
            data,
            normalized: normalize,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, normalize: bool) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged embedding rows".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let data = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data, normalize)
    }

    pub fn num_items(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, item: usize) -> &[f64] {
        let d = self.dim();
        &self.data.as_slice().expect("standard layout")[item * d..(item + 1) * d]
    }

    pub fn row_mut(&mut self, item: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.data.as_slice_mut().expect("standard layout")[item * d..(item + 1) * d]
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows reordered so that row `k` of the result is row `order[k]` of self.
    pub fn select_rows(&self, order: &[usize]) -> Result<Self> {
        if let Some(&bad) = order.iter().find(|&&i| i >= self.num_items()) {
            return Err(Error::Shape(format!("row {bad} out of range")));
        }
        let data = self.data.select(ndarray::Axis(0), order);
        Ok(Self {
            data,
            normalized: self.normalized,
        })
    }
}

/// How user vectors aggregate their history rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

impl Pooling {
    /// Weight each history row receives in the pooled vector.
    pub fn factor(self, history_len: usize) -> f64 {
        match self {
            Pooling::Mean => 1.0 / history_len as f64,
            Pooling::Sum => 1.0,
        }
    }
}

/// Pooled representation of a user from the current rows of `z`.
pub fn user_representation(z: &SemanticMatrix, history: &[usize], pooling: Pooling) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut out = vec![0.0; z.dim()];
    for &i in history {
        if i >= z.num_items() {
            return Err(Error::Shape(format!("history item {i} out of range")));
        }
        for (o, v) in out.iter_mut().zip(z.row(i)) {
            *o += v;
        }
    }
    let f = pooling.factor(history.len());
    out.iter_mut().for_each(|o| *o *= f);
    Ok(out)
}

pub fn load_embeddings(path: impl AsRef<Path>, expected_items: usize, normalize: bool) -> Result<SemanticMatrix> {
    let data = read_matrix(path.as_ref())?;
    if data.nrows() != expected_items {
        return Err(Error::RowCount {
            expected: expected_items,
            found: data.nrows(),
        });
    }
    SemanticMatrix::new(data, normalize)
}

/// Reads a stored matrix without checking its row count or normalizing it.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<SemanticMatrix> {
    SemanticMatrix::new(read_matrix(path.as_ref())?, false)
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BLOB_MAGIC) {
        decode_blob(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        parse_text_rows(&text)
    }
}

fn parse_text_rows(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("embedding line {}: {e}", n + 1)))?;
        rows.push(row);
    }
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged embedding rows".into()));
    }
    if d == 0 {
        return Err(Error::Shape("embedding dimension is 0".into()));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| Error::Shape(e.to_string()))
}

/// Encodes a matrix in the binary layout (values narrowed to `f32`).
pub fn encode_blob(rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(rows * cols, values.len());
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes the binary layout into a matrix.
pub fn decode_blob(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 12 || &bytes[..4] != BLOB_MAGIC {
        return Err(Error::Parse("missing BIFE header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    if cols == 0 {
        return Err(Error::Shape("embedding dimension is 0".into()));
    }
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Parse(format!(
            "BIFE body holds {} bytes, header declares {rows}x{cols}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_embeddings(path: impl AsRef<Path>, z: &SemanticMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_blob(z.num_items(), z.dim(), z.as_slice())).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthEmbedConfig {
    pub d_sem: usize,
    pub num_latent_topics: usize,
    /// Per-coordinate noise standard deviation, indexed by group.
    pub group_noise_scale: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthEmbedConfig {
    fn default() -> Self {
        Self {
            d_sem: 32,
            num_latent_topics: 12,
            group_noise_scale: vec![0.05, 0.2, 0.4, 0.6],
            seed: 0,
        }
    }
}

impl SynthEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_sem == 0 || self.num_latent_topics == 0 {
            return Err(Error::Config("d_sem and num_latent_topics must be > 0".into()));
        }
        if self.group_noise_scale.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("group_noise_scale entries must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Unit-norm topic centers, one per row.
pub fn topic_centers<R: Rng>(num_topics: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..num_topics)
        .map(|_| {
            let mut c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            normalize_in_place(&mut c);
            c
        })
        .collect()
}

/// Rows built as `center[topic[i]] + N(0, noise[i]^2)` per coordinate, then
/// L2-normalized.
pub fn embed_from_topics<R: Rng>(
    centers: &[Vec<f64>],
    topic_of: &[usize],
    noise_of: &[f64],
    rng: &mut R,
) -> Result<SemanticMatrix> {
    if topic_of.len() != noise_of.len() {
        return Err(Error::Shape("topic and noise vectors differ in length".into()));
    }
    let dim = centers.first().map_or(0, Vec::len);
    let mut rows = Vec::with_capacity(topic_of.len());
    for (&t, &sigma) in topic_of.iter().zip(noise_of) {
        let center = centers
            .get(t)
            .ok_or_else(|| Error::Shape(format!("topic {t} out of range")))?;
        let mut row = center.clone();
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            row.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        if row.iter().all(|v| *v == 0.0) {
            row = center.clone();
        }
        rows.push(row);
    }
    debug_assert!(rows.iter().all(|r| r.len() == dim));
    SemanticMatrix::from_rows(rows, true)
}

/// Stand-in for encoder output with controllable per-group quality.
///
/// Each item draws a latent topic; its row is the topic center plus Gaussian
/// noise whose scale depends on the item's group. Noisier groups get less
/// informative rows.
pub fn synth_embeddings(ds: &Dataset, groups: &GroupAssignment, cfg: &SynthEmbedConfig) -> Result<SemanticMatrix> {
    cfg.validate()?;
    if groups.num_items() != ds.num_items {
        return Err(Error::Shape(format!(
            "groups cover {} items, dataset has {}",
            groups.num_items(),
            ds.num_items
        )));
    }
    if cfg.group_noise_scale.len() < groups.num_groups {
        return Err(Error::Config(format!(
            "group_noise_scale has {} entries for {} groups",
            cfg.group_noise_scale.len(),
            groups.num_groups
        )));
    }
    let mut rng = seeds::rng(cfg.seed, Role::Embed);
    let centers = topic_centers(cfg.num_latent_topics, cfg.d_sem, &mut rng);
    let topic_of: Vec<usize> = (0..ds.num_items)
        .map(|_| rng.random_range(0..cfg.num_latent_topics))
        .collect();
    let noise_of: Vec<f64> = groups.group_of.iter().map(|&g| cfg.group_noise_scale[g]).collect();
    embed_from_topics(&centers, &topic_of, &noise_of, &mut rng)
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn loads_zero_text_matrix() {
        let f = write_tmp(b"0 0 0 0\n0 0 0 0\n0 0 0 0\n");
        let z = load_embeddings(f.path(), 3, false).unwrap();
        assert_eq!((z.num_items(), z.dim()), (3, 4));
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalizes_rows_on_load() {
        let f = write_tmp(b"3 4\n");
        let z = load_embeddings(f.path(), 1, true).unwrap();
        assert!((z.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((z.row(0)[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn row_count_mismatch() {
        let f = write_tmp(b"1\n2\n3\n4\n5\n");
        let err = load_embeddings(f.path(), 6, false).unwrap_err();
        assert!(err.to_string().starts_with("row-count mismatch"));
    }

    #[test]
    fn rejects_non_finite_and_empty_rows() {
        let f = write_tmp(b"1 NaN\n");
        assert!(matches!(load_embeddings(f.path(), 1, false), Err(Error::NonFinite(_))));
        let blob = encode_blob(2, 0, &[]);
        assert!(decode_blob(&blob).is_err());
    }

    #[test]
    fn binary_layout_round_trips() {
        let values = [1.0, -2.5, 0.25, 4.0, 5.0, 6.0];
        let f = write_tmp(&encode_blob(2, 3, &values));
        let z = load_embeddings(f.path(), 2, false).unwrap();
        assert_eq!(z.as_slice(), &values);
        let bytes = std::fs::read(f.path()).unwrap();
        assert_eq!(&bytes[..4], b"BIFE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 12 + 6 * 4);
    }

    #[test]
    fn user_vector_is_mean_of_history() {
        let z = SemanticMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![7.0, 7.0]], false).unwrap();
        assert_eq!(user_representation(&z, &[2], Pooling::Mean).unwrap(), vec![7.0, 7.0]);
        assert_eq!(user_representation(&z, &[0, 1], Pooling::Mean).unwrap(), vec![0.5, 0.5]);
        assert_eq!(user_representation(&z, &[0, 1], Pooling::Sum).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(user_representation(&z, &[], Pooling::Mean), Err(Error::EmptyHistory)));
    }
}
