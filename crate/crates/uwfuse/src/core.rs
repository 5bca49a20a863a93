//! Shared domain types: (batch, time, dim) grids, embedding sequences,
//! uncertain estimates, fused trajectories, configuration, and the EMB1
//! embedding container.
//!
//! All types are immutable in normal use and safe to share across threads;
//! the operations here are pure functions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stabilizer for layer normalization. Slices whose population variance
/// falls below this are scaled by `1/sqrt(eps)` instead, so constant
/// slices map to zeros.
pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

/// Dense (batch, time, dim) array of `f64` values, laid out batch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    data: Vec<f64>,
    batch: usize,
    time: usize,
    dim: usize,
}

impl Grid {
    pub fn zeros(batch: usize, time: usize, dim: usize) -> Self {
        Grid {
            data: vec![0.0; batch * time * dim],
            batch,
            time,
            dim,
        }
    }

    pub fn filled(value: f64, batch: usize, time: usize, dim: usize) -> Self {
        Grid {
            data: vec![value; batch * time * dim],
            batch,
            time,
            dim,
        }
    }

    /// Wraps a flat vector; fails with `ShapeMismatch` unless
    /// `data.len() == batch * time * dim`.
    pub fn from_vec(data: Vec<f64>, batch: usize, time: usize, dim: usize) -> Result<Self> {
        let expected = batch * time * dim;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                what: "grid",
                expected: format!("{batch}x{time}x{dim} = {expected} values"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Grid {
            data,
            batch,
            time,
            dim,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.time, self.dim)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, b: usize, t: usize, i: usize) -> usize {
        (b * self.time + t) * self.dim + i
    }

    #[inline]
    pub fn at(&self, b: usize, t: usize, i: usize) -> f64 {
        self.data[self.offset(b, t, i)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, t: usize, i: usize) -> &mut f64 {
        let o = self.offset(b, t, i);
        &mut self.data[o]
    }

    /// The contiguous dim-slice at (b, t).
    pub fn slice(&self, b: usize, t: usize) -> &[f64] {
        let o = self.offset(b, t, 0);
        &self.data[o..o + self.dim]
    }

    pub fn slice_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let o = self.offset(b, t, 0);
        let d = self.dim;
        &mut self.data[o..o + d]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            data: self.data.iter().map(|&v| f(v)).collect(),
            batch: self.batch,
            time: self.time,
            dim: self.dim,
        }
    }

    /// Fails with `NonFiniteValue` at the first NaN or infinity.
    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        for (index, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { what, index });
            }
        }
        Ok(())
    }

    pub(crate) fn expect_same_shape(&self, other: &Grid, what: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                what,
                expected: format!("{:?}", self.shape()),
                actual: format!("{:?}", other.shape()),
            });
        }
        Ok(())
    }
}

/// Which sensor stream a sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Event,
    Other,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Event => "event",
            Modality::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "event" => Ok(Modality::Event),
            "other" => Ok(Modality::Other),
            _ => Err(Error::format(format!(
                "unknown modality {s:?} (expected image, event, or other)"
            ))),
        }
    }
}

/// Batch of per-timestep feature vectors for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub modality: Modality,
    pub values: Grid,
}

impl EmbeddingSequence {
    pub fn new(values: Grid, modality: Modality) -> Result<Self> {
        values.check_finite("embedding sequence")?;
        Ok(EmbeddingSequence { modality, values })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.shape()
    }
}

/// Returns the sequence unchanged if every value is finite. Validation is
/// idempotent; the length invariant is enforced at `Grid` construction.
pub fn validate_sequence(seq: EmbeddingSequence) -> Result<EmbeddingSequence> {
    seq.values.check_finite("embedding sequence")?;
    Ok(seq)
}

/// Normalizes each (b, t) slice to zero mean and unit variance across the
/// feature dimension, using the population standard deviation. Slices whose
/// variance falls below `eps_ln` (constant slices in particular) are divided
/// by `sqrt(eps_ln)` and therefore map to zeros.
pub fn layer_normalize(seq: &EmbeddingSequence, eps_ln: f64) -> Result<EmbeddingSequence> {
    if eps_ln <= 0.0 {
        return Err(Error::invalid_config(format!(
            "layer-norm stabilizer must be positive, got {eps_ln}"
        )));
    }
    seq.values.check_finite("embedding sequence")?;
    let (batch, time, dim) = seq.values.shape();
    let mut out = seq.values.clone();
    for b in 0..batch {
        for t in 0..time {
            let slice = out.slice_mut(b, t);
            let mean = slice.iter().sum::<f64>() / dim as f64;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
            let denom = var.max(eps_ln).sqrt();
            for v in slice.iter_mut() {
                *v = (*v - mean) / denom;
            }
        }
    }
    Ok(EmbeddingSequence {
        modality: seq.modality,
        values: out,
    })
}

/// Per-value posterior mean and log-variance pair for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertainEstimate {
    pub mean: Grid,
    pub log_variance: Grid,
}

impl UncertainEstimate {
    pub fn new(mean: Grid, log_variance: Grid) -> Result<Self> {
        mean.expect_same_shape(&log_variance, "uncertain estimate")?;
        mean.check_finite("estimate mean")?;
        log_variance.check_finite("estimate log-variance")?;
        Ok(UncertainEstimate { mean, log_variance })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.mean.shape()
    }

    /// `exp(log_variance)`; positive by construction.
    pub fn variance(&self) -> Grid {
        self.log_variance.map(f64::exp)
    }
}

/// Per-timestep fused mean and fused effective variance, with the per-value
/// fusion weights that produced them (one weight plane per modality).
#[derive(Clone, Debug, PartialEq)]
pub struct FusedTrajectory {
    pub fused_mean: Grid,
    pub fused_variance: Grid,
    pub weights_per_modality: Vec<Grid>,
}

impl FusedTrajectory {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.fused_mean.shape()
    }

    /// Checks positivity of the fused variance and finiteness throughout.
    pub fn validate(&self) -> Result<()> {
        self.fused_mean.check_finite("fused mean")?;
        self.fused_variance.check_finite("fused variance")?;
        for (index, v) in self.fused_variance.values().iter().enumerate() {
            if *v <= 0.0 {
                let _ = index;
                return Err(Error::NonPositiveVariance { value: *v });
            }
        }
        for w in &self.weights_per_modality {
            w.check_finite("fusion weights")?;
        }
        Ok(())
    }

    /// Per-value weights rescaled to sum to one across modalities.
    pub fn normalized_weights(&self) -> Vec<Grid> {
        let mut out = self.weights_per_modality.clone();
        if out.is_empty() {
            return out;
        }
        let n = out[0].len();
        for k in 0..n {
            let total: f64 = out.iter().map(|g| g.values()[k]).sum();
            if total > 0.0 {
                for g in out.iter_mut() {
                    g.values_mut()[k] /= total;
                }
            }
        }
        out
    }
}

/// Noise-model selector for `FusionConfig`; pair with `nu` to build a
/// `noise::NoiseModel`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    StudentT,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "student_t" => Ok(NoiseKind::StudentT),
            _ => Err(Error::format(format!(
                "unknown noise model {s:?} (expected gaussian or student_t)"
            ))),
        }
    }
}

/// Fusion hyperparameters. Defaults: nu = 8, epsilon = 1e-8,
/// refine_steps = 10, refine_lambda = 0.5, reg_lambda1 = reg_lambda2 = 0.5,
/// Student-t noise, segment_len = 16.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Student-t degrees of freedom.
    pub nu: f64,
    /// Stability constant added to effective variances before inversion.
    pub epsilon: f64,
    /// Number of refinement iterations.
    pub refine_steps: usize,
    /// Attenuation factor for refinement updates, strictly inside (0, 1).
    pub refine_lambda: f64,
    /// Weight of the cosine-alignment term in the regularizer.
    pub reg_lambda1: f64,
    /// Weight of the norm-consistency term in the regularizer.
    pub reg_lambda2: f64,
    pub noise_model: NoiseKind,
    /// Number of time steps aggregated into one scoring segment.
    pub segment_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            nu: 8.0,
            epsilon: 1e-8,
            refine_steps: 10,
            refine_lambda: 0.5,
            reg_lambda1: 0.5,
            reg_lambda2: 0.5,
            noise_model: NoiseKind::StudentT,
            segment_len: 16,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::invalid_config(format!("nu must be > 0, got {}", self.nu)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid_config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.refine_lambda > 0.0 && self.refine_lambda < 1.0) {
            return Err(Error::invalid_config(format!(
                "refine_lambda must lie strictly inside (0, 1), got {}",
                self.refine_lambda
            )));
        }
        if self.reg_lambda1 < 0.0 || self.reg_lambda2 < 0.0 {
            return Err(Error::invalid_config(
                "regularizer weights must be nonnegative".to_string(),
            ));
        }
        if self.segment_len == 0 {
            return Err(Error::invalid_config("segment_len must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Per-segment anomaly probabilities with labels for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub video_id: String,
    /// One probability per segment, each in [0, 1].
    pub probabilities: Vec<f64>,
    /// One {0, 1} label per segment (broadcast from the video label under
    /// weak supervision).
    pub labels: Vec<u8>,
    pub video_anomalous: bool,
}

impl ScoreSeries {
    pub fn validate(&self) -> Result<()> {
        for (index, p) in self.probabilities.iter().enumerate() {
            if !(p.is_finite() && (0.0..=1.0).contains(p)) {
                return Err(Error::NonFiniteValue {
                    what: "score probabilities",
                    index,
                });
            }
        }
        if self.labels.len() != self.probabilities.len() {
            return Err(Error::ShapeMismatch {
                what: "score series",
                expected: format!("{} labels", self.probabilities.len()),
                actual: format!("{} labels", self.labels.len()),
            });
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::format("labels must be 0 or 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// EMB1 container
// ---------------------------------------------------------------------------
//
// Header: magic bytes "EMB1", then batch, time, dim as u32 little-endian,
// then batch*time*dim IEEE-754 f32 little-endian values in (b, t, i) order.

const EMB1_MAGIC: &[u8; 4] = b"EMB1";

pub fn write_emb1(path: &Path, grid: &Grid) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        w.write_all(EMB1_MAGIC)?;
        w.write_all(&(grid.batch() as u32).to_le_bytes())?;
        w.write_all(&(grid.time() as u32).to_le_bytes())?;
        w.write_all(&(grid.dim() as u32).to_le_bytes())?;
        for v in grid.values() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()
    };
    run().map_err(|e| Error::io(path, e))
}

pub fn read_emb1(path: &Path) -> Result<Grid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != EMB1_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, expected \"EMB1\"",
            path.display(),
            magic
        )));
    }
    let mut header = [0u8; 12];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let batch = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let time = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = batch * time * dim;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != count * 4 {
        return Err(Error::format(format!(
            "{}: expected {} payload bytes for {batch}x{time}x{dim}, got {}",
            path.display(),
            count * 4,
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let grid = Grid::from_vec(data, batch, time, dim)?;
    grid.check_finite("EMB1 payload")?;
    Ok(grid)
}

/// JSON-lines alternative for small fixtures: one line per batch item,
/// holding a nested time x dim array.
pub fn read_embedding_jsonl(path: &Path) -> Result<Grid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Vec<Vec<f64>> = serde_json::from_str(&line).map_err(|e| {
            Error::format(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        rows.push(record);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput {
            what: "embedding JSON lines",
        });
    }
    let time = rows[0].len();
    let dim = rows[0].first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * time * dim);
    for (b, record) in rows.iter().enumerate() {
        if record.len() != time || record.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch {
                what: "embedding JSON lines",
                expected: format!("{time}x{dim} per record"),
                actual: format!("record {b} differs"),
            });
        }
        for row in record {
            data.extend_from_slice(row);
        }
    }
    let grid = Grid::from_vec(data, rows.len(), time, dim)?;
    grid.check_finite("embedding JSON lines")?;
    Ok(grid)
}

/// Reads an embedding file, sniffing between the EMB1 binary container and
/// the JSON-lines fallback.
pub fn read_embedding_auto(path: &Path, modality: Modality) -> Result<EmbeddingSequence> {
    let mut magic = [0u8; 4];
    let read = {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        file.read(&mut magic).map_err(|e| Error::io(path, e))?
    };
    let grid = if read == 4 && &magic == EMB1_MAGIC {
        read_emb1(path)?
    } else {
        read_embedding_jsonl(path)?
    };
    EmbeddingSequence::new(grid, modality)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(data: Vec<f64>, b: usize, t: usize, d: usize) -> EmbeddingSequence {
        EmbeddingSequence {
            modality: Modality::Other,
            values: Grid::from_vec(data, b, t, d).unwrap(),
        }
    }

    #[test]
    fn validate_accepts_zeros() {
        let s = seq(vec![0.0; 4], 1, 1, 4);
        assert!(validate_sequence(s).is_ok());
    }

    #[test]
    fn validate_rejects_nan_with_index() {
        let s = seq(vec![0.0, f64::NAN, 0.0, 0.0], 1, 1, 4);
        match validate_sequence(s) {
            Err(Error::NonFiniteValue { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }
    }

    #[test]
    fn wrong_length_is_shape_mismatch() {
        match Grid::from_vec(vec![0.0; 7], 1, 2, 4) {
            Err(Error::ShapeMismatch { .. }) => {}
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn validate_is_idempotent() {
        let s = seq(vec![1.0, 2.0, 3.0, 4.0], 1, 1, 4);
        let once = validate_sequence(s).unwrap();
        let twice = validate_sequence(once.clone()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn layer_norm_constant_slice_maps_to_zeros() {
        let s = seq(vec![3.0; 4], 1, 1, 4);
        let out = layer_normalize(&s, DEFAULT_LAYER_NORM_EPS).unwrap();
        assert_eq!(out.values.values(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_fixed_points() {
        let s = seq(vec![1.0, -1.0], 1, 1, 2);
        let out = layer_normalize(&s, DEFAULT_LAYER_NORM_EPS).unwrap();
        assert_eq!(out.values.values(), &[1.0, -1.0]);

        let s = seq(vec![0.0, 2.0], 1, 1, 2);
        let out = layer_normalize(&s, DEFAULT_LAYER_NORM_EPS).unwrap();
        assert_eq!(out.values.values(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_std() {
        let s = seq(vec![0.3, -4.0, 2.5, 10.0, -7.25, 1.0], 1, 2, 3);
        let out = layer_normalize(&s, DEFAULT_LAYER_NORM_EPS).unwrap();
        for t in 0..2 {
            let slice = out.values.slice(0, t);
            let mean = slice.iter().sum::<f64>() / 3.0;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
        }
    }

    #[test]
    fn layer_norm_rejects_non_finite() {
        let s = seq(vec![1.0, f64::INFINITY], 1, 1, 2);
        assert!(matches!(
            layer_normalize(&s, DEFAULT_LAYER_NORM_EPS),
            Err(Error::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn config_default_validates() {
        let cfg = FusionConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.nu, 8.0);
        assert_eq!(cfg.refine_steps, 10);
        assert_eq!(cfg.segment_len, 16);
    }

    #[test]
    fn config_rejects_bad_lambda() {
        let cfg = FusionConfig {
            refine_lambda: 1.0,
            ..FusionConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = FusionConfig {
            refine_lambda: 0.0,
            ..FusionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn emb1_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb1");
        let grid = Grid::from_vec(vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125], 1, 2, 3).unwrap();
        write_emb1(&path, &grid).unwrap();
        let back = read_emb1(&path).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn emb1_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.emb1");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMB1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]); // 2 of 8 floats
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_emb1(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn jsonl_matches_emb1_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, "[[1.0, 2.0], [3.0, 4.0]]\n[[5.0, 6.0], [7.0, 8.0]]\n").unwrap();
        let grid = read_embedding_jsonl(&path).unwrap();
        assert_eq!(grid.shape(), (2, 2, 2));
        assert_eq!(grid.at(1, 0, 1), 6.0);
        let auto = read_embedding_auto(&path, Modality::Image).unwrap();
        assert_eq!(auto.values, grid);
        assert_eq!(auto.modality, Modality::Image);
    }
}
