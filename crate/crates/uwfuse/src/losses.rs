//! The loss stack: segment-aggregated binary cross-entropy, closed-form KL
//! to the standard normal under effective variance, a direction-plus-norm
//! regularizer between modality means, and analytic reverse-mode gradients
//! for all linear-head and estimator parameters.
//!
//! Gradients are defined for the per-step differentiable path
//! heads -> fusion -> refinement -> classifier -> total loss; the
//! sequentially smoothed trajectory is inference-only.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::{EmbeddingSequence, Grid, UncertainEstimate};
use crate::error::{Error, Result};
use crate::noise::NoiseModel;
use crate::pipeline::{Pipeline, PipelineOutput, TemporalMode};

/// Linear projection heads: a mean head `g`, a log-variance head `h`, and a
/// scalar classifier over the refined fused state. One shared set serves
/// every modality.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHeads {
    dim: usize,
    /// dim x dim, row-major.
    pub g_weight: Vec<f64>,
    pub g_bias: Vec<f64>,
    /// dim x dim, row-major.
    pub h_weight: Vec<f64>,
    pub h_bias: Vec<f64>,
    pub classifier_weight: Vec<f64>,
    pub classifier_bias: f64,
}

impl LinearHeads {
    pub fn new(
        dim: usize,
        g_weight: Vec<f64>,
        g_bias: Vec<f64>,
        h_weight: Vec<f64>,
        h_bias: Vec<f64>,
        classifier_weight: Vec<f64>,
        classifier_bias: f64,
    ) -> Result<Self> {
        let heads = LinearHeads {
            dim,
            g_weight,
            g_bias,
            h_weight,
            h_bias,
            classifier_weight,
            classifier_bias,
        };
        heads.validate()?;
        Ok(heads)
    }

    /// Everything zero: mean 0, unit variance, constant logits.
    pub fn zeros(dim: usize) -> Self {
        LinearHeads {
            dim,
            g_weight: vec![0.0; dim * dim],
            g_bias: vec![0.0; dim],
            h_weight: vec![0.0; dim * dim],
            h_bias: vec![0.0; dim],
            classifier_weight: vec![0.0; dim],
            classifier_bias: 0.0,
        }
    }

    /// Identity mean head with unit variance and a zero classifier; the
    /// deterministic initialization used by the desk-scale trainer.
    pub fn identity(dim: usize) -> Self {
        let mut heads = LinearHeads::zeros(dim);
        for i in 0..dim {
            heads.g_weight[i * dim + i] = 1.0;
        }
        heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        let lens = [
            ("g_weight", self.g_weight.len(), d * d),
            ("g_bias", self.g_bias.len(), d),
            ("h_weight", self.h_weight.len(), d * d),
            ("h_bias", self.h_bias.len(), d),
            ("classifier_weight", self.classifier_weight.len(), d),
        ];
        for (what, len, want) in lens {
            if len != want {
                return Err(Error::ShapeMismatch {
                    what: "linear heads",
                    expected: format!("{what} of length {want}"),
                    actual: format!("length {len}"),
                });
            }
        }
        let all = self
            .g_weight
            .iter()
            .chain(&self.g_bias)
            .chain(&self.h_weight)
            .chain(&self.h_bias)
            .chain(&self.classifier_weight)
            .chain(std::iter::once(&self.classifier_bias));
        for (index, v) in all.enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    what: "linear heads",
                    index,
                });
            }
        }
        Ok(())
    }

    /// Parameters in a fixed flat order: g_weight, g_bias, h_weight, h_bias,
    /// classifier_weight, classifier_bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(param_count(self.dim));
        out.extend_from_slice(&self.g_weight);
        out.extend_from_slice(&self.g_bias);
        out.extend_from_slice(&self.h_weight);
        out.extend_from_slice(&self.h_bias);
        out.extend_from_slice(&self.classifier_weight);
        out.push(self.classifier_bias);
        out
    }

    pub fn unflatten(dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != param_count(dim) {
            return Err(Error::ShapeMismatch {
                what: "linear heads",
                expected: format!("{} parameters", param_count(dim)),
                actual: format!("{}", flat.len()),
            });
        }
        let d2 = dim * dim;
        let mut at = 0;
        let mut take = |n: usize| {
            let s = flat[at..at + n].to_vec();
            at += n;
            s
        };
        let g_weight = take(d2);
        let g_bias = take(dim);
        let h_weight = take(d2);
        let h_bias = take(dim);
        let classifier_weight = take(dim);
        let classifier_bias = flat[at];
        LinearHeads::new(
            dim,
            g_weight,
            g_bias,
            h_weight,
            h_bias,
            classifier_weight,
            classifier_bias,
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &HeadsFile::from(self))
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parsed: HeadsFile = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        parsed.into_heads()
    }
}

/// Number of trainable head parameters for a given feature dimension.
pub fn param_count(dim: usize) -> usize {
    2 * (dim * dim + dim) + dim + 1
}

/// On-disk JSON layout with nested weight rows.
#[derive(Serialize, Deserialize)]
struct HeadsFile {
    dim: usize,
    g_weight: Vec<Vec<f64>>,
    g_bias: Vec<f64>,
    h_weight: Vec<Vec<f64>>,
    h_bias: Vec<f64>,
    classifier_weight: Vec<f64>,
    classifier_bias: f64,
}

impl HeadsFile {
    fn from(heads: &LinearHeads) -> Self {
        let rows = |flat: &[f64]| {
            flat.chunks(heads.dim)
                .map(<[f64]>::to_vec)
                .collect::<Vec<_>>()
        };
        HeadsFile {
            dim: heads.dim,
            g_weight: rows(&heads.g_weight),
            g_bias: heads.g_bias.clone(),
            h_weight: rows(&heads.h_weight),
            h_bias: heads.h_bias.clone(),
            classifier_weight: heads.classifier_weight.clone(),
            classifier_bias: heads.classifier_bias,
        }
    }

    fn into_heads(self) -> Result<LinearHeads> {
        let flat = |rows: Vec<Vec<f64>>| rows.into_iter().flatten().collect::<Vec<f64>>();
        LinearHeads::new(
            self.dim,
            flat(self.g_weight),
            self.g_bias,
            flat(self.h_weight),
            self.h_bias,
            self.classifier_weight,
            self.classifier_bias,
        )
    }
}

pub(crate) fn apply_linear(weight: &[f64], bias: &[f64], dim: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..dim {
        let row = &weight[i * dim..(i + 1) * dim];
        out[i] = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias[i];
    }
}

/// Applies the mean and log-variance heads to every (b, t) slice.
pub fn predict_heads(seq: &EmbeddingSequence, heads: &LinearHeads) -> Result<UncertainEstimate> {
    heads.validate()?;
    let (batch, time, dim) = seq.values.shape();
    if dim != heads.dim {
        return Err(Error::ShapeMismatch {
            what: "head input",
            expected: format!("dim {}", heads.dim),
            actual: format!("dim {dim}"),
        });
    }
    let mut mean = Grid::zeros(batch, time, dim);
    let mut log_variance = Grid::zeros(batch, time, dim);
    for b in 0..batch {
        for t in 0..time {
            let x = seq.values.slice(b, t);
            apply_linear(&heads.g_weight, &heads.g_bias, dim, x, mean.slice_mut(b, t));
            apply_linear(
                &heads.h_weight,
                &heads.h_bias,
                dim,
                x,
                log_variance.slice_mut(b, t),
            );
        }
    }
    UncertainEstimate::new(mean, log_variance)
}

/// Segment count `floor(length / segment_len) + 1`. At exact multiples this
/// over-counts by one; the BCE aggregation below partitions the time axis
/// instead and never produces an empty segment.
pub fn segment_count(length: usize, segment_len: usize) -> usize {
    length / segment_len + 1
}

/// Half-open spans `[start, end)` partitioning `time` into non-overlapping
/// segments of `segment_len`, keeping the final partial segment.
pub fn segment_spans(time: usize, segment_len: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    while start < time {
        spans.push((start, (start + segment_len).min(time)));
        start += segment_len;
    }
    spans
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-video segment probabilities: sigmoid per step, averaged within each
/// segment (the final partial segment averages its available steps).
pub fn segment_probabilities(
    logits: &[f64],
    batch: usize,
    time: usize,
    segment_len: usize,
) -> Vec<Vec<f64>> {
    let spans = segment_spans(time, segment_len);
    (0..batch)
        .map(|b| {
            spans
                .iter()
                .map(|&(s, e)| {
                    let sum: f64 = logits[b * time + s..b * time + e]
                        .iter()
                        .map(|&l| sigmoid(l))
                        .sum();
                    sum / (e - s) as f64
                })
                .collect()
        })
        .collect()
}

/// Mean BCE loss plus the per-video segment probabilities behind it.
pub struct BceOutput {
    pub loss: f64,
    pub segment_probs: Vec<Vec<f64>>,
}

/// Segment-aggregated binary cross-entropy under weak supervision: the
/// video label is broadcast to all of its segments and the loss averages
/// over every segment of every video.
pub fn bce_segmented(
    logits: &[f64],
    batch: usize,
    time: usize,
    labels: &[u8],
    segment_len: usize,
) -> Result<BceOutput> {
    if batch == 0 || time == 0 {
        return Err(Error::EmptyInput { what: "logits" });
    }
    if logits.len() != batch * time {
        return Err(Error::ShapeMismatch {
            what: "logits",
            expected: format!("{} values", batch * time),
            actual: format!("{}", logits.len()),
        });
    }
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            what: "video labels",
            expected: format!("{batch} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::format("labels must be 0 or 1"));
    }
    if segment_len == 0 {
        return Err(Error::invalid_config("segment_len must be >= 1".to_string()));
    }
    let segment_probs = segment_probabilities(logits, batch, time, segment_len);
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, probs) in segment_probs.iter().enumerate() {
        for &p in probs {
            total += if labels[b] == 1 { -p.ln() } else { -(1.0 - p).ln() };
            count += 1;
        }
    }
    Ok(BceOutput {
        loss: total / count as f64,
        segment_probs,
    })
}

/// Plain per-step BCE for frame-level labels (one entry per (b, t) step).
/// Equals `bce_segmented` with `segment_len = 1` when the frame labels are
/// a broadcast video label.
pub fn bce_framewise(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput { what: "logits" });
    }
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "frame labels",
            expected: format!("{} labels", logits.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let mut total = 0.0;
    for (&l, &y) in logits.iter().zip(labels) {
        if y > 1 {
            return Err(Error::format("labels must be 0 or 1"));
        }
        let p = sigmoid(l);
        total += if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    Ok(total / logits.len() as f64)
}

/// Mean closed-form KL divergence to the standard normal, computed from the
/// effective variance: `0.5 (var + mean^2 - 1 - ln var)` per value. The
/// noise-model switch changes the value through the effective variance.
pub fn kl_to_standard_normal(est: &UncertainEstimate, model: &NoiseModel) -> Result<f64> {
    let n = est.mean.len();
    if n == 0 {
        return Err(Error::EmptyInput { what: "estimate" });
    }
    let mut total = 0.0;
    for (mu, lv) in est.mean.values().iter().zip(est.log_variance.values()) {
        let log_eff = model.effective_log_variance(*lv);
        let eff = log_eff.exp();
        total += 0.5 * (eff + mu * mu - 1.0 - log_eff);
    }
    Ok(total / n as f64)
}

/// Alignment loss value plus the number of zero-vector slices skipped.
pub struct RegLossOutput {
    pub loss: f64,
    pub skipped: usize,
}

/// Direction and norm regularizer averaged over (b, t) slices:
/// `lambda1 (1 - cos(u, v)) + lambda2 | ||u|| - ||v|| |`. Slices where
/// either vector is zero have no defined cosine; they are skipped and
/// counted. Fails with `DegenerateVector` only when every slice is skipped.
pub fn reg_loss(mu_x: &Grid, mu_e: &Grid, lambda1: f64, lambda2: f64) -> Result<RegLossOutput> {
    mu_x.expect_same_shape(mu_e, "regularizer inputs")?;
    let (batch, time, _dim) = mu_x.shape();
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut skipped = 0usize;
    for b in 0..batch {
        for t in 0..time {
            let u = mu_x.slice(b, t);
            let v = mu_e.slice(b, t);
            let nu = norm(u);
            let nv = norm(v);
            if nu == 0.0 || nv == 0.0 {
                skipped += 1;
                continue;
            }
            let cos = dot(u, v) / (nu * nv);
            total += lambda1 * (1.0 - cos) + lambda2 * (nu - nv).abs();
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::DegenerateVector);
    }
    Ok(RegLossOutput {
        loss: total / valid as f64,
        skipped,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// The individual terms of the total loss.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub classification: f64,
    pub kl: Vec<f64>,
    pub regularization: f64,
}

/// `L = L_cls + sum_m L_KL^m + L_reg`; fails if the sum is non-finite.
pub fn total_loss(parts: &LossParts) -> Result<f64> {
    let total = parts.classification + parts.kl.iter().sum::<f64>() + parts.regularization;
    if !total.is_finite() {
        return Err(Error::NonFiniteValue {
            what: "loss parts",
            index: 0,
        });
    }
    Ok(total)
}

/// All loss terms evaluated on one pipeline forward pass.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub classification: f64,
    pub kl: Vec<f64>,
    pub regularization: f64,
    pub reg_skipped: usize,
    pub total: f64,
}

/// Gradients with respect to every head parameter, laid out like
/// [`LinearHeads`].
#[derive(Clone, Debug)]
pub struct HeadGradients {
    pub g_weight: Vec<f64>,
    pub g_bias: Vec<f64>,
    pub h_weight: Vec<f64>,
    pub h_bias: Vec<f64>,
    pub classifier_weight: Vec<f64>,
    pub classifier_bias: f64,
}

/// Gradients for the affine residual estimator.
#[derive(Clone, Debug)]
pub struct EstimatorGradients {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for every trainable parameter of the pipeline.
#[derive(Clone, Debug)]
pub struct PipelineGradients {
    pub heads: HeadGradients,
    pub estimator: EstimatorGradients,
}

impl PipelineGradients {
    /// Flat layout matching `Pipeline::params`: heads then estimator.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.heads.g_weight);
        out.extend_from_slice(&self.heads.g_bias);
        out.extend_from_slice(&self.heads.h_weight);
        out.extend_from_slice(&self.heads.h_bias);
        out.extend_from_slice(&self.heads.classifier_weight);
        out.push(self.heads.classifier_bias);
        out.extend_from_slice(&self.estimator.weight);
        out.extend_from_slice(&self.estimator.bias);
        out
    }
}

/// Evaluates all losses on one pipeline forward pass.
pub fn pipeline_loss(
    pipeline: &Pipeline,
    inputs: &[&EmbeddingSequence],
    labels: &[u8],
) -> Result<LossBreakdown> {
    let out = pipeline.run(inputs)?;
    breakdown(pipeline, &out, labels)
}

fn breakdown(pipeline: &Pipeline, out: &PipelineOutput, labels: &[u8]) -> Result<LossBreakdown> {
    let cfg = &pipeline.config;
    let (batch, time, _) = out.refined.shape();
    let bce = bce_segmented(&out.logits, batch, time, labels, cfg.segment_len)?;
    let model = cfg.noise_model()?;
    let kl: Vec<f64> = out
        .estimates
        .iter()
        .map(|est| kl_to_standard_normal(est, &model))
        .collect::<Result<_>>()?;
    // The alignment term exists only for the two-modality pipeline and
    // contributes exactly zero when both weights vanish.
    let want_reg =
        out.estimates.len() == 2 && (cfg.reg_lambda1 != 0.0 || cfg.reg_lambda2 != 0.0);
    let (regularization, reg_skipped) = if want_reg {
        let reg = reg_loss(
            &out.estimates[0].mean,
            &out.estimates[1].mean,
            cfg.reg_lambda1,
            cfg.reg_lambda2,
        )?;
        (reg.loss, reg.skipped)
    } else {
        (0.0, 0)
    };
    let parts = LossParts {
        classification: bce.loss,
        kl: kl.clone(),
        regularization,
    };
    Ok(LossBreakdown {
        classification: bce.loss,
        kl,
        regularization,
        reg_skipped,
        total: total_loss(&parts)?,
    })
}

/// Analytic reverse-mode gradients for every parameter of the heads and the
/// affine estimator, through heads -> fusion -> refinement -> classifier ->
/// total loss. Requires the per-step temporal mode.
pub fn loss_gradients(
    pipeline: &Pipeline,
    inputs: &[&EmbeddingSequence],
    labels: &[u8],
) -> Result<(LossBreakdown, PipelineGradients)> {
    if pipeline.temporal != TemporalMode::PerStep {
        return Err(Error::invalid_config(
            "gradients are defined for the per-step temporal mode".to_string(),
        ));
    }
    let out = pipeline.run(inputs)?;
    let losses = breakdown(pipeline, &out, labels)?;

    let cfg = &pipeline.config;
    let model = cfg.noise_model()?;
    let dim = pipeline.heads.dim();
    let (batch, time, _) = out.refined.shape();
    let modalities = out.estimates.len();
    let value_count = batch * time * dim;

    // Classification: d loss / d logits through the segment means.
    let spans = segment_spans(time, cfg.segment_len);
    let segment_total = spans.len() * batch;
    let mut d_logits = vec![0.0; batch * time];
    for b in 0..batch {
        for (s, &(start, end)) in spans.iter().enumerate() {
            let p = out.segment_probs[b][s];
            let dp = if labels[b] == 1 { -1.0 / p } else { 1.0 / (1.0 - p) }
                / segment_total as f64;
            for t in start..end {
                let sig = sigmoid(out.logits[b * time + t]);
                d_logits[b * time + t] = dp * sig * (1.0 - sig) / (end - start) as f64;
            }
        }
    }

    // Classifier head, producing the gradient at the final refined state.
    let final_state = out.refine_states.last().unwrap();
    let mut d_cls_w = vec![0.0; dim];
    let mut d_cls_b = 0.0;
    let mut d_state = Grid::zeros(batch, time, dim);
    for b in 0..batch {
        for t in 0..time {
            let dl = d_logits[b * time + t];
            d_cls_b += dl;
            let x = final_state.slice(b, t);
            let dx = d_state.slice_mut(b, t);
            for i in 0..dim {
                d_cls_w[i] += dl * x[i];
                dx[i] = dl * pipeline.heads.classifier_weight[i];
            }
        }
    }

    // Refinement, backwards through the stored iterates:
    // x^{r+1} = x^r - lambda (x^r W^T + bias).
    let lambda = cfg.refine_lambda;
    let est_w = pipeline.estimator.weight();
    let mut d_est_w = vec![0.0; dim * dim];
    let mut d_est_b = vec![0.0; dim];
    for r in (0..cfg.refine_steps).rev() {
        let x_r = &out.refine_states[r];
        let mut d_prev = d_state.clone();
        for b in 0..batch {
            for t in 0..time {
                let da: Vec<f64> = d_state.slice(b, t).to_vec();
                let x = x_r.slice(b, t);
                let dp = d_prev.slice_mut(b, t);
                for i in 0..dim {
                    let d_residual = -lambda * da[i];
                    d_est_b[i] += d_residual;
                    for j in 0..dim {
                        d_est_w[i * dim + j] += d_residual * x[j];
                        dp[j] += d_residual * est_w[i * dim + j];
                    }
                }
            }
        }
        d_state = d_prev;
    }
    let d_fused = d_state;

    // Fusion and KL back to the per-modality estimates.
    let mut d_means: Vec<Grid> = (0..modalities)
        .map(|_| Grid::zeros(batch, time, dim))
        .collect();
    let mut d_log_vars: Vec<Grid> = (0..modalities)
        .map(|_| Grid::zeros(batch, time, dim))
        .collect();
    for k in 0..value_count {
        let total_w: f64 = out
            .step_fused
            .weights_per_modality
            .iter()
            .map(|plane| plane.values()[k])
            .sum();
        let fused = out.step_fused.fused_mean.values()[k];
        let df = d_fused.values()[k];
        for m in 0..modalities {
            let w = out.step_fused.weights_per_modality[m].values()[k];
            let mu = out.estimates[m].mean.values()[k];
            let lv = out.estimates[m].log_variance.values()[k];
            let eff = model.effective_log_variance(lv).exp();
            // Through the precision-weighted average.
            d_means[m].values_mut()[k] += df * w / total_w;
            let dw = df * (mu - fused) / total_w;
            // w = 1 / (eff + eps) and d eff / d log_var = eff.
            let d_eff = -dw * w * w;
            d_log_vars[m].values_mut()[k] += d_eff * eff;
            // KL term: mean over values of 0.5 (eff + mu^2 - 1 - log eff).
            d_means[m].values_mut()[k] += mu / value_count as f64;
            d_log_vars[m].values_mut()[k] += 0.5 * (eff - 1.0) / value_count as f64;
        }
    }
    if modalities == 2 && (cfg.reg_lambda1 != 0.0 || cfg.reg_lambda2 != 0.0) {
        let (first, rest) = d_means.split_at_mut(1);
        accumulate_reg_gradient(
            &out.estimates[0].mean,
            &out.estimates[1].mean,
            cfg.reg_lambda1,
            cfg.reg_lambda2,
            &mut first[0],
            &mut rest[0],
        );
    }

    // Shared heads accumulate over every modality.
    let mut grads = PipelineGradients {
        heads: HeadGradients {
            g_weight: vec![0.0; dim * dim],
            g_bias: vec![0.0; dim],
            h_weight: vec![0.0; dim * dim],
            h_bias: vec![0.0; dim],
            classifier_weight: d_cls_w,
            classifier_bias: d_cls_b,
        },
        estimator: EstimatorGradients {
            weight: d_est_w,
            bias: d_est_b,
        },
    };
    for m in 0..modalities {
        let z = &out.head_inputs[m];
        for b in 0..batch {
            for t in 0..time {
                let x = z.slice(b, t);
                let dmu = d_means[m].slice(b, t);
                let dlv = d_log_vars[m].slice(b, t);
                for i in 0..dim {
                    grads.heads.g_bias[i] += dmu[i];
                    grads.heads.h_bias[i] += dlv[i];
                    for j in 0..dim {
                        grads.heads.g_weight[i * dim + j] += dmu[i] * x[j];
                        grads.heads.h_weight[i * dim + j] += dlv[i] * x[j];
                    }
                }
            }
        }
    }
    Ok((losses, grads))
}

/// Gradient of the averaged direction+norm regularizer; zero-vector slices
/// contribute nothing, matching `reg_loss`.
fn accumulate_reg_gradient(
    mu_x: &Grid,
    mu_e: &Grid,
    lambda1: f64,
    lambda2: f64,
    d_x: &mut Grid,
    d_e: &mut Grid,
) {
    let (batch, time, dim) = mu_x.shape();
    let mut valid = 0usize;
    for b in 0..batch {
        for t in 0..time {
            if norm(mu_x.slice(b, t)) != 0.0 && norm(mu_e.slice(b, t)) != 0.0 {
                valid += 1;
            }
        }
    }
    if valid == 0 {
        return;
    }
    let scale = 1.0 / valid as f64;
    for b in 0..batch {
        for t in 0..time {
            let u = mu_x.slice(b, t);
            let v = mu_e.slice(b, t);
            let nu = norm(u);
            let nv = norm(v);
            if nu == 0.0 || nv == 0.0 {
                continue;
            }
            let d = dot(u, v);
            let cos = d / (nu * nv);
            let sign = if nu > nv {
                1.0
            } else if nu < nv {
                -1.0
            } else {
                0.0
            };
            {
                let du = d_x.slice_mut(b, t);
                for i in 0..dim {
                    let dcos = v[i] / (nu * nv) - cos * u[i] / (nu * nu);
                    du[i] += scale * (-lambda1 * dcos + lambda2 * sign * u[i] / nu);
                }
            }
            let dv = d_e.slice_mut(b, t);
            for i in 0..dim {
                let dcos = u[i] / (nu * nv) - cos * v[i] / (nv * nv);
                dv[i] += scale * (-lambda1 * dcos - lambda2 * sign * v[i] / nv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{FusionConfig, Modality};
    use crate::refine::AffineEstimator;
    use rand::{Rng, SeedableRng};

    fn seq(data: Vec<f64>, b: usize, t: usize, d: usize) -> EmbeddingSequence {
        EmbeddingSequence::new(Grid::from_vec(data, b, t, d).unwrap(), Modality::Other).unwrap()
    }

    #[test]
    fn zero_heads_give_zero_mean_unit_variance() {
        let heads = LinearHeads::zeros(3);
        let est = predict_heads(&seq(vec![1.0, 2.0, 3.0], 1, 1, 3), &heads).unwrap();
        assert_eq!(est.mean.values(), &[0.0; 3]);
        assert_eq!(est.log_variance.values(), &[0.0; 3]);
    }

    #[test]
    fn identity_heads_pass_input_through() {
        let heads = LinearHeads::identity(2);
        let est = predict_heads(&seq(vec![0.5, -1.5], 1, 1, 2), &heads).unwrap();
        assert_eq!(est.mean.values(), &[0.5, -1.5]);
        assert_eq!(est.log_variance.values(), &[0.0, 0.0]);
    }

    #[test]
    fn heads_match_naive_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dim = 5;
        let mut heads = LinearHeads::zeros(dim);
        for v in heads
            .g_weight
            .iter_mut()
            .chain(heads.g_bias.iter_mut())
            .chain(heads.h_weight.iter_mut())
            .chain(heads.h_bias.iter_mut())
        {
            *v = rng.random_range(-1.0..1.0);
        }
        let data: Vec<f64> = (0..2 * 3 * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let input = seq(data.clone(), 2, 3, dim);
        let est = predict_heads(&input, &heads).unwrap();
        for b in 0..2 {
            for t in 0..3 {
                for i in 0..dim {
                    let mut m = heads.g_bias[i];
                    let mut l = heads.h_bias[i];
                    for j in 0..dim {
                        let x = data[(b * 3 + t) * dim + j];
                        m += heads.g_weight[i * dim + j] * x;
                        l += heads.h_weight[i * dim + j] * x;
                    }
                    assert!((est.mean.at(b, t, i) - m).abs() < 1e-12);
                    assert!((est.log_variance.at(b, t, i) - l).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn segment_count_formula() {
        assert_eq!(segment_count(15, 16), 1);
        assert_eq!(segment_count(16, 16), 2);
        assert_eq!(segment_count(40, 16), 3);
    }

    #[test]
    fn segment_spans_partition_time() {
        assert_eq!(segment_spans(15, 16), vec![(0, 15)]);
        assert_eq!(segment_spans(32, 16), vec![(0, 16), (16, 32)]);
        assert_eq!(segment_spans(40, 16), vec![(0, 16), (16, 32), (32, 40)]);
    }

    #[test]
    fn bce_max_entropy_case() {
        let out = bce_segmented(&[0.0; 32], 1, 32, &[1], 16).unwrap();
        assert!((out.loss - 2.0_f64.ln()).abs() < 1e-12);
        let out = bce_segmented(&[0.0; 32], 1, 32, &[0], 16).unwrap();
        assert!((out.loss - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_confident_correct_predictions_vanish() {
        let out = bce_segmented(&[40.0; 16], 1, 16, &[1], 16).unwrap();
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn bce_hand_example() {
        // Segment probabilities (0.8, 0.6) against label 1.
        let mut logits = vec![(0.8f64 / 0.2).ln(); 16];
        logits.extend(vec![(0.6f64 / 0.4).ln(); 16]);
        let out = bce_segmented(&logits, 1, 32, &[1], 16).unwrap();
        let expected = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.segment_probs[0][0] - 0.8).abs() < 1e-12);
        assert!((out.segment_probs[0][1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn bce_with_unit_segments_is_plain_bce() {
        let logits = [0.3, -1.2, 0.8, 2.0, -0.5, 0.1];
        let labels = [1u8, 0];
        let seg = bce_segmented(&logits, 2, 3, &labels, 1).unwrap();
        let frame_labels = [1u8, 1, 1, 0, 0, 0];
        let plain = bce_framewise(&logits, &frame_labels).unwrap();
        assert!((seg.loss - plain).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_empty_input() {
        assert!(matches!(
            bce_segmented(&[], 0, 0, &[], 16),
            Err(Error::EmptyInput { .. })
        ));
    }

    fn estimate_of(mean: Vec<f64>, log_var: Vec<f64>, d: usize) -> UncertainEstimate {
        let n = mean.len() / d;
        UncertainEstimate::new(
            Grid::from_vec(mean, 1, n, d).unwrap(),
            Grid::from_vec(log_var, 1, n, d).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kl_closed_form_cases() {
        let g = NoiseModel::Gaussian;
        let zero = estimate_of(vec![0.0], vec![0.0], 1);
        assert_eq!(kl_to_standard_normal(&zero, &g).unwrap(), 0.0);

        let shifted = estimate_of(vec![1.0], vec![0.0], 1);
        assert!((kl_to_standard_normal(&shifted, &g).unwrap() - 0.5).abs() < 1e-15);

        let wide = estimate_of(vec![0.0], vec![1.0], 1); // var = e
        let expected = (std::f64::consts::E - 2.0) / 2.0;
        assert!((kl_to_standard_normal(&wide, &g).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_uses_effective_variance() {
        let t8 = NoiseModel::student_t(8.0).unwrap();
        let est = estimate_of(vec![0.0], vec![0.0], 1);
        let eff: f64 = 8.0 / 9.0;
        let expected = 0.5 * (eff - 1.0 - eff.ln());
        assert!((kl_to_standard_normal(&est, &t8).unwrap() - expected).abs() < 1e-14);
        assert!(expected > 0.0);
    }

    /// Adaptive Simpson quadrature of the KL integrand between N(mu, var)
    /// and N(0, 1); independent of the closed form.
    fn kl_quadrature(mu: f64, var: f64) -> f64 {
        fn log_normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
            -0.5 * ((x - mu) * (x - mu) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
        }
        let f = move |x: f64| {
            let lp = log_normal_pdf(x, mu, var);
            lp.exp() * (lp - log_normal_pdf(x, 0.0, 1.0))
        };
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn adaptive(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                adaptive(f, a, m, left, tol / 2.0, depth - 1)
                    + adaptive(f, m, b, right, tol / 2.0, depth - 1)
            }
        }
        let sd = var.sqrt();
        let (a, b) = (mu - 14.0 * sd - 1.0, mu + 14.0 * sd + 1.0);
        adaptive(&f, a, b, simpson(&f, a, b), 1e-10, 40)
    }

    #[test]
    fn kl_matches_quadrature_on_grid() {
        let g = NoiseModel::Gaussian;
        for mu_step in 0..5 {
            for var_step in 0..5 {
                let mu = -3.0 + 1.5 * mu_step as f64;
                let var = 0.1 + 2.4 * var_step as f64;
                let est = estimate_of(vec![mu], vec![var.ln()], 1);
                let closed = kl_to_standard_normal(&est, &g).unwrap();
                let numeric = kl_quadrature(mu, var);
                assert!(
                    (closed - numeric).abs() < 1e-6,
                    "mu {mu} var {var}: {closed} vs {numeric}"
                );
                assert!(closed >= 0.0);
            }
        }
    }

    fn grid_of(values: Vec<f64>, t: usize, d: usize) -> Grid {
        Grid::from_vec(values, 1, t, d).unwrap()
    }

    #[test]
    fn reg_loss_cases() {
        let a = grid_of(vec![1.0, 2.0], 1, 2);
        let out = reg_loss(&a, &a, 0.5, 0.5).unwrap();
        assert!(out.loss.abs() < 1e-15);

        let u = grid_of(vec![1.0, 0.0], 1, 2);
        let v = grid_of(vec![0.0, 1.0], 1, 2);
        let out = reg_loss(&u, &v, 0.5, 0.5).unwrap();
        assert!((out.loss - 0.5).abs() < 1e-15);

        let u = grid_of(vec![2.0, 0.0], 1, 2);
        let v = grid_of(vec![1.0, 0.0], 1, 2);
        let out = reg_loss(&u, &v, 0.5, 0.5).unwrap();
        assert!((out.loss - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reg_loss_skips_zero_slices() {
        let u = grid_of(vec![0.0, 0.0, 1.0, 0.0], 2, 2);
        let v = grid_of(vec![1.0, 0.0, 1.0, 0.0], 2, 2);
        let out = reg_loss(&u, &v, 1.0, 1.0).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.loss, 0.0);

        let zero4 = grid_of(vec![0.0; 4], 2, 2);
        assert!(matches!(
            reg_loss(&zero4, &zero4, 1.0, 1.0),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn reg_loss_symmetric_and_rotation_invariant() {
        let u = grid_of(vec![1.0, 2.0], 1, 2);
        let v = grid_of(vec![-0.5, 1.5], 1, 2);
        let a = reg_loss(&u, &v, 0.7, 0.3).unwrap().loss;
        let b = reg_loss(&v, &u, 0.7, 0.3).unwrap().loss;
        assert!((a - b).abs() < 1e-15);

        let theta: f64 = 0.77;
        let rot = |g: &Grid| {
            let s = g.values();
            grid_of(
                vec![
                    theta.cos() * s[0] - theta.sin() * s[1],
                    theta.sin() * s[0] + theta.cos() * s[1],
                ],
                1,
                2,
            )
        };
        let c = reg_loss(&rot(&u), &rot(&v), 0.7, 0.3).unwrap().loss;
        assert!((a - c).abs() < 1e-10);
    }

    #[test]
    fn total_loss_sums_parts() {
        let parts = LossParts {
            classification: 0.5,
            kl: vec![0.1, 0.2],
            regularization: 0.3,
        };
        assert!((total_loss(&parts).unwrap() - 1.1).abs() < 1e-15);
        let zero = LossParts {
            classification: 0.0,
            kl: vec![0.0, 0.0],
            regularization: 0.0,
        };
        assert_eq!(total_loss(&zero).unwrap(), 0.0);
        let bad = LossParts {
            classification: f64::NAN,
            kl: vec![],
            regularization: 0.0,
        };
        assert!(total_loss(&bad).is_err());
    }

    fn random_pipeline(dim: usize, rng: &mut impl Rng) -> Pipeline {
        let mut heads = LinearHeads::identity(dim);
        for v in heads
            .g_weight
            .iter_mut()
            .chain(heads.g_bias.iter_mut())
            .chain(heads.h_weight.iter_mut())
            .chain(heads.h_bias.iter_mut())
            .chain(heads.classifier_weight.iter_mut())
        {
            *v += rng.random_range(-0.4..0.4);
        }
        heads.classifier_bias = rng.random_range(-0.3..0.3);
        let mut est = AffineEstimator::zero(dim);
        for v in est.weight_mut().iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        for v in est.bias_mut().iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        Pipeline {
            heads,
            estimator: est,
            config: FusionConfig {
                refine_steps: 3,
                segment_len: 4,
                ..FusionConfig::default()
            },
            temporal: TemporalMode::PerStep,
            normalize: false,
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let dim = 4;
        let batch = 2;
        let time = 6;
        for _ in 0..3 {
            let pipeline = random_pipeline(dim, &mut rng);
            let data_x: Vec<f64> = (0..batch * time * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let data_e: Vec<f64> = (0..batch * time * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let zx = seq(data_x, batch, time, dim);
            let ze = seq(data_e, batch, time, dim);
            let labels = [1u8, 0];
            let inputs = [&zx, &ze];
            let (_, grads) = loss_gradients(&pipeline, &inputs, &labels).unwrap();
            let analytic = grads.flatten();
            let theta = pipeline.params();
            let h = 1e-5;
            for (p, &g) in analytic.iter().enumerate() {
                let mut plus = pipeline.clone();
                let mut minus = pipeline.clone();
                let mut tp = theta.clone();
                tp[p] += h;
                plus.set_params(&tp).unwrap();
                tp[p] -= 2.0 * h;
                minus.set_params(&tp).unwrap();
                let lp = pipeline_loss(&plus, &inputs, &labels).unwrap().total;
                let lm = pipeline_loss(&minus, &inputs, &labels).unwrap().total;
                let fd = (lp - lm) / (2.0 * h);
                let ok = if g.abs() < 1e-3 {
                    (fd - g).abs() < 1e-7 + 1e-4 * g.abs()
                } else {
                    (fd - g).abs() / g.abs() < 1e-4
                };
                assert!(ok, "param {p}: analytic {g} vs fd {fd}");
            }
        }
    }

    #[test]
    fn classifier_bias_gradient_on_zero_fixture() {
        // All-zero inputs and zero weights everywhere except the classifier
        // bias: the bias gradient is the mean of sigmoid(bias) - label over
        // segments.
        let dim = 3;
        let mut heads = LinearHeads::zeros(dim);
        heads.classifier_bias = 0.4;
        let pipeline = Pipeline {
            heads,
            estimator: AffineEstimator::zero(dim),
            config: FusionConfig {
                refine_steps: 2,
                segment_len: 4,
                reg_lambda1: 0.0,
                reg_lambda2: 0.0,
                ..FusionConfig::default()
            },
            temporal: TemporalMode::PerStep,
            normalize: false,
        };
        let zx = seq(vec![0.0; 2 * 8 * dim], 2, 8, dim);
        let ze = seq(vec![0.0; 2 * 8 * dim], 2, 8, dim);
        let labels = [1u8, 0];
        let (_, grads) = loss_gradients(&pipeline, &[&zx, &ze], &labels).unwrap();
        let p = sigmoid(0.4);
        let expected = ((p - 1.0) + (p - 0.0)) / 2.0;
        assert!((grads.heads.classifier_bias - expected).abs() < 1e-12);
        // Zero inputs leave the mean-head weight gradient untouched.
        assert!(grads.heads.g_weight.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn aligned_means_have_zero_reg_loss() {
        let dim = 2;
        let pipeline = Pipeline {
            heads: LinearHeads::identity(dim),
            estimator: AffineEstimator::zero(dim),
            config: FusionConfig {
                refine_steps: 0,
                segment_len: 2,
                ..FusionConfig::default()
            },
            temporal: TemporalMode::PerStep,
            normalize: false,
        };
        let z = seq(vec![0.5, 1.0, -0.25, 0.75], 1, 2, dim);
        let labels = [1u8];
        let (losses, _) = loss_gradients(&pipeline, &[&z, &z], &labels).unwrap();
        assert!(losses.regularization.abs() < 1e-15);
    }

    #[test]
    fn heads_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heads.json");
        let mut heads = LinearHeads::identity(3);
        heads.classifier_bias = -0.75;
        heads.h_bias[1] = 0.25;
        heads.write_json(&path).unwrap();
        let back = LinearHeads::read_json(&path).unwrap();
        assert_eq!(back, heads);
    }

    #[test]
    fn flatten_round_trip() {
        let mut heads = LinearHeads::identity(3);
        heads.g_bias[2] = 0.5;
        heads.classifier_weight[0] = -1.0;
        let flat = heads.flatten();
        assert_eq!(flat.len(), param_count(3));
        let back = LinearHeads::unflatten(3, &flat).unwrap();
        assert_eq!(back, heads);
    }
}
