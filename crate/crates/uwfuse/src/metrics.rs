//! Ranking and calibration metrics: ROC-AUC via average ranks
//! (Mann-Whitney), anomaly-subset AUC, average precision with stable-order
//! tie handling, Brier score, and the Bernoulli KL between clean and
//! perturbed predictions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clip applied to probabilities before the Bernoulli KL.
pub const KL_CLIP: f64 = 1e-7;

/// ROC-AUC as the Mann-Whitney statistic: the probability that a random
/// positive outscores a random negative, counting ties as one half.
/// Computed through average ranks, so tied scores are exact.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels { what: "roc_auc" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut at = 0;
    while at < order.len() {
        let mut end = at + 1;
        while end < order.len() && scores[order[end]] == scores[order[at]] {
            end += 1;
        }
        let avg_rank = (at + 1 + end) as f64 / 2.0;
        for &idx in &order[at..end] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        at = end;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC restricted to items belonging to anomalous videos.
pub fn ano_auc(scores: &[f64], labels: &[u8], video_is_anomalous: &[bool]) -> Result<f64> {
    if scores.len() != video_is_anomalous.len() {
        return Err(Error::ShapeMismatch {
            what: "anomalous flags",
            expected: format!("{} flags", scores.len()),
            actual: format!("{}", video_is_anomalous.len()),
        });
    }
    let mut sub_scores = Vec::new();
    let mut sub_labels = Vec::new();
    for ((s, l), &flag) in scores.iter().zip(labels).zip(video_is_anomalous) {
        if flag {
            sub_scores.push(*s);
            sub_labels.push(*l);
        }
    }
    if sub_scores.is_empty() {
        return Err(Error::DegenerateLabels { what: "ano_auc" });
    }
    roc_auc(&sub_scores, &sub_labels)
}

/// Average precision: positives are walked in score-descending order (ties
/// broken by stable input order) and their precisions at rank are averaged
/// over the number of positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::DegenerateLabels {
            what: "average_precision",
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut seen_pos = 0usize;
    let mut total = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            seen_pos += 1;
            total += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Mean squared difference between probabilities and binary outcomes.
pub fn brier(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(probs, labels)?;
    if probs.is_empty() {
        return Err(Error::EmptyInput { what: "brier" });
    }
    for (index, p) in probs.iter().enumerate() {
        if !(0.0..=1.0).contains(p) {
            return Err(Error::NonFiniteValue {
                what: "brier probabilities",
                index,
            });
        }
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - f64::from(y)).powi(2))
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Mean Bernoulli KL between clean and perturbed prediction probabilities,
/// after clipping both into [KL_CLIP, 1 - KL_CLIP]. Zero exactly when the
/// clipped inputs coincide.
pub fn prediction_kl(clean: &[f64], perturbed: &[f64]) -> Result<f64> {
    if clean.len() != perturbed.len() {
        return Err(Error::ShapeMismatch {
            what: "prediction distributions",
            expected: format!("{} probabilities", clean.len()),
            actual: format!("{}", perturbed.len()),
        });
    }
    if clean.is_empty() {
        return Err(Error::EmptyInput {
            what: "prediction_kl",
        });
    }
    let clip = |v: f64| v.clamp(KL_CLIP, 1.0 - KL_CLIP);
    let mut total = 0.0;
    for (&pc, &pq) in clean.iter().zip(perturbed) {
        let p = clip(pc);
        let q = clip(pq);
        if p != q {
            total += p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
        }
    }
    Ok(total / clean.len() as f64)
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "scores and labels",
            expected: format!("{} labels", scores.len()),
            actual: format!("{}", labels.len()),
        });
    }
    for (index, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteValue {
                what: "scores",
                index,
            });
        }
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::format("labels must be 0 or 1"));
    }
    Ok(())
}

/// Metric summary emitted as JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ano_auc: Option<f64>,
    pub ap: f64,
    pub brier: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_kl: Option<f64>,
}

impl EvalReport {
    /// Computes AUC, AP, and Brier from probabilities and labels; the
    /// anomaly-subset AUC is included when the anomalous subset holds both
    /// classes, and the prediction shift when a clean run is supplied.
    pub fn compute(
        probs: &[f64],
        labels: &[u8],
        video_is_anomalous: &[bool],
        clean_probs: Option<&[f64]>,
    ) -> Result<Self> {
        let auc = roc_auc(probs, labels)?;
        let ap = average_precision(probs, labels)?;
        let brier_score = brier(probs, labels)?;
        let ano = ano_auc(probs, labels, video_is_anomalous).ok();
        let pred_kl = match clean_probs {
            Some(clean) => Some(prediction_kl(clean, probs)?),
            None => None,
        };
        Ok(EvalReport {
            auc,
            ano_auc: ano,
            ap,
            brier: brier_score,
            pred_kl,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// One row of the score CSV:
/// `video_id,segment_index,score,label,video_is_anomalous`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub video_id: String,
    pub segment_index: usize,
    pub score: f64,
    pub label: u8,
    pub video_is_anomalous: bool,
}

pub const SCORE_CSV_HEADER: &str = "video_id,segment_index,score,label,video_is_anomalous";

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        writeln!(w, "{SCORE_CSV_HEADER}")?;
        for row in rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                row.video_id,
                row.segment_index,
                row.score,
                row.label,
                u8::from(row.video_is_anomalous)
            )?;
        }
        w.flush()
    };
    run().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if lineno == 0 || trimmed.starts_with("video_id") {
            // header
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(format!(
                "{} line {}: expected 5 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            Error::format(format!("{} line {}: bad {what}", path.display(), lineno + 1))
        };
        rows.push(ScoreRow {
            video_id: fields[0].to_string(),
            segment_index: fields[1].parse().map_err(|_| parse_err("segment_index"))?,
            score: fields[2].parse().map_err(|_| parse_err("score"))?,
            label: fields[3].parse().map_err(|_| parse_err("label"))?,
            video_is_anomalous: matches!(fields[4], "1" | "true"),
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput { what: "score CSV" });
    }
    Ok(rows)
}
