//! Value-level masking harness: zero a deterministic fraction of one
//! modality's latent dimensions, re-run the fusion pipeline, and report how
//! the normalized uncertainty weights and the prediction quality shift.
//!
//! Mask index sets are prefixes of one seeded permutation per (seed,
//! target), so sweeps over increasing masking ratios nest and every cell is
//! reproducible from (seed, rho, target) alone.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{EmbeddingSequence, Modality};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, brier, prediction_kl, roc_auc};
use crate::pipeline::{Pipeline, PipelineOutput};

/// The masking ratios used by the default sweep.
pub const DEFAULT_RHO_LEVELS: [f64; 5] = [0.05, 0.10, 0.20, 0.30, 0.50];

/// Deterministic mask: `floor(rho * dim)` unique dimension indices shared
/// by every (b, t) slice of the targeted modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub target: Modality,
    pub rho: f64,
    pub seed: u64,
    indices: Vec<usize>,
}

impl MaskSpec {
    /// Draws the index set as the first `floor(rho * dim)` entries of a
    /// permutation seeded by (seed, target); masks at growing `rho` nest.
    pub fn new(target: Modality, rho: f64, seed: u64, dim: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
            return Err(Error::invalid_config(format!(
                "masking ratio must lie in [0, 1], got {rho}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match target {
            Modality::Image => 1,
            Modality::Event => 2,
            Modality::Other => 3,
        });
        let mut perm: Vec<usize> = (0..dim).collect();
        for k in (1..dim).rev() {
            let j = rng.random_range(0..=k);
            perm.swap(k, j);
        }
        let count = (rho * dim as f64).floor() as usize;
        let mut indices = perm[..count].to_vec();
        indices.sort_unstable();
        Ok(MaskSpec {
            target,
            rho,
            seed,
            indices,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Zeroes the masked dimensions at every (b, t); other values pass through
/// untouched.
pub fn apply_mask(seq: &EmbeddingSequence, spec: &MaskSpec) -> Result<EmbeddingSequence> {
    let (batch, time, dim) = seq.shape();
    let mut values = seq.values.clone();
    for &i in &spec.indices {
        if i >= dim {
            return Err(Error::IndexOutOfRange { index: i, len: dim });
        }
        for b in 0..batch {
            for t in 0..time {
                *values.at_mut(b, t, i) = 0.0;
            }
        }
    }
    Ok(EmbeddingSequence {
        modality: seq.modality,
        values,
    })
}

/// Mean, abnormal-split, and normal-split of a per-value delta.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abnormal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal: Option<f64>,
}

/// Masked-minus-clean normalized fusion weights for one masking cell:
/// per-dimension means over (b, t) plus scalar summaries, one entry per
/// modality in pipeline input order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeltaWeightSurface {
    pub target: Modality,
    pub rho: f64,
    pub seed: u64,
    /// `per_dim[m][i]` = mean over (b, t) of the normalized-weight change
    /// of modality m at dimension i.
    pub per_dim: Vec<Vec<f64>>,
    pub summary: Vec<DeltaSummary>,
}

fn normalized_weight_delta(
    clean: &PipelineOutput,
    masked: &PipelineOutput,
    labels: Option<&[u8]>,
) -> (Vec<Vec<f64>>, Vec<DeltaSummary>) {
    let clean_weights = clean.step_fused.normalized_weights();
    let masked_weights = masked.step_fused.normalized_weights();
    let modalities = clean_weights.len();
    let (batch, time, dim) = clean.step_fused.shape();
    let mut per_dim = vec![vec![0.0; dim]; modalities];
    let mut summary = vec![DeltaSummary::default(); modalities];
    for m in 0..modalities {
        let mut abnormal_sum = 0.0;
        let mut abnormal_count = 0usize;
        let mut normal_sum = 0.0;
        let mut normal_count = 0usize;
        for b in 0..batch {
            let mut video_sum = 0.0;
            for t in 0..time {
                for i in 0..dim {
                    let delta = masked_weights[m].at(b, t, i) - clean_weights[m].at(b, t, i);
                    per_dim[m][i] += delta;
                    video_sum += delta;
                }
            }
            if let Some(labels) = labels {
                if labels[b] == 1 {
                    abnormal_sum += video_sum;
                    abnormal_count += time * dim;
                } else {
                    normal_sum += video_sum;
                    normal_count += time * dim;
                }
            }
        }
        for v in per_dim[m].iter_mut() {
            *v /= (batch * time) as f64;
        }
        summary[m].mean = per_dim[m].iter().sum::<f64>() / dim as f64;
        if labels.is_some() {
            summary[m].abnormal = (abnormal_count > 0).then(|| abnormal_sum / abnormal_count as f64);
            summary[m].normal = (normal_count > 0).then(|| normal_sum / normal_count as f64);
        }
    }
    (per_dim, summary)
}

/// Runs the pipeline on clean and masked inputs and reports the
/// normalized-weight shift; abnormal/normal split means appear when video
/// labels are supplied.
pub fn delta_weights(
    pipeline: &Pipeline,
    image: &EmbeddingSequence,
    event: &EmbeddingSequence,
    labels: Option<&[u8]>,
    spec: &MaskSpec,
) -> Result<DeltaWeightSurface> {
    let clean = pipeline.run(&[image, event])?;
    let masked = run_masked(pipeline, image, event, spec)?;
    let (per_dim, summary) = normalized_weight_delta(&clean, &masked, labels);
    Ok(DeltaWeightSurface {
        target: spec.target,
        rho: spec.rho,
        seed: spec.seed,
        per_dim,
        summary,
    })
}

fn run_masked(
    pipeline: &Pipeline,
    image: &EmbeddingSequence,
    event: &EmbeddingSequence,
    spec: &MaskSpec,
) -> Result<PipelineOutput> {
    match spec.target {
        Modality::Image => {
            let masked = apply_mask(image, spec)?;
            pipeline.run(&[&masked, event])
        }
        Modality::Event => {
            let masked = apply_mask(event, spec)?;
            pipeline.run(&[image, &masked])
        }
        Modality::Other => Err(Error::invalid_config(
            "mask target must be image or event".to_string(),
        )),
    }
}

/// One row of the sweep table; `target` is `None` for the clean row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: Option<Modality>,
    pub rho: f64,
    pub auc: f64,
    pub ap: f64,
    pub brier: f64,
    pub prediction_kl: f64,
    pub delta_w_e: DeltaSummary,
    pub delta_w_x: DeltaSummary,
}

/// Full sweep output: the clean row followed by one row per (target, rho),
/// plus the per-dimension weight surfaces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub seed: u64,
    pub rho_levels: Vec<f64>,
    pub targets: Vec<Modality>,
    pub rows: Vec<SweepRow>,
    pub surfaces: Vec<DeltaWeightSurface>,
}

fn flat_probs_and_labels(out: &PipelineOutput, labels: &[u8]) -> (Vec<f64>, Vec<u8>) {
    let mut probs = Vec::new();
    let mut seg_labels = Vec::new();
    for (b, segs) in out.segment_probs.iter().enumerate() {
        for &p in segs {
            probs.push(p);
            seg_labels.push(labels[b]);
        }
    }
    (probs, seg_labels)
}

/// Sweeps masking ratios over the chosen target modalities. Every cell is
/// evaluated through the same code path; the clean row uses an empty mask,
/// so it reproduces the unmasked run bit-exactly.
pub fn perturbation_sweep(
    pipeline: &Pipeline,
    image: &EmbeddingSequence,
    event: &EmbeddingSequence,
    labels: &[u8],
    rho_levels: &[f64],
    targets: &[Modality],
    seed: u64,
) -> Result<SweepTable> {
    let (batch, _, dim) = image.shape();
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            what: "video labels",
            expected: format!("{batch} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    let clean = pipeline.run(&[image, event])?;
    let (clean_probs, seg_labels) = flat_probs_and_labels(&clean, labels);

    let mut rows = Vec::new();
    let mut surfaces = Vec::new();
    let evaluate = |spec: &MaskSpec| -> Result<(SweepRow, DeltaWeightSurface)> {
        let masked = run_masked(pipeline, image, event, spec)?;
        let (masked_probs, _) = flat_probs_and_labels(&masked, labels);
        let (per_dim, summary) = normalized_weight_delta(&clean, &masked, Some(labels));
        let row = SweepRow {
            target: Some(spec.target),
            rho: spec.rho,
            auc: roc_auc(&masked_probs, &seg_labels)?,
            ap: average_precision(&masked_probs, &seg_labels)?,
            brier: brier(&masked_probs, &seg_labels)?,
            prediction_kl: prediction_kl(&clean_probs, &masked_probs)?,
            delta_w_e: summary[1],
            delta_w_x: summary[0],
        };
        let surface = DeltaWeightSurface {
            target: spec.target,
            rho: spec.rho,
            seed,
            per_dim,
            summary,
        };
        Ok((row, surface))
    };

    // Clean row through the identical path with an empty mask.
    let zero_spec = MaskSpec::new(Modality::Image, 0.0, seed, dim)?;
    let (mut clean_row, _) = evaluate(&zero_spec)?;
    clean_row.target = None;
    rows.push(clean_row);

    for &target in targets {
        for &rho in rho_levels {
            let spec = MaskSpec::new(target, rho, seed, dim)?;
            let (row, surface) = evaluate(&spec)?;
            rows.push(row);
            surfaces.push(surface);
        }
    }
    Ok(SweepTable {
        seed,
        rho_levels: rho_levels.to_vec(),
        targets: targets.to_vec(),
        rows,
        surfaces,
    })
}

impl SweepTable {
    /// CSV layout: a reproducibility comment, a header, then one row per
    /// sweep cell with the clean row first.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut run = || -> std::io::Result<()> {
            let rhos = self
                .rho_levels
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(";");
            let targets = self
                .targets
                .iter()
                .map(|t| t.as_str())
                .collect::<Vec<_>>()
                .join(";");
            writeln!(w, "# seed={} rho_levels={rhos} targets={targets}", self.seed)?;
            writeln!(
                w,
                "noise_type,masked_level,auc,ap,brier,kl,delta_w_e,delta_w_e_ab,delta_w_e_n,delta_w_x,delta_w_x_ab,delta_w_x_n"
            )?;
            for row in &self.rows {
                let noise_type = match row.target {
                    None => "clean".to_string(),
                    Some(m) => format!("mask_{}", m.as_str()),
                };
                let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    noise_type,
                    row.rho,
                    row.auc,
                    row.ap,
                    row.brier,
                    row.prediction_kl,
                    row.delta_w_e.mean,
                    opt(row.delta_w_e.abnormal),
                    opt(row.delta_w_e.normal),
                    row.delta_w_x.mean,
                    opt(row.delta_w_x.abnormal),
                    opt(row.delta_w_x.normal),
                )?;
            }
            w.flush()
        };
        run().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Grid;
    use crate::fixture::{masking_fixture, MASKING_DIM};

    #[test]
    fn mask_spec_size_and_determinism() {
        let spec = MaskSpec::new(Modality::Image, 0.25, 9, 10).unwrap();
        assert_eq!(spec.indices().len(), 2); // floor(2.5)
        let again = MaskSpec::new(Modality::Image, 0.25, 9, 10).unwrap();
        assert_eq!(spec, again);
        let other_seed = MaskSpec::new(Modality::Image, 0.25, 10, 10).unwrap();
        assert_ne!(spec.indices(), other_seed.indices());
        // Indices are unique, sorted, in range.
        let full = MaskSpec::new(Modality::Event, 1.0, 3, 16).unwrap();
        let idx = full.indices();
        assert_eq!(idx.len(), 16);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn masks_nest_across_rho() {
        for &(lo, hi) in &[(0.05, 0.1), (0.1, 0.3), (0.3, 0.5)] {
            let small = MaskSpec::new(Modality::Event, lo, 42, 40).unwrap();
            let large = MaskSpec::new(Modality::Event, hi, 42, 40).unwrap();
            for i in small.indices() {
                assert!(large.indices().contains(i));
            }
        }
    }

    #[test]
    fn zero_and_full_masks() {
        let seq = EmbeddingSequence::new(
            Grid::from_vec(vec![1.0, 2.0, 3.0, 4.0], 1, 2, 2).unwrap(),
            Modality::Image,
        )
        .unwrap();
        let zero = MaskSpec::new(Modality::Image, 0.0, 1, 2).unwrap();
        assert_eq!(apply_mask(&seq, &zero).unwrap(), seq);
        let full = MaskSpec::new(Modality::Image, 1.0, 1, 2).unwrap();
        let masked = apply_mask(&seq, &full).unwrap();
        assert!(masked.values.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_index_rejected() {
        let seq = EmbeddingSequence::new(
            Grid::from_vec(vec![1.0, 2.0], 1, 1, 2).unwrap(),
            Modality::Image,
        )
        .unwrap();
        let spec = MaskSpec::new(Modality::Image, 0.5, 1, 8).unwrap();
        assert!(matches!(
            apply_mask(&seq, &spec),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn delta_weights_signs_on_constructed_fixture() {
        let fixture = masking_fixture(5).unwrap();
        let spec = MaskSpec::new(Modality::Image, 0.3, 11, MASKING_DIM).unwrap();
        let surface = delta_weights(
            &fixture.pipeline,
            &fixture.data.image,
            &fixture.data.event,
            Some(&fixture.data.labels),
            &spec,
        )
        .unwrap();
        // Masking the image stream lowers its normalized weight.
        assert!(surface.summary[0].mean < 0.0);
        assert!(surface.summary[1].mean > 0.0);
        // Per-dimension deltas are negative exactly on the masked dims.
        for (i, &d) in surface.per_dim[0].iter().enumerate() {
            if spec.indices().contains(&i) {
                assert!(d < 0.0, "dim {i} should have lost weight");
            } else {
                assert!(d.abs() < 1e-12, "dim {i} should be untouched");
            }
        }

        let spec_e = MaskSpec::new(Modality::Event, 0.3, 11, MASKING_DIM).unwrap();
        let surface_e = delta_weights(
            &fixture.pipeline,
            &fixture.data.image,
            &fixture.data.event,
            Some(&fixture.data.labels),
            &spec_e,
        )
        .unwrap();
        assert!(surface_e.summary[0].mean > 0.0);
        assert!(surface_e.summary[1].mean < 0.0);
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        let fixture = masking_fixture(2).unwrap();
        let out = fixture
            .pipeline
            .run(&[&fixture.data.image, &fixture.data.event])
            .unwrap();
        let normalized = out.step_fused.normalized_weights();
        for k in 0..normalized[0].len() {
            let total: f64 = normalized.iter().map(|g| g.values()[k]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_clean_row_matches_unmasked_run_bit_exactly() {
        let fixture = masking_fixture(3).unwrap();
        let table = perturbation_sweep(
            &fixture.pipeline,
            &fixture.data.image,
            &fixture.data.event,
            &fixture.data.labels,
            &[0.1, 0.5],
            &[Modality::Event, Modality::Image],
            77,
        )
        .unwrap();
        let clean = &table.rows[0];
        assert!(clean.target.is_none());
        assert_eq!(clean.prediction_kl, 0.0);
        assert_eq!(clean.delta_w_x.mean, 0.0);
        assert_eq!(clean.delta_w_e.mean, 0.0);

        let out = fixture
            .pipeline
            .run(&[&fixture.data.image, &fixture.data.event])
            .unwrap();
        let (probs, seg_labels) = flat_probs_and_labels(&out, &fixture.data.labels);
        assert_eq!(clean.auc, roc_auc(&probs, &seg_labels).unwrap());
        assert_eq!(clean.brier, brier(&probs, &seg_labels).unwrap());
        assert_eq!(table.rows.len(), 1 + 2 * 2);
    }

    #[test]
    fn sweep_kl_non_decreasing_and_signs_hold() {
        let fixture = masking_fixture(3).unwrap();
        let table = perturbation_sweep(
            &fixture.pipeline,
            &fixture.data.image,
            &fixture.data.event,
            &fixture.data.labels,
            &DEFAULT_RHO_LEVELS,
            &[Modality::Event, Modality::Image],
            77,
        )
        .unwrap();
        for target in [Modality::Event, Modality::Image] {
            let mut last_kl = 0.0;
            for row in table.rows.iter().filter(|r| r.target == Some(target)) {
                assert!(row.prediction_kl >= last_kl - 1e-15, "rho {}", row.rho);
                last_kl = row.prediction_kl;
                if target == Modality::Image {
                    assert!(row.delta_w_x.mean < 0.0);
                    assert!(row.delta_w_e.mean > 0.0);
                } else {
                    assert!(row.delta_w_x.mean > 0.0);
                    assert!(row.delta_w_e.mean < 0.0);
                }
            }
        }
    }

    #[test]
    fn masking_signal_modality_hurts_auc_more() {
        let fixture = masking_fixture(3).unwrap();
        let table = perturbation_sweep(
            &fixture.pipeline,
            &fixture.data.image,
            &fixture.data.event,
            &fixture.data.labels,
            &[0.5],
            &[Modality::Event, Modality::Image],
            77,
        )
        .unwrap();
        let clean_auc = table.rows[0].auc;
        let event_auc = table.rows[1].auc;
        let image_auc = table.rows[2].auc;
        assert!(
            clean_auc - image_auc > clean_auc - event_auc,
            "image drop {} vs event drop {}",
            clean_auc - image_auc,
            clean_auc - event_auc
        );
    }

    #[test]
    fn sweep_csv_layout() {
        let fixture = masking_fixture(4).unwrap();
        let table = perturbation_sweep(
            &fixture.pipeline,
            &fixture.data.image,
            &fixture.data.event,
            &fixture.data.labels,
            &[0.2],
            &[Modality::Event, Modality::Image],
            5,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("sweep.csv");
        table.write_csv(&csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# seed=5"));
        assert_eq!(
            lines.next().unwrap(),
            "noise_type,masked_level,auc,ap,brier,kl,delta_w_e,delta_w_e_ab,delta_w_e_n,delta_w_x,delta_w_x_ab,delta_w_x_n"
        );
        assert!(lines.next().unwrap().starts_with("clean,0,"));
        assert!(lines.next().unwrap().starts_with("mask_event,0.2,"));
        assert!(lines.next().unwrap().starts_with("mask_image,0.2,"));
    }
}
