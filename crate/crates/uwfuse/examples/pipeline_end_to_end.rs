//! The full composed pipeline as the CLI's `fuse` subcommand runs it:
//! heads -> per-step fusion -> sequential smoothing -> refinement ->
//! classifier -> per-segment scores, plus the EMB1/CSV round trip.
//!
//! Run with: cargo run -p uwfuse --example pipeline_end_to_end

use uwfuse::core::{read_emb1, write_emb1, FusionConfig};
use uwfuse::fixture::{complementary_fixture, ComplementarySpec};
use uwfuse::losses::LinearHeads;
use uwfuse::metrics::{read_scores_csv, roc_auc, write_scores_csv, ScoreRow};
use uwfuse::pipeline::{Pipeline, TemporalMode};
use uwfuse::refine::AffineEstimator;

fn main() {
    let spec = ComplementarySpec {
        seed: 11,
        ..ComplementarySpec::default()
    };
    let data = complementary_fixture(&spec).unwrap();

    // Identity heads with a uniform-average classifier, the same default
    // the CLI uses when no trained heads are supplied.
    let dim = spec.dim;
    let mut heads = LinearHeads::identity(dim);
    for w in heads.classifier_weight.iter_mut() {
        *w = 1.0 / dim as f64;
    }
    let pipeline = Pipeline::new(heads, AffineEstimator::zero(dim), FusionConfig::default())
        .unwrap()
        .with_temporal(TemporalMode::Smoothed);

    let out = pipeline.run(&[&data.image, &data.event]).unwrap();
    println!(
        "ran {} videos x {} steps x {} dims; {} refinement iterations",
        out.refined.shape().0,
        out.refined.shape().1,
        out.refined.shape().2,
        out.residual_norms.len()
    );
    let smoothed = out.smoothed.as_ref().unwrap();
    println!(
        "sequential smoothing shrank the last-step variance from {:.5} to {:.5}",
        out.step_fused.fused_variance.at(0, 31, 0),
        smoothed.fused_variance.at(0, 31, 0)
    );

    // Scores to CSV and back, as the CLI writes them.
    let dir = std::env::temp_dir().join("uwfuse_pipeline_example");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rows = Vec::new();
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (b, segs) in out.segment_probs.iter().enumerate() {
        for (s, &p) in segs.iter().enumerate() {
            rows.push(ScoreRow {
                video_id: data.video_ids[b].clone(),
                segment_index: s,
                score: p,
                label: data.labels[b],
                video_is_anomalous: data.labels[b] == 1,
            });
            probs.push(p);
            labels.push(data.labels[b]);
        }
    }
    let csv = dir.join("scores.csv");
    write_scores_csv(&csv, &rows).unwrap();
    let back = read_scores_csv(&csv).unwrap();
    println!("wrote and re-read {} score rows from {}", back.len(), csv.display());
    println!(
        "untrained uniform classifier AUC: {:.4}",
        roc_auc(&probs, &labels).unwrap()
    );

    // Trajectories round-trip through the EMB1 container.
    let emb = dir.join("trajectory.emb1");
    write_emb1(&emb, &out.refined.fused_mean).unwrap();
    let grid = read_emb1(&emb).unwrap();
    println!("trajectory EMB1 round trip: shape {:?}", grid.shape());
}
