//! Ranking and calibration metrics on a toy score series: ROC-AUC,
//! anomaly-subset AUC, average precision, Brier score, and the Bernoulli
//! KL between clean and perturbed predictions.
//!
//! Run with: cargo run -p uwfuse --example eval_metrics

use uwfuse::metrics::{
    ano_auc, average_precision, brier, prediction_kl, roc_auc, EvalReport,
};

fn main() {
    // Segment scores from three videos: two anomalous, one normal. The
    // anomalous videos contain normal segments too, so the anomaly-subset
    // AUC is informative.
    let scores = [0.9, 0.8, 0.3, 0.7, 0.2, 0.4, 0.1, 0.2, 0.3];
    let labels = [1, 1, 0, 1, 0, 0, 0, 0, 0];
    let from_anomalous_video = [true, true, true, true, true, true, false, false, false];

    println!("roc_auc            = {:.4}", roc_auc(&scores, &labels).unwrap());
    println!(
        "ano_auc (subset)   = {:.4}",
        ano_auc(&scores, &labels, &from_anomalous_video).unwrap()
    );
    println!(
        "average_precision  = {:.4}",
        average_precision(&scores, &labels).unwrap()
    );
    println!("brier              = {:.4}", brier(&scores, &labels).unwrap());

    let nudged: Vec<f64> = scores.iter().map(|s| (s - 0.15).clamp(0.0, 1.0)).collect();
    println!(
        "prediction_kl      = {:.4} (clean vs nudged scores)",
        prediction_kl(&scores, &nudged).unwrap()
    );

    let report =
        EvalReport::compute(&scores, &labels, &from_anomalous_video, Some(&nudged)).unwrap();
    println!("\nfull report:\n{}", serde_json::to_string_pretty(&report).unwrap());
}
