//! Static precision-weighted fusion of two modality estimates, with the
//! scalar Kalman update as a cross-check.
//!
//! Run with: cargo run -p uwfuse --example fuse_basic

use uwfuse::core::{FusionConfig, Grid, NoiseKind, UncertainEstimate};
use uwfuse::fusion::{fuse_static, inverse_variance_weights, kalman_fuse_pair};

fn estimate(mean: f64, log_var: f64) -> UncertainEstimate {
    UncertainEstimate::new(
        Grid::from_vec(vec![mean], 1, 1, 1).unwrap(),
        Grid::from_vec(vec![log_var], 1, 1, 1).unwrap(),
    )
    .unwrap()
}

fn main() {
    let cfg = FusionConfig {
        noise_model: NoiseKind::Gaussian,
        ..FusionConfig::default()
    };

    // A confident image estimate and a noisier event estimate.
    let image = estimate(2.0, 0.0); // variance 1
    let event = estimate(0.0, 3.0f64.ln()); // variance 3

    let weights = inverse_variance_weights(&image, &cfg).unwrap();
    println!("image weight (1 / (var + eps)): {:.6}", weights.planes[0].values()[0]);

    let fused = fuse_static(&[image, event], &cfg).unwrap();
    println!(
        "fused mean {:.6}, fused variance {:.6}",
        fused.fused_mean.values()[0],
        fused.fused_variance.values()[0]
    );
    let normalized = fused.normalized_weights();
    println!(
        "normalized weights: image {:.4}, event {:.4}",
        normalized[0].values()[0],
        normalized[1].values()[0]
    );

    // The same update written as a Kalman gain, with either input as the
    // prior, lands on the same posterior.
    let (mean_a, var_a) = kalman_fuse_pair(2.0, 1.0, 0.0, 3.0).unwrap();
    let (mean_b, var_b) = kalman_fuse_pair(0.0, 3.0, 2.0, 1.0).unwrap();
    println!("kalman (image prior): mean {mean_a:.6}, variance {var_a:.6}");
    println!("kalman (event prior): mean {mean_b:.6}, variance {var_b:.6}");
}
