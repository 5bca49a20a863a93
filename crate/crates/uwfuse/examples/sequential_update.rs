//! Kalman-style sequential updates over a time series of uncertain
//! observations: the state mean tracks the precision-weighted history and
//! its variance shrinks monotonically; the final state equals the one-shot
//! precision-weighted average of all observations.
//!
//! Run with: cargo run -p uwfuse --example sequential_update

use uwfuse::core::{FusionConfig, Grid, UncertainEstimate};
use uwfuse::temporal::sequential_update;

fn main() {
    let cfg = FusionConfig::default(); // student-t nu = 8, eps = 1e-8
    let model = cfg.noise_model().unwrap();

    // Seven observations of the same quantity with varying confidence.
    let means = vec![1.0, 1.4, 0.6, 1.2, 5.0, 1.1, 0.9];
    let log_vars = vec![0.0, -1.0, -0.5, 0.0, 3.0, -1.5, -1.0]; // step 5 is noisy
    let obs = UncertainEstimate::new(
        Grid::from_vec(means.clone(), 1, 7, 1).unwrap(),
        Grid::from_vec(log_vars.clone(), 1, 7, 1).unwrap(),
    )
    .unwrap();

    let trajectory = sequential_update(&obs, &cfg).unwrap();
    println!("{:>4} {:>8} {:>10} {:>12}", "t", "obs", "state mean", "state var");
    for (t, obs_mean) in means.iter().enumerate() {
        println!(
            "{t:>4} {obs_mean:>8.2} {:>10.5} {:>12.6}",
            trajectory.fused_mean.at(0, t, 0),
            trajectory.fused_variance.at(0, t, 0)
        );
    }

    // The wild outlier at t = 4 barely moves the state because its large
    // predicted variance gives it almost no precision.
    let weights: Vec<f64> = log_vars
        .iter()
        .map(|lv| 1.0 / (model.effective_variance(lv.exp()).unwrap() + cfg.epsilon))
        .collect();
    let total: f64 = weights.iter().sum();
    let batch = means.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>() / total;
    println!("\none-shot precision-weighted average: {batch:.5}");
    println!("recursive final state:               {:.5}", trajectory.fused_mean.at(0, 6, 0));
}
