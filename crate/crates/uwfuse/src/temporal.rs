//! Sequential time-step updates: the running state absorbs each new
//! observation with weight `1 / (effective_variance + epsilon)`.
//!
//! The state carries its accumulated precision directly, so after T steps
//! the mean equals the one-shot precision-weighted average of all T
//! observations and the variance equals `1 / sum(w_t)` exactly. The
//! recursion is a pure measurement update; there is no prediction step or
//! process noise.

use crate::core::{FusedTrajectory, FusionConfig, Grid, UncertainEstimate};
use crate::error::{Error, Result};

/// Running fused state for one batch of feature vectors.
#[derive(Clone, Debug)]
pub struct TemporalState {
    mean: Vec<f64>,
    precision: Vec<f64>,
    step: usize,
    batch: usize,
    dim: usize,
}

impl TemporalState {
    /// Initializes the state directly from the first observation.
    pub fn init(mean: &[f64], weight: &[f64], batch: usize, dim: usize) -> Result<Self> {
        if mean.len() != batch * dim || weight.len() != batch * dim {
            return Err(Error::ShapeMismatch {
                what: "temporal state",
                expected: format!("{} values", batch * dim),
                actual: format!("{} / {}", mean.len(), weight.len()),
            });
        }
        Ok(TemporalState {
            mean: mean.to_vec(),
            precision: weight.to_vec(),
            step: 0,
            batch,
            dim,
        })
    }

    /// Fuses one observation into the state. The state's weight is its
    /// accumulated precision; the observation's weight is supplied by the
    /// caller.
    pub fn update(&mut self, obs_mean: &[f64], obs_weight: &[f64]) -> Result<()> {
        if obs_mean.len() != self.mean.len() || obs_weight.len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                what: "temporal update",
                expected: format!("{} values", self.mean.len()),
                actual: format!("{} / {}", obs_mean.len(), obs_weight.len()),
            });
        }
        for k in 0..self.mean.len() {
            let state_w = self.precision[k];
            let w = obs_weight[k];
            self.mean[k] = (state_w * self.mean[k] + w * obs_mean[k]) / (state_w + w);
            self.precision[k] = state_w + w;
        }
        self.step += 1;
        Ok(())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Reciprocal accumulated precision; strictly decreasing in the number
    /// of finite-variance updates absorbed.
    pub fn variance(&self) -> Vec<f64> {
        self.precision.iter().map(|p| 1.0 / p).collect()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.batch, self.dim)
    }
}

/// Runs the sequential update over the time axis of `obs`. Observation
/// variances are `effective_variance(exp(log_var))` under the configured
/// noise model; weights are `1 / (variance + epsilon)`. The returned
/// trajectory records the state after each step, with the per-observation
/// weights stored as a single modality plane.
pub fn sequential_update(obs: &UncertainEstimate, cfg: &FusionConfig) -> Result<FusedTrajectory> {
    cfg.validate()?;
    let model = cfg.noise_model()?;
    let mut eff_var = obs.log_variance.clone();
    for v in eff_var.values_mut() {
        *v = model.effective_variance(v.exp())?;
    }
    recurse(&obs.mean, &eff_var, cfg.epsilon)
}

/// Same recursion applied to a fused per-step trajectory, whose variances
/// are already effective; no noise-model correction is re-applied.
pub fn smooth_trajectory(traj: &FusedTrajectory, cfg: &FusionConfig) -> Result<FusedTrajectory> {
    recurse(&traj.fused_mean, &traj.fused_variance, cfg.epsilon)
}

fn recurse(means: &Grid, variances: &Grid, epsilon: f64) -> Result<FusedTrajectory> {
    means.expect_same_shape(variances, "sequential update")?;
    let (batch, time, dim) = means.shape();
    if time == 0 {
        return Err(Error::EmptyInput {
            what: "observation sequence",
        });
    }
    let mut weights = Grid::zeros(batch, time, dim);
    for b in 0..batch {
        for t in 0..time {
            for i in 0..dim {
                let v = variances.at(b, t, i);
                if v.is_nan() || v <= 0.0 {
                    return Err(Error::NonPositiveVariance { value: v });
                }
                *weights.at_mut(b, t, i) = 1.0 / (v + epsilon);
            }
        }
    }
    let mut fused_mean = Grid::zeros(batch, time, dim);
    let mut fused_variance = Grid::zeros(batch, time, dim);
    for b in 0..batch {
        let mut state =
            TemporalState::init(means.slice(b, 0), weights.slice(b, 0), 1, dim)?;
        fused_mean.slice_mut(b, 0).copy_from_slice(state.mean());
        fused_variance
            .slice_mut(b, 0)
            .copy_from_slice(&state.variance());
        for t in 1..time {
            state.update(means.slice(b, t), weights.slice(b, t))?;
            fused_mean.slice_mut(b, t).copy_from_slice(state.mean());
            fused_variance
                .slice_mut(b, t)
                .copy_from_slice(&state.variance());
        }
    }
    Ok(FusedTrajectory {
        fused_mean,
        fused_variance,
        weights_per_modality: vec![weights],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::NoiseKind;
    use rand::{Rng, SeedableRng};

    fn estimate(means: Vec<f64>, log_vars: Vec<f64>, time: usize) -> UncertainEstimate {
        UncertainEstimate::new(
            Grid::from_vec(means, 1, time, 1).unwrap(),
            Grid::from_vec(log_vars, 1, time, 1).unwrap(),
        )
        .unwrap()
    }

    fn gaussian_cfg(epsilon: f64) -> FusionConfig {
        FusionConfig {
            noise_model: NoiseKind::Gaussian,
            epsilon,
            ..FusionConfig::default()
        }
    }

    #[test]
    fn single_step_returns_input() {
        let cfg = gaussian_cfg(1e-300);
        let obs = estimate(vec![2.5], vec![0.7], 1);
        let out = sequential_update(&obs, &cfg).unwrap();
        assert_eq!(out.fused_mean.values()[0], 2.5);
        assert!((out.fused_variance.values()[0] - 0.7f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn two_symmetric_steps() {
        let cfg = gaussian_cfg(1e-300);
        let obs = estimate(vec![0.0, 2.0], vec![0.0, 0.0], 2);
        let out = sequential_update(&obs, &cfg).unwrap();
        assert_eq!(out.fused_mean.at(0, 1, 0), 1.0);
        assert_eq!(out.fused_variance.at(0, 1, 0), 0.5);
    }

    #[test]
    fn repeated_observation_shrinks_variance_linearly() {
        let cfg = gaussian_cfg(1e-300);
        let v: f64 = 1.3;
        let obs = estimate(vec![0.75; 3], vec![v.ln(); 3], 3);
        let out = sequential_update(&obs, &cfg).unwrap();
        assert!((out.fused_mean.at(0, 2, 0) - 0.75).abs() < 1e-15);
        assert!((out.fused_variance.at(0, 2, 0) - v / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matches_one_shot_precision_average() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let cfg = FusionConfig::default();
        let model = cfg.noise_model().unwrap();
        for _ in 0..50 {
            let time = rng.random_range(2..64);
            let means: Vec<f64> = (0..time).map(|_| rng.random_range(-4.0..4.0)).collect();
            let lvs: Vec<f64> = (0..time).map(|_| rng.random_range(-2.0..2.0)).collect();
            let obs = estimate(means.clone(), lvs.clone(), time);
            let out = sequential_update(&obs, &cfg).unwrap();
            let weights: Vec<f64> = lvs
                .iter()
                .map(|lv| 1.0 / (model.effective_variance(lv.exp()).unwrap() + cfg.epsilon))
                .collect();
            let total: f64 = weights.iter().sum();
            let avg: f64 = means.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>() / total;
            let last = time - 1;
            assert!((out.fused_mean.at(0, last, 0) - avg).abs() < 1e-10);
            assert!((out.fused_variance.at(0, last, 0) - 1.0 / total).abs() < 1e-14);
        }
    }

    #[test]
    fn final_state_is_permutation_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cfg = FusionConfig::default();
        let time = 17;
        let means: Vec<f64> = (0..time).map(|_| rng.random_range(-4.0..4.0)).collect();
        let lvs: Vec<f64> = (0..time).map(|_| rng.random_range(-2.0..2.0)).collect();
        let base = sequential_update(&estimate(means.clone(), lvs.clone(), time), &cfg).unwrap();
        let mut order: Vec<usize> = (0..time).collect();
        order.reverse();
        order.swap(3, 9);
        let perm_means: Vec<f64> = order.iter().map(|&t| means[t]).collect();
        let perm_lvs: Vec<f64> = order.iter().map(|&t| lvs[t]).collect();
        let perm = sequential_update(&estimate(perm_means, perm_lvs, time), &cfg).unwrap();
        let last = time - 1;
        assert!((base.fused_mean.at(0, last, 0) - perm.fused_mean.at(0, last, 0)).abs() < 1e-10);
        assert!(
            (base.fused_variance.at(0, last, 0) - perm.fused_variance.at(0, last, 0)).abs()
                < 1e-10
        );
    }

    #[test]
    fn variance_monotone_and_dominated() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let cfg = FusionConfig::default();
        let model = cfg.noise_model().unwrap();
        let time = 12;
        let means: Vec<f64> = (0..time).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lvs: Vec<f64> = (0..time).map(|_| rng.random_range(-1.0..2.0)).collect();
        let out = sequential_update(&estimate(means, lvs.clone(), time), &cfg).unwrap();
        let mut last = f64::INFINITY;
        for t in 0..time {
            let v = out.fused_variance.at(0, t, 0);
            assert!(v > 0.0 && v < last);
            last = v;
        }
        for lv in &lvs {
            let stabilized = model.effective_variance(lv.exp()).unwrap() + cfg.epsilon;
            assert!(last <= stabilized);
        }
    }

    #[test]
    fn student_t_converges_to_gaussian_for_large_nu() {
        let means = vec![0.5, -1.0, 2.0, 0.0];
        let lvs = vec![0.1, -0.4, 0.9, 0.0];
        let gaussian = sequential_update(&estimate(means.clone(), lvs.clone(), 4), &gaussian_cfg(1e-8)).unwrap();
        let student_cfg = FusionConfig {
            nu: 1e9,
            epsilon: 1e-8,
            noise_model: NoiseKind::StudentT,
            ..FusionConfig::default()
        };
        let student = sequential_update(&estimate(means, lvs, 4), &student_cfg).unwrap();
        for t in 0..4 {
            assert!((gaussian.fused_mean.at(0, t, 0) - student.fused_mean.at(0, t, 0)).abs() < 1e-6);
            assert!(
                (gaussian.fused_variance.at(0, t, 0) - student.fused_variance.at(0, t, 0)).abs()
                    < 1e-6
            );
        }
    }

    #[test]
    fn smoothing_consumes_fused_variances_verbatim() {
        // smooth_trajectory must not re-apply the noise-model correction.
        let cfg = FusionConfig::default();
        let traj = FusedTrajectory {
            fused_mean: Grid::from_vec(vec![1.0, 3.0], 1, 2, 1).unwrap(),
            fused_variance: Grid::from_vec(vec![1.0, 1.0], 1, 2, 1).unwrap(),
            weights_per_modality: vec![],
        };
        let out = smooth_trajectory(&traj, &cfg).unwrap();
        assert!((out.fused_mean.at(0, 1, 0) - 2.0).abs() < 1e-9);
        assert!((out.fused_variance.at(0, 1, 0) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn empty_time_axis_rejected() {
        let cfg = FusionConfig::default();
        let obs = UncertainEstimate::new(Grid::zeros(1, 0, 2), Grid::zeros(1, 0, 2)).unwrap();
        assert!(matches!(
            sequential_update(&obs, &cfg),
            Err(Error::EmptyInput { .. })
        ));
    }
}
