//! Iterative residual refinement of a fused latent state.
//!
//! Each iteration estimates a residual `F(x)` and subtracts an attenuated
//! fraction of it: `x <- x - lambda * F(x)`, recording the L2 norm of every
//! residual. With `F(x) = x - c` the map contracts with factor
//! `1 - lambda`, so the residual norms decay geometrically.

use std::path::Path;

use crate::core::{self, FusedTrajectory, FusionConfig, Grid};
use crate::error::{Error, Result};

/// Side information made available to residual estimators. The built-in
/// estimators ignore it; custom estimators may condition on the iteration
/// index or the current fused uncertainties.
pub struct RefineContext<'a> {
    pub iteration: usize,
    pub variance: Option<&'a Grid>,
}

/// Shape-preserving residual map from a (batch, time, dim) latent.
pub trait ResidualEstimator {
    fn residual(&self, latent: &Grid, ctx: &RefineContext<'_>) -> Result<Grid>;
}

/// Affine residual estimator applied independently to every (b, t) slice:
/// `F(x) = x W^T + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineEstimator {
    weight: Vec<f64>, // dim x dim, row-major
    bias: Vec<f64>,
    dim: usize,
}

/// Builds an affine estimator from a row-major `dim x dim` weight and a
/// `dim` bias; all parameters must be finite.
pub fn make_affine_estimator(weight: Vec<f64>, bias: Vec<f64>) -> Result<AffineEstimator> {
    let dim = bias.len();
    if weight.len() != dim * dim {
        return Err(Error::ShapeMismatch {
            what: "affine estimator",
            expected: format!("{dim}x{dim} weight for {dim} bias"),
            actual: format!("{} values", weight.len()),
        });
    }
    for (index, v) in weight.iter().chain(bias.iter()).enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                what: "affine estimator parameters",
                index,
            });
        }
    }
    Ok(AffineEstimator { weight, bias, dim })
}

impl AffineEstimator {
    pub fn zero(dim: usize) -> Self {
        AffineEstimator {
            weight: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
            dim,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        AffineEstimator {
            weight,
            bias: vec![0.0; dim],
            dim,
        }
    }

    /// `F(x) = x - target`, whose refinement fixed point is `target`.
    pub fn toward(target: &[f64]) -> Self {
        let mut est = AffineEstimator::identity(target.len());
        for (b, t) in est.bias.iter_mut().zip(target) {
            *b = -t;
        }
        est
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Serializes to the EMB1 container as one (1, dim + 1, dim) grid:
    /// rows 0..dim hold the weight matrix, the final row holds the bias.
    pub fn write_emb1(&self, path: &Path) -> Result<()> {
        let mut data = self.weight.clone();
        data.extend_from_slice(&self.bias);
        let grid = Grid::from_vec(data, 1, self.dim + 1, self.dim)?;
        core::write_emb1(path, &grid)
    }

    pub fn read_emb1(path: &Path) -> Result<Self> {
        let grid = core::read_emb1(path)?;
        let (batch, time, dim) = grid.shape();
        if batch != 1 || time != dim + 1 {
            return Err(Error::ShapeMismatch {
                what: "estimator container",
                expected: "1 x (dim+1) x dim".to_string(),
                actual: format!("{batch}x{time}x{dim}"),
            });
        }
        let values = grid.values();
        make_affine_estimator(values[..dim * dim].to_vec(), values[dim * dim..].to_vec())
    }
}

impl ResidualEstimator for AffineEstimator {
    fn residual(&self, latent: &Grid, _ctx: &RefineContext<'_>) -> Result<Grid> {
        let (batch, time, dim) = latent.shape();
        if dim != self.dim {
            return Err(Error::ShapeMismatch {
                what: "affine estimator input",
                expected: format!("dim {}", self.dim),
                actual: format!("dim {dim}"),
            });
        }
        let mut out = Grid::zeros(batch, time, dim);
        for b in 0..batch {
            for t in 0..time {
                let x = latent.slice(b, t);
                let y = out.slice_mut(b, t);
                for i in 0..dim {
                    let row = &self.weight[i * dim..(i + 1) * dim];
                    y[i] = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[i];
                }
            }
        }
        Ok(out)
    }
}

/// Two-layer residual estimator: affine, elementwise `max(0, .)`, affine.
#[derive(Clone, Debug)]
pub struct MlpEstimator {
    inner: AffineEstimator,
    outer: AffineEstimator,
}

impl MlpEstimator {
    pub fn new(inner: AffineEstimator, outer: AffineEstimator) -> Result<Self> {
        if inner.dim() != outer.dim() {
            return Err(Error::ShapeMismatch {
                what: "mlp estimator",
                expected: format!("dim {}", inner.dim()),
                actual: format!("dim {}", outer.dim()),
            });
        }
        Ok(MlpEstimator { inner, outer })
    }
}

impl ResidualEstimator for MlpEstimator {
    fn residual(&self, latent: &Grid, ctx: &RefineContext<'_>) -> Result<Grid> {
        let hidden = self.inner.residual(latent, ctx)?.map(|v| v.max(0.0));
        self.outer.residual(&hidden, ctx)
    }
}

/// Full refinement trace: the iterates `x^0 .. x^N` and the residual norm
/// recorded at each of the N applications.
pub struct RefineTrace {
    pub states: Vec<Grid>,
    pub residual_norms: Vec<f64>,
}

/// Runs one attenuated update per entry of `lambdas`, keeping every iterate.
pub fn refine_trace(
    latent: &Grid,
    estimator: &dyn ResidualEstimator,
    lambdas: &[f64],
    variance: Option<&Grid>,
) -> Result<RefineTrace> {
    let mut states = Vec::with_capacity(lambdas.len() + 1);
    let mut residual_norms = Vec::with_capacity(lambdas.len());
    states.push(latent.clone());
    for (iteration, lambda) in lambdas.iter().enumerate() {
        if !(*lambda > 0.0 && *lambda < 1.0) {
            return Err(Error::invalid_config(format!(
                "attenuation must lie strictly inside (0, 1), got {lambda}"
            )));
        }
        let current = states.last().unwrap();
        let ctx = RefineContext {
            iteration,
            variance,
        };
        let residual = estimator.residual(current, &ctx)?;
        current.expect_same_shape(&residual, "residual estimate")?;
        let norm = residual.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        residual_norms.push(norm);
        let mut next = current.clone();
        for (x, r) in next.values_mut().iter_mut().zip(residual.values()) {
            *x -= lambda * r;
        }
        states.push(next);
    }
    Ok(RefineTrace {
        states,
        residual_norms,
    })
}

/// Refined trajectory plus the residual norm per iteration.
pub struct RefineOutput {
    pub trajectory: FusedTrajectory,
    pub residual_norms: Vec<f64>,
}

/// Applies `cfg.refine_steps` attenuated updates with the constant factor
/// `cfg.refine_lambda`. Zero steps return the input unchanged. Variance and
/// weights pass through untouched; only the mean is refined.
pub fn refine(
    state0: &FusedTrajectory,
    estimator: &dyn ResidualEstimator,
    cfg: &FusionConfig,
) -> Result<RefineOutput> {
    cfg.validate()?;
    let lambdas = vec![cfg.refine_lambda; cfg.refine_steps];
    refine_with_schedule(state0, estimator, &lambdas)
}

/// Refinement under a per-iteration attenuation schedule.
pub fn refine_with_schedule(
    state0: &FusedTrajectory,
    estimator: &dyn ResidualEstimator,
    lambdas: &[f64],
) -> Result<RefineOutput> {
    let trace = refine_trace(
        &state0.fused_mean,
        estimator,
        lambdas,
        Some(&state0.fused_variance),
    )?;
    let trajectory = FusedTrajectory {
        fused_mean: trace.states.last().unwrap().clone(),
        fused_variance: state0.fused_variance.clone(),
        weights_per_modality: state0.weights_per_modality.clone(),
    };
    Ok(RefineOutput {
        trajectory,
        residual_norms: trace.residual_norms,
    })
}
