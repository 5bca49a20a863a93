//! Uncertainty-weighted image-event fusion.
//!
//! A numerical engine for fusing two embedding streams of the same scene
//! under heavy-tailed noise: Student-t effective variances via the Laplace
//! approximation, value-level inverse-variance (precision) weighting,
//! Kalman-style sequential updates over time, attenuated iterative
//! refinement of the fused state, the accompanying loss stack with analytic
//! gradients, synthetic event-map generation from raw frames, ranking and
//! calibration metrics, and a masking perturbation harness.
//!
//! Start with the runnable programs under `examples/`, one per capability;
//! the `uwfuse` binary exposes the same flows as subcommands
//! (`fuse`, `eval`, `perturb`, `events`, `train-demo`).

// Index loops over parallel (batch, time, dim) arrays are the house style.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod core;
pub mod error;
pub mod events;
pub mod fixture;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod noise;
pub mod perturb;
pub mod pipeline;
pub mod refine;
pub mod temporal;
pub mod train;

pub use crate::core::{
    EmbeddingSequence, FusedTrajectory, FusionConfig, Grid, Modality, NoiseKind, ScoreSeries,
    UncertainEstimate,
};
pub use crate::error::{Error, Result};
pub use crate::noise::NoiseModel;
