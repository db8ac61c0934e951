//! Clustering and prediction for short, irregularly sampled longitudinal
//! trajectories.
//!
//! Two model families are provided:
//!
//! - [`dpgp`]: a Dirichlet-process mixture of Gaussian processes, sampled with
//!   a collapsed Gibbs sampler over Chinese-restaurant-process partitions. Each
//!   cluster shares a latent GP trend and every subject adds its own smooth GP
//!   deviation (see [`kernels`]).
//! - [`lcmm`]: a latent class mixed model with class-specific linear trends and
//!   a within-subject time covariance (none, autoregressive, or Brownian
//!   motion), fit by EM and selected by BIC.
//!
//! [`eval`] implements the final-time-point hold-out protocol used to compare
//! them, and [`data`] holds the dataset types, CSV I/O, z-scoring and a
//! synthetic cohort generator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod dpgp;
pub mod eval;
pub mod kernels;
pub mod lcmm;
pub(crate) mod linalg;
pub mod seed;

pub use data::{Observation, Subject, TrajectoryDataset};
