//! Intrinsic dimension estimation from the singular-value spectrum of
//! diffusion score vectors, alongside classical nearest-neighbour and
//! PCA-based baselines, energy-score interval binning and the reporting
//! pipeline that ties per-sample estimates to those intervals.
//!
//! The crate is organised bottom-up:
//!
//! - [`domain`]: point sets, images, per-sample estimate records, seeding.
//! - [`numerics`]: singular values, symmetric eigenvalues, exact k-NN, covariance.
//! - [`synth`]: synthetic manifolds with known intrinsic dimension.
//! - [`scoremodel`]: score oracles (closed-form Gaussian, precomputed, DSM network).
//! - [`diffusion_id`]: the spectral-gap estimator over score matrices.
//! - [`classical`]: MLE, local PCA and probabilistic PCA estimators.
//! - [`energy`]: energy scores from posterior logits and interval labels.
//! - [`analysis`]: SNR, interval aggregation, trend checks, plot emission.
//! - [`io`]: binary tensor container, CSV schemas, run manifests.
//! - [`cli`]: the batch command-line front end.

pub mod analysis;
pub mod classical;
pub mod cli;
pub mod diffusion_id;
pub mod domain;
pub mod energy;
pub mod error;
pub mod io;
pub mod numerics;
pub mod scoremodel;
pub mod synth;

pub use error::{Error, Result};
