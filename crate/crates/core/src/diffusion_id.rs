//! Intrinsic dimension from the singular-value spectrum of a score matrix.
//!
//! Near a manifold and at small noise, score vectors of perturbed copies of
//! `x₀` concentrate in the normal space at `x₀`. Stacking `K` of them as the
//! columns of a `d × K` matrix, the singular values split into a large
//! block (normal directions) and a vanishing block (tangent directions). The
//! estimate is `d − i*`, where `i*` is the position of the largest drop
//! between consecutive singular values.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{with_workers, Exclusion, IdEstimate, Method, Outcome, PointSet, SeedPolicy};
use crate::error::{Error, Result};
use crate::numerics::{singular_values, Spectrum};
use crate::scoremodel::{PrecomputedScores, ScoreOracle};

/// A winning gap below this fraction of the largest singular value is
/// reported as low-confidence.
pub const LOW_CONFIDENCE_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionIdParams {
    /// Noise scale σ at the sampling time t₀.
    pub sigma_t0: f64,
    /// Number of score vectors (columns of the score matrix).
    pub k_scores: usize,
    pub seed: u64,
}

impl DiffusionIdParams {
    pub const DEFAULT_SIGMA_T0: f64 = 0.01;

    pub fn new(sigma_t0: f64, k_scores: usize, seed: u64) -> Self {
        Self {
            sigma_t0,
            k_scores,
            seed,
        }
    }

    /// σ = 0.01 and K = 4d, enough columns to resolve all d singular values.
    pub fn default_for_dim(d: usize, seed: u64) -> Self {
        Self::new(Self::DEFAULT_SIGMA_T0, 4 * d, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t0 > 0.0 && self.sigma_t0.is_finite()) {
            return Err(Error::invalid(format!("sigma_t0 must be > 0, got {}", self.sigma_t0)));
        }
        if self.k_scores < 2 {
            return Err(Error::invalid(format!("need K >= 2 score vectors, got {}", self.k_scores)));
        }
        Ok(())
    }

    fn describe(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("sigma_t0".to_string(), self.sigma_t0.to_string()),
            ("k_scores".to_string(), self.k_scores.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ])
    }
}

/// `d × K` matrix whose columns are score vectors at perturbed copies of x₀.
pub fn build_score_matrix<O: ScoreOracle + ?Sized>(
    oracle: &O,
    x0: &[f64],
    params: &DiffusionIdParams,
    stream: u64,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    let d = x0.len();
    if oracle.dim() != d {
        return Err(Error::invalid(format!(
            "oracle dimension {} does not match point dimension {d}",
            oracle.dim()
        )));
    }
    let mut rng = SeedPolicy::new(params.seed).rng(stream);
    let sigma = params.sigma_t0;
    let mut s = DMatrix::zeros(d, params.k_scores);
    let mut x = vec![0.0; d];
    for col in 0..params.k_scores {
        for (xi, &ci) in x.iter_mut().zip(x0) {
            let e: f64 = rng.sample(StandardNormal);
            *xi = ci + sigma * e;
        }
        let score = oracle.evaluate(&x, sigma).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("score column {col}: {m}")),
            other => Error::Invalid(format!("score column {col}: {other}")),
        })?;
        if score.len() != d || score.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "score column {col}: oracle returned an invalid vector"
            )));
        }
        s.set_column(col, &nalgebra::DVector::from_vec(score));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapResult {
    /// 1-based position i* of the largest drop `s_i − s_{i+1}`.
    pub gap_index: usize,
    pub k_hat: usize,
    /// Fewer than `d` singular values were available, so `k_hat` is a lower
    /// bound on what a full spectrum could report.
    pub truncated: bool,
    pub low_confidence: bool,
    pub gap: f64,
}

/// Largest consecutive drop in a non-increasing spectrum; the first index
/// wins ties.
pub fn spectral_gap_index(spectrum: &[f64], d: usize) -> Result<GapResult> {
    if spectrum.len() < 2 {
        return Err(Error::invalid(format!(
            "spectral gap needs at least 2 values, got {}",
            spectrum.len()
        )));
    }
    if spectrum.len() > d {
        return Err(Error::invalid(format!(
            "spectrum has {} values but the ambient dimension is {d}",
            spectrum.len()
        )));
    }
    if spectrum.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid("spectrum is not sorted non-increasing"));
    }
    let (mut best, mut gap) = (0usize, f64::NEG_INFINITY);
    for (i, w) in spectrum.windows(2).enumerate() {
        let g = w[0] - w[1];
        if g > gap {
            best = i;
            gap = g;
        }
    }
    let gap_index = best + 1;
    Ok(GapResult {
        gap_index,
        k_hat: d - gap_index,
        truncated: spectrum.len() < d,
        low_confidence: gap.is_nan() || gap < LOW_CONFIDENCE_GAP * spectrum[0] || gap == 0.0,
        gap,
    })
}

/// Spectral-gap estimate from an already-assembled score matrix.
pub fn estimate_from_score_matrix(
    sample_id: &str,
    s: &DMatrix<f64>,
    params: BTreeMap<String, String>,
) -> Result<IdEstimate> {
    let d = s.nrows();
    let Spectrum { values, .. } = singular_values(s)?;
    let gap = spectral_gap_index(&values, d)?;
    Ok(IdEstimate {
        sample_id: sample_id.to_string(),
        method: Method::Diffusion,
        value: gap.k_hat as f64,
        k_hat: gap.k_hat,
        spectrum: values,
        gap_index: Some(gap.gap_index),
        truncated: gap.truncated,
        low_confidence: gap.low_confidence,
        params,
    })
}

fn estimate_with_stream<O: ScoreOracle + ?Sized>(
    oracle: &O,
    sample_id: &str,
    x0: &[f64],
    params: &DiffusionIdParams,
    stream: u64,
) -> Result<IdEstimate> {
    let s = build_score_matrix(oracle, x0, params, stream)?;
    estimate_from_score_matrix(sample_id, &s, params.describe())
}

/// Estimate at a single point, using the seed's first per-sample stream.
pub fn estimate_id_at_point<O: ScoreOracle + ?Sized>(
    oracle: &O,
    x0: &[f64],
    params: &DiffusionIdParams,
) -> Result<IdEstimate> {
    estimate_with_stream(oracle, "x0", x0, params, 0)
}

fn into_outcome(id: &str, r: Result<IdEstimate>) -> Outcome {
    r.map_err(|e| Exclusion {
        sample_id: id.to_string(),
        reason: e.to_string(),
    })
}

/// One estimate per sample, in input order. Sample `i` draws its
/// perturbations from stream `i` of the seed, so results do not depend on
/// the worker count.
pub fn batch_estimate<O: ScoreOracle + ?Sized>(
    oracle: &O,
    pts: &PointSet,
    params: &DiffusionIdParams,
    workers: Option<usize>,
) -> Result<Vec<Outcome>> {
    batch_estimate_routed(&[oracle], &vec![0; pts.n()], pts, params, workers)
}

/// Like [`batch_estimate`], but sample `i` is scored by `oracles[route[i]]`.
pub fn batch_estimate_routed<O: ScoreOracle + ?Sized>(
    oracles: &[&O],
    route: &[usize],
    pts: &PointSet,
    params: &DiffusionIdParams,
    workers: Option<usize>,
) -> Result<Vec<Outcome>> {
    params.validate()?;
    if route.len() != pts.n() {
        return Err(Error::invalid("route length does not match the sample count"));
    }
    if let Some(&bad) = route.iter().find(|&&r| r >= oracles.len()) {
        return Err(Error::invalid(format!("route refers to missing oracle {bad}")));
    }
    with_workers(workers, || {
        (0..pts.n())
            .into_par_iter()
            .map(|i| {
                let id = &pts.ids()[i];
                into_outcome(
                    id,
                    estimate_with_stream(oracles[route[i]], id, pts.row(i), params, i as u64),
                )
            })
            .collect()
    })
}

/// Estimates from externally computed score sets, one per sample.
pub fn batch_estimate_precomputed(
    scores: &PrecomputedScores,
    ids: &[String],
    workers: Option<usize>,
) -> Result<Vec<Outcome>> {
    if ids.len() != scores.n_samples() {
        return Err(Error::invalid(format!(
            "{} ids for {} score sets",
            ids.len(),
            scores.n_samples()
        )));
    }
    let params = BTreeMap::from([
        ("k_scores".to_string(), scores.k().to_string()),
        ("source".to_string(), "file".to_string()),
    ]);
    with_workers(workers, || {
        (0..scores.n_samples())
            .into_par_iter()
            .map(|i| {
                let r = scores
                    .score_matrix(i)
                    .and_then(|s| estimate_from_score_matrix(&ids[i], &s, params.clone()));
                into_outcome(&ids[i], r)
            })
            .collect()
    })
}
