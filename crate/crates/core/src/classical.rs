//! Baseline estimators: Levina-Bickel MLE, Fukunaga-Olsen local PCA and
//! probabilistic PCA with BIC model selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{with_workers, Exclusion, IdEstimate, Method, Outcome, PointSet};
use crate::error::{Error, Result};
use crate::numerics::{covariance_of, knn_distances, local_covariance, sym_eigenvalues};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleParams {
    pub m: usize,
}

/// Per-point Levina-Bickel estimate
/// `[ (1/(m−1)) Σ_{j<m} ln(T_m / T_j) ]⁻¹`.
///
/// Duplicate points (some `T_j = 0`) and equidistant neighbourhoods (zero
/// log-sum) are returned as exclusions.
pub fn mle_id_point(pts: &PointSet, index: usize, m: usize) -> Result<std::result::Result<f64, String>> {
    if m < 2 {
        return Err(Error::invalid(format!("MLE needs m >= 2, got {m}")));
    }
    let t = knn_distances(pts, index, m)?;
    if t[0] == 0.0 {
        return Ok(Err("duplicate point: zero neighbour distance".into()));
    }
    let tm = t[m - 1];
    let log_sum: f64 = t[..m - 1].iter().map(|tj| (tm / tj).ln()).sum();
    if log_sum <= 0.0 {
        return Ok(Err("zero log-sum: all neighbour distances equal".into()));
    }
    Ok(Ok((m - 1) as f64 / log_sum))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleAggregate {
    pub estimate: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Dataset estimate as the inverse of the mean of per-point inverses.
pub fn mle_id_aggregate(per_point: &[f64], excluded: usize) -> Result<MleAggregate> {
    if per_point.is_empty() {
        return Err(Error::numerical(format!(
            "MLE aggregate undefined: all {excluded} points were excluded"
        )));
    }
    if per_point.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("per-point MLE estimates must be positive and finite"));
    }
    let mean_inv = per_point.iter().map(|v| 1.0 / v).sum::<f64>() / per_point.len() as f64;
    Ok(MleAggregate {
        estimate: 1.0 / mean_inv,
        included: per_point.len(),
        excluded,
    })
}

/// Aggregate over batch outcomes, counting exclusions.
pub fn mle_aggregate_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a Outcome>) -> Result<MleAggregate> {
    let mut values = Vec::new();
    let mut excluded = 0;
    for o in outcomes {
        match o {
            Ok(e) => values.push(e.value),
            Err(_) => excluded += 1,
        }
    }
    mle_id_aggregate(&values, excluded)
}

fn record(sample_id: &str, method: Method, value: f64, params: &BTreeMap<String, String>) -> IdEstimate {
    IdEstimate {
        sample_id: sample_id.to_string(),
        method,
        value,
        k_hat: value.round().max(0.0) as usize,
        spectrum: Vec::new(),
        gap_index: None,
        truncated: false,
        low_confidence: false,
        params: params.clone(),
    }
}

pub fn mle_batch(pts: &PointSet, params: &MleParams, workers: Option<usize>) -> Result<Vec<Outcome>> {
    if params.m < 2 || params.m >= pts.n() {
        return Err(Error::invalid(format!(
            "MLE needs 2 <= m <= n - 1, got m = {} with n = {}",
            params.m,
            pts.n()
        )));
    }
    let desc = BTreeMap::from([("m".to_string(), params.m.to_string())]);
    with_workers(workers, || {
        (0..pts.n())
            .into_par_iter()
            .map(|i| {
                let id = &pts.ids()[i];
                match mle_id_point(pts, i, params.m) {
                    Ok(Ok(v)) => Ok(record(id, Method::Mle, v, &desc)),
                    Ok(Err(reason)) => Err(Exclusion {
                        sample_id: id.clone(),
                        reason,
                    }),
                    Err(e) => Err(Exclusion {
                        sample_id: id.clone(),
                        reason: e.to_string(),
                    }),
                }
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpcaParams {
    /// Neighbourhood size, centre included.
    pub m: usize,
    pub alpha: f64,
}

impl Default for LpcaParams {
    fn default() -> Self {
        Self { m: 100, alpha: 0.05 }
    }
}

impl LpcaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.m < 2 {
            return Err(Error::invalid(format!("LPCA neighbourhood needs m >= 2, got {}", self.m)));
        }
        Ok(())
    }
}

/// Number of eigenvalues at or above `alpha · λ_max`. `None` when λ_max = 0.
pub fn lpca_count(eigenvalues: &[f64], alpha: f64) -> Option<usize> {
    let lmax = eigenvalues.iter().copied().fold(0.0, f64::max);
    if lmax <= 0.0 {
        return None;
    }
    Some(eigenvalues.iter().filter(|&&l| l >= alpha * lmax).count())
}

/// Fukunaga-Olsen count over the local covariance of `index` and its
/// nearest neighbours. The neighbourhood is capped at `n`.
pub fn lpca_id_point(
    pts: &PointSet,
    index: usize,
    params: &LpcaParams,
) -> Result<std::result::Result<usize, String>> {
    params.validate()?;
    let m = params.m.min(pts.n());
    let cov = local_covariance(pts, index, m)?;
    let spec = sym_eigenvalues(&cov)?;
    Ok(lpca_count(&spec.values, params.alpha)
        .ok_or_else(|| "zero local covariance: all neighbours identical".to_string()))
}

pub fn lpca_batch(pts: &PointSet, params: &LpcaParams, workers: Option<usize>) -> Result<Vec<Outcome>> {
    params.validate()?;
    if pts.n() < 2 {
        return Err(Error::invalid("LPCA needs at least 2 samples"));
    }
    let desc = BTreeMap::from([
        ("m".to_string(), params.m.to_string()),
        ("m_effective".to_string(), params.m.min(pts.n()).to_string()),
        ("alpha".to_string(), params.alpha.to_string()),
    ]);
    with_workers(workers, || {
        (0..pts.n())
            .into_par_iter()
            .map(|i| {
                let id = &pts.ids()[i];
                let reason = match lpca_id_point(pts, i, params) {
                    Ok(Ok(k)) => return Ok(record(id, Method::Lpca, k as f64, &desc)),
                    Ok(Err(reason)) => reason,
                    Err(e) => e.to_string(),
                };
                Err(Exclusion {
                    sample_id: id.clone(),
                    reason,
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpcaRow {
    pub q: usize,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub bic_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcaResult {
    pub q_star: usize,
    pub table: Vec<PpcaRow>,
}

/// Maximised PPCA log-likelihood for latent dimension `q`, from the
/// descending eigenvalues of the (divisor-n) sample covariance. The noise
/// variance is the mean of the discarded eigenvalues.
pub fn ppca_log_likelihood(eigenvalues: &[f64], n: usize, q: usize) -> f64 {
    let d = eigenvalues.len();
    let kept: f64 = eigenvalues[..q].iter().map(|l| l.ln()).sum();
    let noise = eigenvalues[q..].iter().sum::<f64>() / (d - q) as f64;
    -0.5 * n as f64
        * (d as f64 * (2.0 * std::f64::consts::PI).ln() + kept + (d - q) as f64 * noise.ln() + d as f64)
}

/// Free parameters of a q-factor PPCA model in d dimensions, mean included.
pub fn ppca_param_count(d: usize, q: usize) -> usize {
    d * q - q * q.saturating_sub(1) / 2 + 1 + d
}

/// Global latent dimension maximising the BIC-penalised PPCA likelihood over
/// `q = 0..d−1`; ties go to the smaller q.
pub fn ppca_id_global(pts: &PointSet) -> Result<PpcaResult> {
    let (n, d) = (pts.n(), pts.dim());
    if n < d + 2 {
        return Err(Error::InsufficientSamples { n, d, required: d + 2 });
    }
    let rows: Vec<&[f64]> = pts.rows().collect();
    let mut eig = sym_eigenvalues(&covariance_of(&rows, d))?.values;
    let lmax = eig[0];
    if lmax <= 0.0 {
        return Err(Error::numerical("PPCA: sample covariance is zero"));
    }
    // exact zeros (data on an exact subspace) would give ln 0
    let floor = (lmax * 1e-12).max(f64::MIN_POSITIVE);
    eig.iter_mut().for_each(|l| *l = l.max(floor));
    let ln_n = (n as f64).ln();
    let table: Vec<PpcaRow> = (0..d)
        .map(|q| {
            let log_likelihood = ppca_log_likelihood(&eig, n, q);
            let n_params = ppca_param_count(d, q);
            PpcaRow {
                q,
                log_likelihood,
                n_params,
                bic_score: log_likelihood - 0.5 * n_params as f64 * ln_n,
            }
        })
        .collect();
    let mut q_star = 0;
    for row in &table {
        if row.bic_score > table[q_star].bic_score {
            q_star = row.q;
        }
    }
    Ok(PpcaResult { q_star, table })
}

/// Run PPCA and wrap the result as a single group-level record.
pub fn ppca_estimate(pts: &PointSet, group_id: &str) -> Result<IdEstimate> {
    let r = ppca_id_global(pts)?;
    let params = BTreeMap::from([
        ("n".to_string(), pts.n().to_string()),
        ("criterion".to_string(), "bic".to_string()),
    ]);
    Ok(record(group_id, Method::Ppca, r.q_star as f64, &params))
}
