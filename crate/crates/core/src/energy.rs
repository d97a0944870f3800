//! Energy scores from posterior classifier logits and the log-normal
//! interval labelling used to stratify a dataset by how far each source sits
//! from the bulk of the energy distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::with_workers;
use crate::error::{Error, Result};
use crate::io::Tensor;

/// `E = −T · ln Σᵢ exp(fᵢ / T)`, evaluated with the max shifted out.
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("energy score needs at least one logit"));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("logit {i} is not finite")));
    }
    let scaled = logits.iter().map(|f| f / temperature);
    let max = scaled.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut top_seen = false;
    let mut rest = 0.0;
    for s in scaled {
        if s == max && !top_seen {
            top_seen = true;
        } else {
            rest += (s - max).exp();
        }
    }
    Ok(-temperature * (max + rest.ln_1p()))
}

/// `N` posterior draws × `C` classes of logits for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorLogits {
    pub sample_id: String,
    draws: usize,
    classes: usize,
    values: Vec<f64>,
}

impl PosteriorLogits {
    pub fn new(sample_id: impl Into<String>, draws: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        let sample_id = sample_id.into();
        if draws == 0 || classes < 2 {
            return Err(Error::invalid(format!(
                "{sample_id}: need N >= 1 draws and C >= 2 classes, got {draws} x {classes}"
            )));
        }
        if values.len() != draws * classes {
            return Err(Error::invalid(format!("{sample_id}: logit count does not match {draws} x {classes}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{sample_id}: non-finite logit")));
        }
        Ok(Self {
            sample_id,
            draws,
            classes,
            values,
        })
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }
}

/// Split an `(n, N, C)` logits tensor into per-sample posteriors.
pub fn posteriors_from_tensor(t: &Tensor, ids: &[String]) -> Result<Vec<PosteriorLogits>> {
    let [n, draws, classes] = t.dims[..] else {
        return Err(Error::invalid(format!(
            "logits tensor must have shape (n, N, C), got rank {}",
            t.dims.len()
        )));
    };
    if ids.len() != n {
        return Err(Error::invalid(format!("{} ids for {n} samples", ids.len())));
    }
    t.values
        .chunks_exact(draws * classes)
        .zip(ids)
        .map(|(block, id)| PosteriorLogits::new(id.clone(), draws, classes, block.to_vec()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub mean: f64,
    /// Population standard deviation (divisor N).
    pub std: f64,
}

pub fn posterior_energy_stats(p: &PosteriorLogits, temperature: f64) -> Result<EnergyStats> {
    let energies = (0..p.draws)
        .map(|i| energy_score(p.draw(i), temperature))
        .collect::<Result<Vec<_>>>()?;
    let n = energies.len() as f64;
    let mean = energies.iter().sum::<f64>() / n;
    let var = energies.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(EnergyStats { mean, std: var.sqrt() })
}

/// Map applied to raw values before taking logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "c", rename_all = "snake_case")]
pub enum PositivityTransform {
    Identity,
    Negate,
    Shift(f64),
}

impl PositivityTransform {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            Self::Identity => v,
            Self::Negate => -v,
            Self::Shift(c) => v + c,
        }
    }

    /// Identity when all values are positive, negation when all are
    /// negative, otherwise a shift putting the minimum at `1e-9`.
    pub fn choose(values: &[f64]) -> Self {
        if values.iter().all(|&v| v > 0.0) {
            Self::Identity
        } else if values.iter().all(|&v| v < 0.0) {
            Self::Negate
        } else {
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            Self::Shift(-min + SHIFT_MARGIN)
        }
    }
}

pub const SHIFT_MARGIN: f64 = 1e-9;

impl std::fmt::Display for PositivityTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::Negate => f.write_str("negate"),
            Self::Shift(c) => write!(f, "shift({c})"),
        }
    }
}

/// Maximum-likelihood log-normal fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalFit {
    pub mu_ln: f64,
    pub sigma_ln: f64,
    pub transform: PositivityTransform,
}

impl LogNormalFit {
    /// Signed distance of `value` from the centre, in log-space standard deviations.
    pub fn z_score(&self, value: f64) -> Result<f64> {
        if self.sigma_ln <= 0.0 {
            return Err(Error::numerical("log-normal fit has zero spread"));
        }
        let v = self.transform.apply(value);
        if v.is_nan() || v <= 0.0 {
            return Err(Error::invalid(format!(
                "value {value} is not positive after {} transform",
                self.transform
            )));
        }
        Ok((v.ln() - self.mu_ln) / self.sigma_ln)
    }
}

/// Fit with a given transform, or pick one with [`PositivityTransform::choose`].
pub fn fit_lognormal(values: &[f64], transform: Option<PositivityTransform>) -> Result<LogNormalFit> {
    if values.len() < 2 {
        return Err(Error::invalid("log-normal fit needs at least 2 values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("log-normal fit: non-finite value"));
    }
    let transform = transform.unwrap_or_else(|| PositivityTransform::choose(values));
    let logs = values
        .iter()
        .map(|&v| {
            let t = transform.apply(v);
            if t > 0.0 {
                Ok(t.ln())
            } else {
                Err(Error::invalid(format!("value {v} is not positive after {transform} transform")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n = logs.len() as f64;
    let mu_ln = logs.iter().sum::<f64>() / n;
    let sigma_ln = (logs.iter().map(|l| (l - mu_ln) * (l - mu_ln)).sum::<f64>() / n).sqrt();
    if sigma_ln == 0.0 {
        return Err(Error::numerical("degenerate log-normal fit: all values equal"));
    }
    Ok(LogNormalFit {
        mu_ln,
        sigma_ln,
        transform,
    })
}

/// `floor(z)`, the unit-width bin in sigma units.
pub fn raw_bin(value: f64, fit: &LogNormalFit) -> Result<i64> {
    Ok(fit.z_score(value)?.floor() as i64)
}

/// 1-based interval: `raw_bin − dataset_floor + 1`.
pub fn interval_label(value: f64, fit: &LogNormalFit, dataset_floor: i64) -> Result<u32> {
    let label = raw_bin(value, fit)? - dataset_floor + 1;
    u32::try_from(label)
        .ok()
        .filter(|&l| l >= 1)
        .ok_or_else(|| Error::invalid(format!("value {value} falls below the dataset floor")))
}

/// Fit over the whole set and label every value; labels start at 1.
pub fn label_all(values: &[f64], transform: Option<PositivityTransform>) -> Result<(LogNormalFit, Vec<u32>)> {
    let fit = fit_lognormal(values, transform)?;
    let bins = values
        .iter()
        .map(|&v| raw_bin(v, &fit))
        .collect::<Result<Vec<_>>>()?;
    let floor = *bins.iter().min().expect("at least two values");
    let labels = bins.iter().map(|b| (b - floor + 1) as u32).collect();
    Ok((fit, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub id: String,
    pub mean: f64,
    pub std: f64,
    pub mean_interval: u32,
    pub std_interval: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBinning {
    pub records: Vec<EnergyRecord>,
    pub mean_fit: LogNormalFit,
    pub std_fit: LogNormalFit,
}

/// Map per-sample statistics, then fit both log-normals over the full set,
/// then label.
pub fn bin_energies(posteriors: &[PosteriorLogits], temperature: f64, workers: Option<usize>) -> Result<EnergyBinning> {
    let stats = with_workers(workers, || {
        posteriors
            .par_iter()
            .map(|p| posterior_energy_stats(p, temperature))
            .collect::<Result<Vec<_>>>()
    })??;
    let means: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    let stds: Vec<f64> = stats.iter().map(|s| s.std).collect();
    let (mean_fit, mean_labels) = label_all(&means, None)?;
    let (std_fit, std_labels) = label_all(&stds, None)?;
    let records = posteriors
        .iter()
        .zip(&stats)
        .zip(mean_labels.iter().zip(&std_labels))
        .map(|((p, s), (&mi, &si))| EnergyRecord {
            id: p.sample_id.clone(),
            mean: s.mean,
            std: s.std,
            mean_interval: mi,
            std_interval: si,
        })
        .collect();
    Ok(EnergyBinning {
        records,
        mean_fit,
        std_fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn energy_examples() {
        assert!((energy_score(&[0.0, 0.0], 1.0).unwrap() + 2f64.ln()).abs() < 1e-15);
        // high-precision value of -ln(e^2 + e^1)
        assert!((energy_score(&[2.0, 1.0], 1.0).unwrap() + 2.313_261_687_518_222_7).abs() < 1e-14);
        assert!((energy_score(&[0.0, 0.0], 2.0).unwrap() + 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(energy_score(&[0.0, f64::NAN], 1.0).is_err());
        assert!(energy_score(&[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn energy_is_overflow_safe() {
        let e = energy_score(&[700.0, 699.0, -700.0], 1.0).unwrap();
        assert!((e + 700.0 + (-1f64).exp().ln_1p()).abs() < 1e-12);
        let e = energy_score(&[-700.0, -700.0], 1.0).unwrap();
        assert!((e - 700.0 + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stats_examples() {
        let p = PosteriorLogits::new("a", 3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(posterior_energy_stats(&p, 1.0).unwrap().std, 0.0);
        // single-logit energies: E = -f when the other class is at -inf-ish
        let p = PosteriorLogits::new("b", 2, 2, vec![1.0, -800.0, 3.0, -800.0]).unwrap();
        let s = posterior_energy_stats(&p, 1.0).unwrap();
        assert!((s.mean + 2.0).abs() < 1e-12);
        assert!((s.std - 1.0).abs() < 1e-12);
        assert!(PosteriorLogits::new("c", 1, 1, vec![0.0]).is_err());
    }

    #[test]
    fn lognormal_examples() {
        let e = std::f64::consts::E;
        let fit = fit_lognormal(&[e, e * e, e * e * e], None).unwrap();
        assert!((fit.mu_ln - 2.0).abs() < 1e-12);
        assert!((fit.sigma_ln - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(fit.transform, PositivityTransform::Identity);

        assert!(matches!(fit_lognormal(&[5.0; 4], None), Err(Error::Numerical(_))));

        let neg = fit_lognormal(&[-e, -e * e], None).unwrap();
        assert_eq!(neg.transform, PositivityTransform::Negate);
        assert!((neg.mu_ln - 1.5).abs() < 1e-12);

        let mixed = fit_lognormal(&[-1.0, 0.5, 2.0], None).unwrap();
        assert_eq!(mixed.transform, PositivityTransform::Shift(1.0 + SHIFT_MARGIN));
        assert!(fit_lognormal(&[-1.0, 2.0], Some(PositivityTransform::Negate)).is_err());
    }

    #[test]
    fn interval_examples() {
        let fit = LogNormalFit {
            mu_ln: 0.0,
            sigma_ln: 1.0,
            transform: PositivityTransform::Identity,
        };
        // values whose z-scores floor to -2, 0, 2
        let vals = [(-1.5f64).exp(), 0.5f64.exp(), 2.5f64.exp()];
        let bins: Vec<i64> = vals.iter().map(|&v| raw_bin(v, &fit).unwrap()).collect();
        assert_eq!(bins, vec![-2, 0, 2]);
        let labels: Vec<u32> = vals.iter().map(|&v| interval_label(v, &fit, -2).unwrap()).collect();
        assert_eq!(labels, vec![1, 3, 5]);
        assert_eq!(raw_bin(1.0, &fit).unwrap(), 0);
        assert!(interval_label(vals[0], &fit, 0).is_err());
        let flat = LogNormalFit { sigma_ln: 0.0, ..fit };
        assert!(raw_bin(1.0, &flat).is_err());
    }

    #[test]
    fn binning_from_tensor() {
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let mut values = Vec::new();
        for i in 0..4 {
            for j in 0..3 {
                values.extend([i as f64 + 0.1 * j as f64, -(i as f64) * 0.5]);
            }
        }
        let t = Tensor::new(vec![4, 3, 2], values).unwrap();
        let posts = posteriors_from_tensor(&t, &ids).unwrap();
        let b = bin_energies(&posts, 1.0, Some(2)).unwrap();
        assert_eq!(b.records.len(), 4);
        assert_eq!(b.records.iter().map(|r| r.mean_interval).min(), Some(1));
        assert_eq!(b.records[2].id, "s2");
        assert!(posteriors_from_tensor(&t, &ids[..3]).is_err());
    }

    proptest! {
        #[test]
        fn shift_identity(logits in prop::collection::vec(-50.0f64..50.0, 2..8), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = logits.iter().map(|f| f + c).collect();
            let a = energy_score(&logits, 1.0).unwrap();
            let b = energy_score(&shifted, 1.0).unwrap();
            prop_assert!((b - (a - c)).abs() <= 1e-10 * (1.0 + a.abs() + c.abs()));
        }

        #[test]
        fn monotone_in_each_logit(logits in prop::collection::vec(-20.0f64..20.0, 2..6), bump in 0.0f64..5.0, i in 0usize..6) {
            let i = i % logits.len();
            let mut up = logits.clone();
            up[i] += bump;
            prop_assert!(energy_score(&up, 1.0).unwrap() <= energy_score(&logits, 1.0).unwrap() + 1e-12);
        }

        #[test]
        fn labels_partition_and_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let vals: Vec<f64> = (0..50)
                .map(|i| -(1.0 + (crate::domain::splitmix64(seed ^ i) >> 40) as f64 / 1e5))
                .collect();
            let (_, labels) = label_all(&vals, None).unwrap();
            prop_assert_eq!(labels.iter().min().copied(), Some(1));
            let scaled: Vec<f64> = vals.iter().map(|v| v * scale).collect();
            let (_, again) = label_all(&scaled, None).unwrap();
            prop_assert_eq!(labels, again);
        }
    }
}
