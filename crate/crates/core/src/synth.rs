//! Synthetic manifolds with known intrinsic dimension.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{PointSet, SeedPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    SubspaceGaussian,
    KSphere,
    KCube,
    SwissRoll,
}

impl FromStr for ManifoldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subspace_gaussian" => Ok(Self::SubspaceGaussian),
            "k_sphere" => Ok(Self::KSphere),
            "k_cube" => Ok(Self::KCube),
            "swiss_roll" => Ok(Self::SwissRoll),
            other => Err(Error::invalid(format!("unknown manifold kind {other:?}"))),
        }
    }
}

impl fmt::Display for ManifoldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SubspaceGaussian => "subspace_gaussian",
            Self::KSphere => "k_sphere",
            Self::KCube => "k_cube",
            Self::SwissRoll => "swiss_roll",
        })
    }
}

/// Default ratio between consecutive tangent variances.
pub const DEFAULT_SCALE_DECAY: f64 = 0.8;

/// The roll is generated in the usual parametrisation (angle in
/// `[1.5π, 4.5π]`, height in `[0, 21]`) and then shrunk by this factor so its
/// coordinates are of order one, like every other generator here.
pub const SWISS_ROLL_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub ambient_d: usize,
    pub intrinsic_k: usize,
    pub n: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Variance of the j-th latent coordinate is `scale_decay^j`
    /// (subspace_gaussian only). `1.0` gives isotropic unit tangent variance.
    #[serde(default = "default_decay")]
    pub scale_decay: f64,
}

fn default_decay() -> f64 {
    DEFAULT_SCALE_DECAY
}

impl ManifoldSpec {
    pub fn new(kind: ManifoldKind, ambient_d: usize, intrinsic_k: usize, n: usize) -> Self {
        Self {
            kind,
            ambient_d,
            intrinsic_k,
            n,
            noise_sigma: 0.0,
            seed: 0,
            scale_decay: DEFAULT_SCALE_DECAY,
        }
    }

    pub fn swiss_roll(ambient_d: usize, n: usize) -> Self {
        Self::new(ManifoldKind::SwissRoll, ambient_d, 2, n)
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_scale_decay(mut self, decay: f64) -> Self {
        self.scale_decay = decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k) = (self.ambient_d, self.intrinsic_k);
        if d == 0 || self.n == 0 {
            return Err(Error::invalid("manifold spec needs ambient_d >= 1 and n >= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.scale_decay > 0.0 && self.scale_decay.is_finite()) {
            return Err(Error::invalid(format!("scale_decay must be > 0, got {}", self.scale_decay)));
        }
        if k > d {
            return Err(Error::invalid(format!("intrinsic_k = {k} exceeds ambient_d = {d}")));
        }
        match self.kind {
            ManifoldKind::SwissRoll if k != 2 || d < 3 => Err(Error::invalid(
                "swiss_roll has intrinsic_k = 2 and needs ambient_d >= 3",
            )),
            ManifoldKind::KSphere if k + 1 > d => Err(Error::invalid(format!(
                "a {k}-sphere needs ambient_d >= {}",
                k + 1
            ))),
            ManifoldKind::KSphere | ManifoldKind::KCube if k == 0 => {
                Err(Error::invalid("sphere and cube need intrinsic_k >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Variances of the latent coordinates of subspace_gaussian.
    pub fn tangent_variances(&self) -> Vec<f64> {
        (0..self.intrinsic_k)
            .map(|j| self.scale_decay.powi(j as i32))
            .collect()
    }

    fn embedding_rank(&self) -> usize {
        match self.kind {
            ManifoldKind::KSphere => self.intrinsic_k + 1,
            ManifoldKind::SwissRoll => 3,
            _ => self.intrinsic_k,
        }
    }
}

/// A generated point set together with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub points: PointSet,
    pub intrinsic_k: usize,
    /// Orthonormal `d × r` embedding basis (identity block for the swiss roll).
    pub basis: DMatrix<f64>,
    pub spec: ManifoldSpec,
}

// Stream indices within the spec's seed; kept apart so the basis never
// depends on n.
const BASIS_STREAM: u64 = u64::MAX;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Seeded `d × r` matrix with orthonormal columns (QR of a Gaussian matrix,
/// signs fixed so that R has a positive diagonal).
pub fn seeded_orthonormal_basis(d: usize, r: usize, seed: u64) -> DMatrix<f64> {
    if r == 0 {
        return DMatrix::zeros(d, 0);
    }
    let mut rng = SeedPolicy::new(seed).rng(BASIS_STREAM);
    let g = DMatrix::from_fn(d, r, |_, _| gaussian(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let rmat = qr.r();
    for j in 0..r {
        if rmat[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn basis_for(spec: &ManifoldSpec) -> DMatrix<f64> {
    match spec.kind {
        ManifoldKind::SwissRoll => DMatrix::identity(spec.ambient_d, 3),
        _ => seeded_orthonormal_basis(spec.ambient_d, spec.embedding_rank(), spec.seed),
    }
}

pub fn sample_manifold(spec: &ManifoldSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let d = spec.ambient_d;
    let r = spec.embedding_rank();
    let basis = basis_for(spec);
    let variances = spec.tangent_variances();
    let mut rng = SeedPolicy::new(spec.seed).rng(0);
    let mut values = Vec::with_capacity(spec.n * d);
    let mut latent = DVector::zeros(r);
    for _ in 0..spec.n {
        match spec.kind {
            ManifoldKind::SubspaceGaussian => {
                for (z, var) in latent.iter_mut().zip(&variances) {
                    *z = var.sqrt() * gaussian(&mut rng);
                }
            }
            ManifoldKind::KSphere => {
                loop {
                    latent.iter_mut().for_each(|z| *z = gaussian(&mut rng));
                    let norm = latent.norm();
                    if norm > 1e-12 {
                        latent /= norm;
                        break;
                    }
                }
            }
            ManifoldKind::KCube => {
                latent.iter_mut().for_each(|z| *z = rng.random::<f64>());
            }
            ManifoldKind::SwissRoll => {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                let h = 21.0 * rng.random::<f64>();
                latent[0] = SWISS_ROLL_SCALE * t * t.cos();
                latent[1] = SWISS_ROLL_SCALE * h;
                latent[2] = SWISS_ROLL_SCALE * t * t.sin();
            }
        }
        let x = &basis * &latent;
        for v in x.iter() {
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * gaussian(&mut rng)
            } else {
                0.0
            };
            values.push(v + noise);
        }
    }
    let points = PointSet::with_index_ids(values, spec.n, d)?;
    Ok(SyntheticSet {
        points,
        intrinsic_k: spec.intrinsic_k,
        basis,
        spec: spec.clone(),
    })
}

/// Mean and covariance of a subspace_gaussian spec:
/// `0` and `U diag(λ) Uᵀ + σ² I`.
pub fn analytic_covariance(spec: &ManifoldSpec) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if spec.kind != ManifoldKind::SubspaceGaussian {
        return Err(Error::invalid(format!(
            "analytic covariance is only defined for subspace_gaussian, not {}",
            spec.kind
        )));
    }
    spec.validate()?;
    let d = spec.ambient_d;
    let u = basis_for(spec);
    let lambda = DMatrix::from_diagonal(&DVector::from_vec(spec.tangent_variances()));
    let mut cov = &u * lambda * u.transpose();
    for i in 0..d {
        cov[(i, i)] += spec.noise_sigma * spec.noise_sigma;
        for j in (i + 1)..d {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((DVector::zeros(d), cov))
}
