//! Numerical kernels shared by every estimator.
//!
//! Dense decompositions are delegated to `nalgebra`; this module adds the
//! ordering, clamping and validation rules the estimators rely on, plus an
//! exhaustive nearest-neighbour search with a fixed tie-break so that
//! neighbour-based estimates are reproducible bit for bit.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::domain::PointSet;
use crate::error::{Error, Result};

/// Non-increasing, non-negative spectrum together with the shape it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub source_shape: (usize, usize),
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn largest(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::invalid(format!("{what}: empty matrix")));
    }
    if let Some(p) = m.iter().position(|v| !v.is_finite()) {
        // nalgebra storage is column-major
        return Err(Error::invalid(format!(
            "{what}: non-finite entry at ({}, {})",
            p % m.nrows(),
            p / m.nrows()
        )));
    }
    Ok(())
}

fn sort_descending(v: &mut [f64]) {
    v.sort_by(|a, b| b.total_cmp(a));
}

/// Singular values of `m`, descending. Length is `min(rows, cols)`.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Spectrum> {
    check_finite(m, "singular_values")?;
    // Bidiagonalisation converges faster on the tall orientation.
    let mut values: Vec<f64> = if m.nrows() >= m.ncols() {
        m.clone().singular_values().iter().copied().collect()
    } else {
        m.transpose().singular_values().iter().copied().collect()
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("SVD produced non-finite singular values"));
    }
    values.iter_mut().for_each(|v| *v = v.abs());
    sort_descending(&mut values);
    Ok(Spectrum {
        values,
        source_shape: (m.nrows(), m.ncols()),
    })
}

/// Relative asymmetry tolerated by [`sym_eigenvalues`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues in `[-NEG_CLAMP * λ_max, 0)` are treated as rounding noise.
pub const NEG_CLAMP: f64 = 1e-12;

/// Eigenvalues of a symmetric matrix, descending, with rounding-level
/// negatives clamped to zero.
pub fn sym_eigenvalues(c: &DMatrix<f64>) -> Result<Spectrum> {
    check_finite(c, "sym_eigenvalues")?;
    if !c.is_square() {
        return Err(Error::invalid(format!(
            "sym_eigenvalues: matrix is {}x{}, not square",
            c.nrows(),
            c.ncols()
        )));
    }
    let scale = c.amax().max(1.0);
    let d = c.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            if (c[(i, j)] - c[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "sym_eigenvalues: asymmetric at ({i}, {j}): {} vs {}",
                    c[(i, j)],
                    c[(j, i)]
                )));
            }
        }
    }
    let mut values: Vec<f64> = SymmetricEigen::new(c.clone()).eigenvalues.iter().copied().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("eigen-solver produced non-finite values"));
    }
    sort_descending(&mut values);
    let lmax = values[0].max(0.0);
    for v in values.iter_mut().filter(|v| **v < 0.0) {
        if *v < -NEG_CLAMP * lmax || lmax == 0.0 && *v < -f64::MIN_POSITIVE {
            return Err(Error::numerical(format!(
                "matrix is not positive semi-definite: eigenvalue {v} with largest {lmax}"
            )));
        }
        *v = 0.0;
    }
    Ok(Spectrum {
        values,
        source_shape: (d, d),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The `m` nearest other points to `query`, ascending by distance with ties
/// broken by ascending sample index. Exhaustive search.
pub fn knn(pts: &PointSet, query: usize, m: usize) -> Result<Vec<Neighbor>> {
    let n = pts.n();
    if query >= n {
        return Err(Error::invalid(format!("query index {query} out of range for {n} samples")));
    }
    if m == 0 || m >= n {
        return Err(Error::invalid(format!(
            "need 1 <= m <= n - 1 neighbours, got m = {m} with n = {n}"
        )));
    }
    let q = pts.row(query);
    let mut all: Vec<Neighbor> = pts
        .rows()
        .enumerate()
        .filter(|(i, _)| *i != query)
        .map(|(index, row)| Neighbor {
            index,
            distance: squared_distance(q, row),
        })
        .collect();
    let order = |a: &Neighbor, b: &Neighbor| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.index.cmp(&b.index))
    };
    if m < all.len() {
        all.select_nth_unstable_by(m - 1, order);
        all.truncate(m);
    }
    all.sort_by(order);
    for nb in &mut all {
        nb.distance = nb.distance.sqrt();
    }
    Ok(all)
}

/// Ascending distances `T_1..T_m` to the `m` nearest other points.
pub fn knn_distances(pts: &PointSet, query: usize, m: usize) -> Result<Vec<f64>> {
    Ok(knn(pts, query, m)?.into_iter().map(|nb| nb.distance).collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Population covariance (divisor `m`) of the centre and its `m - 1` nearest
/// neighbours.
pub fn local_covariance(pts: &PointSet, center: usize, m: usize) -> Result<DMatrix<f64>> {
    if m < 2 {
        return Err(Error::invalid(format!("local covariance needs m >= 2, got {m}")));
    }
    let neighbours = knn(pts, center, m - 1)?;
    let members: Vec<&[f64]> = std::iter::once(pts.row(center))
        .chain(neighbours.iter().map(|nb| pts.row(nb.index)))
        .collect();
    Ok(covariance_of(&members, pts.dim()))
}

/// Population covariance of a list of rows.
pub(crate) fn covariance_of(rows: &[&[f64]], d: usize) -> DMatrix<f64> {
    let m = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (acc, v) in mean.iter_mut().zip(r.iter()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let centered = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j] - mean[j]);
    let mut cov = centered.tr_mul(&centered) / m;
    // exact symmetry for the eigen-solver's check
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}
