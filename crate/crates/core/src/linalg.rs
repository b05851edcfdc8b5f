//! Dense symmetric-matrix helpers shared by every module.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalue floor for positive (semi)definiteness checks.
pub const TOL_PD: f64 = 1e-10;
/// Singular-value floor, relative to the largest singular value.
pub const TOL_RANK: f64 = 1e-8;
/// Condition-number guard for covariance inversions.
pub const MAX_COND: f64 = 1e12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_square(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols()
}

/// Smallest eigenvalue of the symmetric part of `m`. Empty matrices return +inf.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Symmetric square root of a PSD matrix; eigenvalues below zero are clamped.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return m.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Symmetric inverse square root of a PD matrix.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&l| l <= TOL_PD) {
        return Err(Error::NotPd { name: name.into() });
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

pub fn cholesky(m: &DMatrix<f64>, name: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::NotPd { name: name.into() })
}

/// log det of a PD matrix through its Cholesky factor. `None` if factorization fails.
pub fn logdet(m: &DMatrix<f64>) -> Option<f64> {
    if m.is_empty() {
        return Some(0.0);
    }
    let chol = Cholesky::new(symmetrize(m))?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn logdet_checked(m: &DMatrix<f64>, name: &str) -> Result<f64> {
    logdet(m).ok_or_else(|| Error::NotPd { name: name.into() })
}

/// Spectral condition number of a symmetric matrix (inf when not PD).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Solve `m x = b` for a well-conditioned SPD `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let cond = condition_number(m);
    if !cond.is_finite() || cond > MAX_COND {
        return Err(Error::SingularCovariance { name: name.into(), cond });
    }
    Ok(cholesky(m, name)?.solve(b))
}

pub fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !is_square(m) {
        return Err(Error::DimensionMismatch(format!("{name} is {}x{}", m.nrows(), m.ncols())));
    }
    let min_eig = min_eigenvalue(m);
    if min_eig < -TOL_PD {
        return Err(Error::NotPsd { name: name.into(), min_eig });
    }
    Ok(())
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Square diagonal block `k` of size `n` from a stacked matrix.
pub fn diag_block(m: &DMatrix<f64>, k: usize, n: usize) -> DMatrix<f64> {
    m.view((k * n, k * n), (n, n)).into_owned()
}

pub fn stack(vs: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = vs.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(n);
    let mut i = 0;
    for v in vs {
        out.rows_mut(i, v.len()).copy_from(v);
        i += v.len();
    }
    out
}

pub fn relative_frobenius(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (estimate - reference).norm() / reference.norm()
}

/// Sample covariance (divisor n-1) of row samples.
pub fn sample_covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let n = samples.len();
    let dim = samples[0].len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov / (n as f64 - 1.0)
}

/// Row-major serde for matrices (`[[row], [row], ...]`) and vectors.
pub mod rowmajor {
    use nalgebra::{DMatrix, DVector};
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.iter().copied().collect::<Vec<f64>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
            Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
        }
    }

    pub mod matrices {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            Vec::<Vec<Vec<f64>>>::deserialize(d)?
                .iter()
                .map(|rows| from_rows(rows).map_err(D::Error::custom))
                .collect()
        }
    }
}
