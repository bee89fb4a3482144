//! Dense least-squares kernels on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Singular values below this multiple of the largest count as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LsSolution {
    pub beta: DVector<f64>,
    /// `(X'WX)^{-1}`
    pub bread: DMatrix<f64>,
    pub condition_number: f64,
}

fn scaled(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xs = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        for j in 0..xs.ncols() {
            xs[(i, j)] *= s;
        }
    }
    xs
}

/// Names of columns that are (numerically) linear combinations of earlier ones.
fn collinear_columns(xs: &DMatrix<f64>, tol: f64, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = vec![];
    let mut out = vec![];
    for j in 0..xs.ncols() {
        let mut v = xs.column(j).into_owned();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= tol {
            out.push(names.get(j).cloned().unwrap_or_else(|| format!("x{j}")));
        } else {
            basis.push(v / norm);
        }
    }
    out
}

/// Weighted least squares via SVD of `sqrt(W) X`, refusing rank-deficient designs.
pub fn solve_wls(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], names: &[String]) -> Result<LsSolution> {
    let k = x.ncols();
    if k == 0 {
        return Ok(LsSolution {
            beta: DVector::zeros(0),
            bread: DMatrix::zeros(0, 0),
            condition_number: 1.0,
        });
    }
    if x.nrows() < k {
        return Err(Error::RankDeficient(names.to_vec()));
    }
    let xs = scaled(x, w);
    let ys = DVector::from_iterator(y.len(), y.iter().zip(w).map(|(v, wi)| v * wi.sqrt()));
    let svd = xs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let tol = RANK_TOL * smax;
    if !(smax > 0.0) || smin <= tol {
        let mut bad = collinear_columns(&xs, tol, names);
        if bad.is_empty() {
            bad.push(names.last().cloned().unwrap_or_default());
        }
        return Err(Error::RankDeficient(bad));
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let uty = u.transpose() * &ys;
    let mut coef = DVector::zeros(k);
    for i in 0..k {
        coef[i] = uty[i] / svd.singular_values[i];
    }
    let beta = vt.transpose() * coef;
    let mut vs = vt.transpose();
    for i in 0..k {
        let s2 = svd.singular_values[i] * svd.singular_values[i];
        for r in 0..k {
            vs[(r, i)] /= s2;
        }
    }
    let bread = symmetrize(&(vs * vt));
    Ok(LsSolution {
        beta,
        bread,
        condition_number: smax / smin,
    })
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric PSD square root and inverse square root via eigendecomposition.
/// Eigenvalues below `RANK_TOL * max` are treated as zero in the inverse.
pub fn sym_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let n = m.nrows();
    let mut root = DMatrix::zeros(n, n);
    let mut inv_root = DMatrix::zeros(n, n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let l = l.max(0.0);
        root += &v * v.transpose() * l.sqrt();
        if l > RANK_TOL * lmax {
            inv_root += &v * v.transpose() / l.sqrt();
        }
    }
    (root, inv_root)
}

/// Moore-Penrose inverse of a symmetric PSD matrix; `None` if it is
/// numerically zero.
pub fn pinv_sym(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if !(lmax > 0.0) {
        return None;
    }
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > RANK_TOL * lmax {
            let v = eig.eigenvectors.column(i);
            out += &v * v.transpose() / l;
        }
    }
    Some(out)
}
