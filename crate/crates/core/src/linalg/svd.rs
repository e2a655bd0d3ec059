use super::{complete_basis, descending_order, dot, norm, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `m = U·diag(s)·Vᵀ` with `k = min(rows, cols)` singular triplets.
#[derive(Clone, Debug)]
pub struct Svd {
    /// rows × k, orthonormal columns.
    pub u: Matrix,
    /// Descending, nonnegative, length k.
    pub singular_values: Vec<f64>,
    /// cols × k, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for a in 0..k {
                us[(i, a)] *= self.singular_values[a];
            }
        }
        us.matmul(&self.v.transpose()).expect("svd factor shapes agree")
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::Parameter("svd input contains non-finite entries".into()));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        })
    }
}

/// Requires rows ≥ cols. Works on the columns of `m`, stored as contiguous
/// rows of the transpose.
fn jacobi_tall(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();
    let eps = f64::EPSILON;
    let mut converged = cols < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Convergence {
                routine: "jacobi svd",
                iterations: sweeps,
            });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let sigma: Vec<f64> = a.iter().map(|col| norm(col)).collect();
    let order = descending_order(&sigma);
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut null_slots = Vec::new();
    let mut values = Vec::with_capacity(cols);
    for (slot, &j) in order.iter().enumerate() {
        let s = sigma[j];
        values.push(s);
        if s > smax * rows as f64 * eps && s > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(Vec::new());
            null_slots.push(slot);
        }
    }
    if !null_slots.is_empty() {
        let mut basis: Vec<Vec<f64>> = u_cols.iter().filter(|c| !c.is_empty()).cloned().collect();
        let have = basis.len();
        complete_basis(&mut basis, rows);
        for (slot, extra) in null_slots.into_iter().zip(basis.into_iter().skip(have)) {
            u_cols[slot] = extra;
        }
    }
    let u = Matrix::from_fn(rows, cols, |i, k| u_cols[k][i]);
    let vm = Matrix::from_fn(cols, cols, |i, k| v[order[k]][i]);
    Ok(Svd {
        u,
        singular_values: values,
        v: vm,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}
