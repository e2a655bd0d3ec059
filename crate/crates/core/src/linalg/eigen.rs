use num_complex::Complex64;

use super::{descending_order, Matrix};
use crate::error::{Error, Result};

/// Eigenvalues of a symmetric matrix in descending order with unit
/// eigenvectors.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Cyclic Jacobi rotations. Only the upper triangle is trusted to be
/// meaningful; the input is symmetrized first.
pub fn symmetric_eigen(m: &Matrix) -> Result<SymmetricEigen> {
    if !m.is_square() {
        return Err(Error::dim("symmetric eigen input", "square", format!("{:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::Parameter("eigen input contains non-finite entries".into()));
    }
    let n = m.rows();
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    const MAX_SWEEPS: usize = 100;
    let mut sweep = 0;
    loop {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale || off == 0.0 {
            break;
        }
        if sweep == MAX_SWEEPS {
            return Err(Error::Convergence {
                routine: "jacobi symmetric eigen",
                iterations: sweep,
            });
        }
        sweep += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    a[(r, p)] = c * arp - s * arq;
                    a[(r, q)] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[(p, r)];
                    let aqr = a[(q, r)];
                    a[(p, r)] = c * apr - s * aqr;
                    a[(q, r)] = s * apr + c * aqr;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = c * vrp - s * vrq;
                    v[(r, q)] = s * vrp + c * vrq;
                }
            }
        }
    }
    let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let order = descending_order(&diag);
    Ok(SymmetricEigen {
        values: order.iter().map(|&i| diag[i]).collect(),
        vectors: order.iter().map(|&i| v.column(i)).collect(),
    })
}

/// Full eigendecomposition `m = R·Λ·L` of a general real matrix.
#[derive(Clone, Debug)]
pub struct ComplexSpectrum {
    /// Sorted by decreasing magnitude, ties in original order.
    pub eigenvalues: Vec<Complex64>,
    /// `right_vectors[a]` is the unit-norm right eigenvector r_a.
    pub right_vectors: Vec<Vec<Complex64>>,
    /// `left_vectors[a]` is row a of `L = R⁻¹`, so ℓ_a·r_b = δ_ab.
    pub left_vectors: Vec<Vec<Complex64>>,
    /// Set when R is numerically singular (defective or nearly defective
    /// input); L is then unreliable.
    pub near_defective: bool,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// max_a ‖m·r_a − λ_a r_a‖.
    pub fn max_residual(&self, m: &Matrix) -> f64 {
        let n = m.rows();
        let mut worst: f64 = 0.0;
        for (lam, r) in self.eigenvalues.iter().zip(&self.right_vectors) {
            let mut acc = 0.0;
            for i in 0..n {
                let mut s = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    s += r[j] * m[(i, j)];
                }
                acc += (s - lam * r[i]).norm_sqr();
            }
            worst = worst.max(acc.sqrt());
        }
        worst
    }

    /// max |(L·R − I)_ab|.
    pub fn biorthogonality_error(&self) -> f64 {
        let n = self.len();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let s: Complex64 = self.left_vectors[a]
                    .iter()
                    .zip(&self.right_vectors[b])
                    .map(|(l, r)| l * r)
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((s - target).norm());
            }
        }
        worst
    }
}

const MAX_QR_ITERATIONS_PER_EIGENVALUE: usize = 60;

/// Hessenberg reduction by Householder reflections followed by Francis
/// double-shift QR to real Schur form, with eigenvectors recovered by
/// back-substitution (the EISPACK orthes/hqr2 scheme).
pub fn eig_nonsymmetric(m: &Matrix) -> Result<ComplexSpectrum> {
    if !m.is_square() {
        return Err(Error::dim("eigen input", "square", format!("{:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::Parameter("eigen input contains non-finite entries".into()));
    }
    let n = m.rows();
    if n == 0 {
        return Ok(ComplexSpectrum {
            eigenvalues: vec![],
            right_vectors: vec![],
            left_vectors: vec![],
            near_defective: false,
        });
    }
    let mut h = m.clone();
    let mut v = Matrix::identity(n);
    orthes(&mut h, &mut v);
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    hqr2(&mut h, &mut v, &mut d, &mut e)?;

    // Unpack the real Schur eigenvectors into complex columns.
    let mut values = Vec::with_capacity(n);
    let mut vectors: Vec<Vec<Complex64>> = Vec::with_capacity(n);
    let mut j = 0;
    while j < n {
        if e[j] == 0.0 || j + 1 == n {
            values.push(Complex64::new(d[j], 0.0));
            vectors.push((0..n).map(|i| Complex64::new(v[(i, j)], 0.0)).collect());
            j += 1;
        } else {
            // Columns j and j+1 hold the real and imaginary parts of the
            // eigenvector belonging to d[j] + i·e[j] (e[j] > 0).
            let lam = Complex64::new(d[j], e[j]);
            let vec: Vec<Complex64> = (0..n).map(|i| Complex64::new(v[(i, j)], v[(i, j + 1)])).collect();
            let conj: Vec<Complex64> = vec.iter().map(|z| z.conj()).collect();
            values.push(lam);
            vectors.push(vec);
            values.push(lam.conj());
            vectors.push(conj);
            j += 2;
        }
    }
    for vec in vectors.iter_mut() {
        normalize_complex(vec);
    }

    let mags: Vec<f64> = values.iter().map(|z| z.norm()).collect();
    let order = descending_order(&mags);
    let eigenvalues: Vec<Complex64> = order.iter().map(|&i| values[i]).collect();
    let right_vectors: Vec<Vec<Complex64>> = order.iter().map(|&i| vectors[i].clone()).collect();

    let (left_vectors, singular) = complex_inverse_rows(&right_vectors);
    let mut spectrum = ComplexSpectrum {
        eigenvalues,
        right_vectors,
        left_vectors,
        near_defective: singular,
    };
    if !spectrum.near_defective && spectrum.biorthogonality_error() > 1e-6 {
        spectrum.near_defective = true;
    }
    Ok(spectrum)
}

/// Scale to unit 2-norm and rotate the phase so the largest entry is real
/// and positive.
fn normalize_complex(v: &mut [Complex64]) {
    let nrm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if nrm == 0.0 {
        return;
    }
    let mut big = Complex64::new(0.0, 0.0);
    for z in v.iter() {
        if z.norm() > big.norm() {
            big = *z;
        }
    }
    let phase = big.conj() / big.norm();
    for z in v.iter_mut() {
        *z = *z * phase / nrm;
    }
}

/// Rows of the inverse of the matrix whose columns are `cols`. Gaussian
/// elimination with partial pivoting on the augmented system.
fn complex_inverse_rows(cols: &[Vec<Complex64>]) -> (Vec<Vec<Complex64>>, bool) {
    let n = cols.len();
    // a[i][j] = cols[j][i]
    let mut a: Vec<Vec<Complex64>> = (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect();
    let mut inv: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0))
                .collect()
        })
        .collect();
    let mut singular = false;
    for k in 0..n {
        let mut piv = k;
        for i in k + 1..n {
            if a[i][k].norm() > a[piv][k].norm() {
                piv = i;
            }
        }
        a.swap(k, piv);
        inv.swap(k, piv);
        let p = a[k][k];
        if p.norm() < 1e-13 {
            singular = true;
            if p.norm() == 0.0 {
                continue;
            }
        }
        for j in 0..n {
            a[k][j] /= p;
            inv[k][j] /= p;
        }
        for i in 0..n {
            if i == k {
                continue;
            }
            let f = a[i][k];
            if f.norm() == 0.0 {
                continue;
            }
            for j in 0..n {
                let akj = a[k][j];
                let ikj = inv[k][j];
                a[i][j] -= f * akj;
                inv[i][j] -= f * ikj;
            }
        }
    }
    (inv, singular)
}

fn orthes(h: &mut Matrix, v: &mut Matrix) {
    let n = h.rows();
    if n < 3 {
        return;
    }
    let low = 0;
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in low + 1..high {
        let scale: f64 = (m..=high).map(|i| h[(i, m - 1)].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hh;
            for i in m..=high {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hh;
            for j in m..=high {
                h[(i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[(m, m - 1)] = scale * g;
    }
    for m in (low + 1..high).rev() {
        if h[(m, m - 1)] == 0.0 {
            continue;
        }
        for i in m + 1..=high {
            ort[i] = h[(i, m - 1)];
        }
        for j in m..=high {
            let mut g = 0.0;
            for i in m..=high {
                g += ort[i] * v[(i, j)];
            }
            g = (g / ort[m]) / h[(m, m - 1)];
            for i in m..=high {
                v[(i, j)] += g * ort[i];
            }
        }
    }
}

fn cdiv(xr: f64, xi: f64, yr: f64, yi: f64) -> (f64, f64) {
    if yr.abs() > yi.abs() {
        let r = yi / yr;
        let d = yr + r * yi;
        ((xr + r * xi) / d, (xi - r * xr) / d)
    } else {
        let r = yr / yi;
        let d = yi + r * yr;
        ((r * xr + xi) / d, (r * xi - xr) / d)
    }
}

#[allow(clippy::many_single_char_names)]
fn hqr2(h: &mut Matrix, v: &mut Matrix, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let nn = h.rows();
    let mut n = nn as isize - 1;
    let low: isize = 0;
    let high = nn - 1;
    let eps = f64::EPSILON;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut t, mut w, mut x, mut y);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }

    let mut iter = 0usize;
    let mut total_iter = 0usize;
    let cap = MAX_QR_ITERATIONS_PER_EIGENVALUE * nn.max(1);
    while n >= low {
        let nu = n as usize;
        // Look for a single small sub-diagonal element.
        let mut l = n;
        while l > low {
            let lu = l as usize;
            s = h[(lu - 1, lu - 1)].abs() + h[(lu, lu)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(lu, lu - 1)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // One root found.
            h[(nu, nu)] += exshift;
            d[nu] = h[(nu, nu)];
            e[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // Two roots found.
            w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            p = (h[(nu - 1, nu - 1)] - h[(nu, nu)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(nu, nu)] += exshift;
            h[(nu - 1, nu - 1)] += exshift;
            x = h[(nu, nu)];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                d[nu - 1] = x + z;
                d[nu] = d[nu - 1];
                if z != 0.0 {
                    d[nu] = x - w / z;
                }
                e[nu - 1] = 0.0;
                e[nu] = 0.0;
                x = h[(nu, nu - 1)];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in nu - 1..nn {
                    z = h[(nu - 1, j)];
                    h[(nu - 1, j)] = q * z + p * h[(nu, j)];
                    h[(nu, j)] = q * h[(nu, j)] - p * z;
                }
                for i in 0..=nu {
                    z = h[(i, nu - 1)];
                    h[(i, nu - 1)] = q * z + p * h[(i, nu)];
                    h[(i, nu)] = q * h[(i, nu)] - p * z;
                }
                for i in 0..=high {
                    z = v[(i, nu - 1)];
                    v[(i, nu - 1)] = q * z + p * v[(i, nu)];
                    v[(i, nu)] = q * v[(i, nu)] - p * z;
                }
            } else {
                d[nu - 1] = x + p;
                d[nu] = x + p;
                e[nu - 1] = z;
                e[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            // No convergence yet: form shift.
            x = h[(nu, nu)];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[(nu - 1, nu - 1)];
                w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            }
            if iter == 10 {
                exshift += x;
                for i in 0..=nu {
                    h[(i, i)] -= x;
                }
                s = h[(nu, nu - 1)].abs() + h[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in 0..=nu {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;
            total_iter += 1;
            if total_iter > cap {
                return Err(Error::Convergence {
                    routine: "hessenberg qr",
                    iterations: total_iter,
                });
            }

            // Look for two consecutive small sub-diagonal elements.
            let mut m = n - 2;
            while m >= l {
                let mu = m as usize;
                z = h[(mu, mu)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(mu + 1, mu)] + h[(mu, mu + 1)];
                q = h[(mu + 1, mu + 1)] - z - r - s;
                r = h[(mu + 2, mu + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(mu, mu - 1)].abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (h[(mu - 1, mu - 1)].abs() + z.abs() + h[(mu + 1, mu + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }
            let mu = m as usize;
            for i in mu + 2..=nu {
                h[(i, i - 2)] = 0.0;
                if i > mu + 2 {
                    h[(i, i - 3)] = 0.0;
                }
            }

            // Double QR step on rows l..=n and columns m..=n.
            let mut k = mu;
            while k < nu {
                let notlast = k != nu - 1;
                if k != mu {
                    p = h[(k, k - 1)];
                    q = h[(k + 1, k - 1)];
                    r = if notlast { h[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != mu {
                        h[(k, k - 1)] = -s * x;
                    } else if l != m {
                        h[(k, k - 1)] = -h[(k, k - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..nn {
                        p = h[(k, j)] + q * h[(k + 1, j)];
                        if notlast {
                            p += r * h[(k + 2, j)];
                            h[(k + 2, j)] -= p * z;
                        }
                        h[(k, j)] -= p * x;
                        h[(k + 1, j)] -= p * y;
                    }
                    for i in 0..=nu.min(k + 3) {
                        p = x * h[(i, k)] + y * h[(i, k + 1)];
                        if notlast {
                            p += z * h[(i, k + 2)];
                            h[(i, k + 2)] -= p * r;
                        }
                        h[(i, k)] -= p;
                        h[(i, k + 1)] -= p * q;
                    }
                    for i in 0..=high {
                        p = x * v[(i, k)] + y * v[(i, k + 1)];
                        if notlast {
                            p += z * v[(i, k + 2)];
                            v[(i, k + 2)] -= p * r;
                        }
                        v[(i, k)] -= p;
                        v[(i, k + 1)] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }

    // Back-substitute to find vectors of the upper triangular form.
    if norm == 0.0 {
        return Ok(());
    }
    for nb in (0..nn).rev() {
        p = d[nb];
        q = e[nb];
        if q == 0.0 {
            let mut l = nb;
            h[(nb, nb)] = 1.0;
            for i in (0..nb).rev() {
                w = h[(i, i)] - p;
                r = 0.0;
                for j in l..=nb {
                    r += h[(i, j)] * h[(j, nb)];
                }
                if e[i] < 0.0 {
                    z = w;
                    s = r;
                } else {
                    l = i;
                    if e[i] == 0.0 {
                        h[(i, nb)] = if w != 0.0 { -r / w } else { -r / (eps * norm) };
                    } else {
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        q = (d[i] - p) * (d[i] - p) + e[i] * e[i];
                        t = (x * s - z * r) / q;
                        h[(i, nb)] = t;
                        h[(i + 1, nb)] = if x.abs() > z.abs() {
                            (-r - w * t) / x
                        } else {
                            (-s - y * t) / z
                        };
                    }
                    t = h[(i, nb)].abs();
                    if (eps * t) * t > 1.0 {
                        for j in i..=nb {
                            h[(j, nb)] /= t;
                        }
                    }
                }
            }
        } else if q < 0.0 {
            let mut l = nb - 1;
            if h[(nb, nb - 1)].abs() > h[(nb - 1, nb)].abs() {
                h[(nb - 1, nb - 1)] = q / h[(nb, nb - 1)];
                h[(nb - 1, nb)] = -(h[(nb, nb)] - p) / h[(nb, nb - 1)];
            } else {
                let (cr, ci) = cdiv(0.0, -h[(nb - 1, nb)], h[(nb - 1, nb - 1)] - p, q);
                h[(nb - 1, nb - 1)] = cr;
                h[(nb - 1, nb)] = ci;
            }
            h[(nb, nb - 1)] = 0.0;
            h[(nb, nb)] = 1.0;
            for i in (0..nb.saturating_sub(1)).rev() {
                let mut ra = 0.0;
                let mut sa = 0.0;
                for j in l..=nb {
                    ra += h[(i, j)] * h[(j, nb - 1)];
                    sa += h[(i, j)] * h[(j, nb)];
                }
                w = h[(i, i)] - p;
                if e[i] < 0.0 {
                    z = w;
                    r = ra;
                    s = sa;
                } else {
                    l = i;
                    if e[i] == 0.0 {
                        let (cr, ci) = cdiv(-ra, -sa, w, q);
                        h[(i, nb - 1)] = cr;
                        h[(i, nb)] = ci;
                    } else {
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        let mut vr = (d[i] - p) * (d[i] - p) + e[i] * e[i] - q * q;
                        let vi = (d[i] - p) * 2.0 * q;
                        if vr == 0.0 && vi == 0.0 {
                            vr = eps * norm * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                        }
                        let (cr, ci) = cdiv(x * r - z * ra + q * sa, x * s - z * sa - q * ra, vr, vi);
                        h[(i, nb - 1)] = cr;
                        h[(i, nb)] = ci;
                        if x.abs() > z.abs() + q.abs() {
                            h[(i + 1, nb - 1)] = (-ra - w * h[(i, nb - 1)] + q * h[(i, nb)]) / x;
                            h[(i + 1, nb)] = (-sa - w * h[(i, nb)] - q * h[(i, nb - 1)]) / x;
                        } else {
                            let (cr, ci) = cdiv(-r - y * h[(i, nb - 1)], -s - y * h[(i, nb)], z, q);
                            h[(i + 1, nb - 1)] = cr;
                            h[(i + 1, nb)] = ci;
                        }
                    }
                    t = h[(i, nb - 1)].abs().max(h[(i, nb)].abs());
                    if (eps * t) * t > 1.0 {
                        for j in i..=nb {
                            h[(j, nb - 1)] /= t;
                            h[(j, nb)] /= t;
                        }
                    }
                }
            }
        }
    }

    // Back transformation to eigenvectors of the original matrix.
    for j in (0..nn).rev() {
        for i in 0..=high {
            let mut acc = 0.0;
            for k in 0..=j.min(high) {
                acc += v[(i, k)] * h[(k, j)];
            }
            v[(i, j)] = acc;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn diagonal_matrix() {
        let s = eig_nonsymmetric(&Matrix::diag(&[0.5, 0.9])).unwrap();
        assert!((s.eigenvalues[0] - Complex64::new(0.9, 0.0)).norm() < 1e-15);
        assert!((s.eigenvalues[1] - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        assert!((s.right_vectors[0][1].norm() - 1.0).abs() < 1e-15);
        assert!(s.right_vectors[0][0].norm() < 1e-15);
        assert!(!s.near_defective);
    }

    #[test]
    fn scaled_rotation() {
        let (rho, theta) = (0.8f64, 0.3f64);
        let m = Matrix::from_rows(&[
            [rho * theta.cos(), -rho * theta.sin()],
            [rho * theta.sin(), rho * theta.cos()],
        ])
        .unwrap();
        let s = eig_nonsymmetric(&m).unwrap();
        let expected = Complex64::from_polar(rho, theta);
        assert!((s.eigenvalues[0] - expected).norm() < 1e-14);
        assert!((s.eigenvalues[1] - expected.conj()).norm() < 1e-14);
        assert!(s.max_residual(&m) < 1e-14);
        assert!(s.biorthogonality_error() < 1e-12);
    }

    #[test]
    fn random_matrices_have_small_residuals() {
        for (n, seed) in [(3, 1), (8, 2), (17, 3), (64, 4), (128, 5)] {
            let m = random(n, seed);
            let s = eig_nonsymmetric(&m).unwrap();
            assert_eq!(s.len(), n);
            assert!(s.max_residual(&m) <= 1e-9 * m.frobenius_norm(), "n={n}");
            assert!(s.biorthogonality_error() < 1e-8, "n={n}");
            let mags: Vec<f64> = s.eigenvalues.iter().map(|z| z.norm()).collect();
            assert!(mags.windows(2).all(|w| w[0] >= w[1]));
            // trace check
            let tr: f64 = (0..n).map(|i| m[(i, i)]).sum();
            let sum: Complex64 = s.eigenvalues.iter().sum();
            assert!((sum.re - tr).abs() < 1e-9 * n as f64 && sum.im.abs() < 1e-9 * n as f64);
        }
    }

    #[test]
    fn conjugate_pairs_for_real_input() {
        let m = random(9, 42);
        let s = eig_nonsymmetric(&m).unwrap();
        for lam in &s.eigenvalues {
            if lam.im.abs() > 1e-12 {
                assert!(s.eigenvalues.iter().any(|o| (o - lam.conj()).norm() < 1e-10));
            }
        }
    }

    #[test]
    fn symmetric_input_has_real_spectrum() {
        let a = random(10, 9);
        let m = Matrix::from_fn(10, 10, |i, j| a[(i, j)] + a[(j, i)]);
        let s = eig_nonsymmetric(&m).unwrap();
        for lam in &s.eigenvalues {
            assert!(lam.im.abs() < 1e-8 * m.frobenius_norm());
        }
        let sym = symmetric_eigen(&m).unwrap();
        let mut a: Vec<f64> = s.eigenvalues.iter().map(|z| z.re).collect();
        let mut b = sym.values.clone();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn defective_matrix_is_flagged() {
        let m = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        let s = eig_nonsymmetric(&m).unwrap();
        assert!(s.near_defective);
    }

    #[test]
    fn multiple_eigenvalue() {
        let m = Matrix::identity(5).scaled(0.5);
        let s = eig_nonsymmetric(&m).unwrap();
        assert!(s.eigenvalues.iter().all(|z| (z - 0.5).norm() < 1e-15));
        assert!(!s.near_defective);
    }

    #[test]
    fn symmetric_jacobi_reconstructs() {
        let a = random(12, 5);
        let m = a.matmul(&a.transpose()).unwrap();
        let e = symmetric_eigen(&m).unwrap();
        for (val, vec) in e.values.iter().zip(&e.vectors) {
            let mv = m.matvec(vec).unwrap();
            let res: f64 = mv.iter().zip(vec).map(|(x, v)| (x - val * v).powi(2)).sum::<f64>().sqrt();
            assert!(res < 1e-10 * m.frobenius_norm());
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }
}
