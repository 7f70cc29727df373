use nalgebra::DMatrix;

use super::{dot, Matrix, TensorError};

const MAX_SVD_ITERS: usize = 10_000;

/// Thin SVD `m = u * diag(singular_values) * vt` with `k = min(n, m)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.singular_values) {
                *v *= s;
            }
        }
        us.matmul(&self.vt)
    }
}

/// Full thin SVD with singular values sorted nonincreasing and a fixed sign
/// convention: the first entry of each left singular vector whose magnitude
/// exceeds `1e-12` is nonnegative.
///
/// Golub-Kahan (nalgebra) is tried first; every decomposition is checked by
/// reconstruction and one-sided Jacobi is used when the check fails.
pub fn svd(m: &Matrix) -> Result<SvdResult, TensorError> {
    let (n, p) = m.shape();
    if !m.is_finite() {
        return Err(TensorError::NonFinite);
    }
    if n.min(p) == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(n, 0),
            singular_values: Vec::new(),
            vt: Matrix::zeros(0, p),
        });
    }
    let raw = bidiagonal_svd(m)
        .filter(|r| r.verify(m))
        .or_else(|| jacobi_raw(m).filter(|r| r.verify(m)))
        .ok_or(TensorError::SvdNoConvergence { rows: n, cols: p })?;
    Ok(raw.normalize())
}

const VERIFY_TOL: f64 = 1e-11;

/// Unsorted decomposition before the sign convention is applied.
struct RawSvd {
    u: Matrix,
    s: Vec<f64>,
    vt: Matrix,
}

impl RawSvd {
    fn verify(&self, m: &Matrix) -> bool {
        if self.s.iter().any(|v| !v.is_finite() || *v < -1e-300) {
            return false;
        }
        let result = SvdResult {
            u: self.u.clone(),
            singular_values: self.s.clone(),
            vt: self.vt.clone(),
        };
        let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
        let recon = result.reconstruct().sub(m).frobenius_norm() / scale;
        let k = self.s.len();
        let eye = Matrix::identity(k);
        let u_err = self.u.matmul_tn(&self.u).sub(&eye).max_abs();
        let v_err = self.vt.matmul_nt(&self.vt).sub(&eye).max_abs();
        (recon <= VERIFY_TOL || m.frobenius_norm() == 0.0) && u_err <= VERIFY_TOL && v_err <= VERIFY_TOL
    }

    fn normalize(self) -> SvdResult {
        let (n, k) = self.u.shape();
        let p = self.vt.cols();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| self.s[b].total_cmp(&self.s[a]).then(a.cmp(&b)));
        let mut u_out = Matrix::zeros(n, k);
        let mut vt_out = Matrix::zeros(k, p);
        let mut s_out = Vec::with_capacity(k);
        for (dst, &src) in order.iter().enumerate() {
            let sign = (0..n)
                .map(|r| self.u.get(r, src))
                .find(|v| v.abs() > 1e-12)
                .map_or(1.0, |v| if v < 0.0 { -1.0 } else { 1.0 });
            for r in 0..n {
                u_out.set(r, dst, sign * self.u.get(r, src));
            }
            for c in 0..p {
                vt_out.set(dst, c, sign * self.vt.get(src, c));
            }
            s_out.push(self.s[src].max(0.0));
        }
        SvdResult {
            u: u_out,
            singular_values: s_out,
            vt: vt_out,
        }
    }
}

fn bidiagonal_svd(m: &Matrix) -> Option<RawSvd> {
    let (n, p) = m.shape();
    let dm = DMatrix::from_row_slice(n, p, m.as_slice());
    let eps = 5.0 * f64::EPSILON;
    let dec = nalgebra::linalg::SVD::try_new_unordered(dm, true, true, eps, MAX_SVD_ITERS)?;
    let (u, vt) = (dec.u?, dec.v_t?);
    let k = n.min(p);
    Some(RawSvd {
        u: Matrix::from_fn(n, k, |r, c| u[(r, c)]),
        s: dec.singular_values.iter().copied().collect(),
        vt: Matrix::from_fn(k, p, |r, c| vt[(r, c)]),
    })
}

/// One-sided (Hestenes) Jacobi SVD, the fallback route.
#[cfg(test)]
fn jacobi_svd(m: &Matrix) -> Option<SvdResult> {
    jacobi_raw(m).map(RawSvd::normalize)
}

fn jacobi_raw(m: &Matrix) -> Option<RawSvd> {
    let transposed = m.rows() < m.cols();
    let a = if transposed { m.transpose() } else { m.clone() };
    let (n, k) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut converged = false;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return None;
    }
    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let mut basis: Vec<Option<Vec<f64>>> = cols
        .iter()
        .zip(&sigma)
        .map(|(c, &s)| {
            if s > smax * 1e-14 && s > 0.0 {
                Some(c.iter().map(|x| x / s).collect())
            } else {
                None
            }
        })
        .collect();
    complete_basis(&mut basis, n);
    let sigma: Vec<f64> = sigma
        .iter()
        .zip(&basis)
        .map(|(&s, _)| if s > smax * 1e-14 { s } else { 0.0 })
        .collect();
    let u_cols: Vec<Vec<f64>> = basis.into_iter().map(|b| b.expect("completed")).collect();
    // a = U diag(sigma) V^T with U n x k, V k x k
    let u = Matrix::from_fn(n, k, |r, c| u_cols[c][r]);
    let vmat = Matrix::from_fn(k, k, |r, c| v[c][r]);
    Some(if transposed {
        RawSvd {
            u: vmat,
            s: sigma,
            vt: u.transpose(),
        }
    } else {
        RawSvd {
            u,
            s: sigma,
            vt: vmat.transpose(),
        }
    })
}

fn rotate(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = vecs.split_at_mut(q);
    let vp = &mut head[p];
    let vq = &mut tail[0];
    for (a, b) in vp.iter_mut().zip(vq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot.
fn complete_basis(basis: &mut [Option<Vec<f64>>], n: usize) {
    let mut candidate = 0;
    for i in 0..basis.len() {
        if basis[i].is_some() {
            continue;
        }
        while candidate < n {
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for b in basis.iter().flatten() {
                    let proj = dot(&e, b);
                    e.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                e.iter_mut().for_each(|x| *x /= norm);
                basis[i] = Some(e);
                break;
            }
        }
    }
}

/// Rank-`r` factorization `left * right`, with the singular values folded
/// into `left` (`n x r`) and `right` (`r x m`) holding orthonormal rows.
///
/// `sigma` keeps the folded singular values in nonincreasing order so that
/// truncation can drop the tail without another decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub left: Matrix,
    pub right: Matrix,
    pub sigma: Vec<f64>,
}

impl LowRank {
    pub fn empty(rows: usize, cols: usize) -> Self {
        LowRank {
            left: Matrix::zeros(rows, 0),
            right: Matrix::zeros(0, cols),
            sigma: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn rows(&self) -> usize {
        self.left.rows()
    }

    pub fn cols(&self) -> usize {
        self.right.cols()
    }

    pub fn to_dense(&self) -> Matrix {
        self.left.matmul(&self.right)
    }

    /// Keeps the `keep` leading components.
    pub fn truncate(&self, keep: usize) -> LowRank {
        let keep = keep.min(self.rank());
        let n = self.rows();
        let m = self.cols();
        let left = Matrix::from_fn(n, keep, |r, c| self.left.get(r, c));
        let right = Matrix::from_vec(keep, m, self.right.as_slice()[..keep * m].to_vec())
            .expect("truncated factor has consistent length");
        LowRank {
            left,
            right,
            sigma: self.sigma[..keep].to_vec(),
        }
    }

    /// Parameters needed for factored storage: `r * (n + m)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.rows() + self.cols())
    }

    pub(crate) fn from_svd_prefix(svd: &SvdResult, sigma: &[f64]) -> LowRank {
        let r = sigma.len();
        let n = svd.u.rows();
        let m = svd.vt.cols();
        let left = Matrix::from_fn(n, r, |row, c| svd.u.get(row, c) * sigma[c]);
        let right = Matrix::from_vec(r, m, svd.vt.as_slice()[..r * m].to_vec())
            .expect("prefix of vt has consistent length");
        LowRank {
            left,
            right,
            sigma: sigma.to_vec(),
        }
    }
}
