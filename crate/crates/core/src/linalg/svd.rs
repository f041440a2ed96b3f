//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations,
//! plus the Moore-Penrose pseudo-inverse built on it.
//!
//! The rotations always run on the tall orientation of the input (`p >= q`),
//! orthogonalizing its `q` columns while accumulating the right rotations.
//! The thin left factor is then completed to a full orthonormal basis with
//! Householder reflections, so both `U` and `V` come out square.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;

/// Relative cutoff used by [`pinv`] and [`numerical_rank`]: singular values
/// at or below `PINV_RTOL * max(rows, cols) * sigma_max` are treated as zero.
pub const PINV_RTOL: f64 = 1e-12;

/// `W = U · diag(sigma) · Vᵀ` with `U` n×n, `V` m×m and `sigma` of length
/// `min(n, m)`, sorted descending.
///
/// Sign convention: in every column of `U` the entry of largest magnitude is
/// non-negative (first such entry on ties); paired columns of `V` follow.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    u: Matrix,
    sigma: Vec<f64>,
    v: Matrix,
}

impl SvdFactors {
    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    /// Number of singular values, `min(n, m)`.
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// First `r` left singular vectors (n×r).
    pub fn u_leading(&self, r: usize) -> Matrix {
        self.u.columns(0, r)
    }

    /// First `r` right singular vectors (m×r).
    pub fn v_leading(&self, r: usize) -> Matrix {
        self.v.columns(0, r)
    }

    /// `U_k · diag(values) · V_kᵀ` for a replacement spectrum of length `k`.
    pub fn compose(&self, values: &[f64]) -> Result<Matrix> {
        let k = self.k();
        if values.len() != k {
            return Err(Error::shape("SvdFactors::compose", format!("{} values for {k} singular triplets", values.len())));
        }
        self.u_leading(k).scale_cols(values)?.matmul_t(&self.v_leading(k))
    }

    pub fn reconstruct(&self) -> Matrix {
        self.compose(&self.sigma).expect("factors are shape-consistent")
    }

    /// Count of singular values above `rtol * max(n, m) * sigma_max`.
    pub fn rank(&self, rtol: f64) -> usize {
        let cutoff = self.cutoff(rtol);
        self.sigma.iter().filter(|&&s| s > cutoff).count()
    }

    fn cutoff(&self, rtol: f64) -> f64 {
        let dim = self.u.rows().max(self.v.rows()) as f64;
        rtol * dim * self.sigma.first().copied().unwrap_or(0.0)
    }
}

pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    if !w.is_finite() {
        return Err(Error::NonFinite("svd"));
    }
    let (n, m) = w.shape();
    // Columns of the tall orientation: W itself when n > m, Wᵀ otherwise.
    let tall = n > m;
    let (p, q) = if tall { (n, m) } else { (m, n) };
    let mut cols: Vec<Vec<f64>> = (0..q)
        .map(|j| if tall { w.column(j) } else { w.row(j).to_vec() })
        .collect();
    let mut rot: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    jacobi_sweeps(&mut cols, &mut rot);

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = sigma[0];
    let degenerate = sigma_max * f64::EPSILON;

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(p);
    for (&j, &s) in order.iter().zip(&sigma) {
        if s > degenerate && s > 0.0 {
            left.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            break;
        }
    }
    let complement = orthonormal_complement(&left, p);
    left.extend(complement);
    let right: Vec<Vec<f64>> = order.iter().map(|&j| rot[j].clone()).collect();

    // In the tall orientation `left` pairs with the rows of W; otherwise the
    // roles swap.
    let (mut u_cols, mut v_cols) = if tall { (left, right) } else { (right, left) };
    let k = q;
    for j in 0..u_cols.len() {
        if leading_entry_negative(&u_cols[j]) {
            negate(&mut u_cols[j]);
            if j < k {
                negate(&mut v_cols[j]);
            }
        }
    }
    for col in v_cols.iter_mut().skip(k) {
        if leading_entry_negative(col) {
            negate(col);
        }
    }

    Ok(SvdFactors {
        u: from_columns(&u_cols),
        sigma,
        v: from_columns(&v_cols),
    })
}

/// Moore-Penrose pseudo-inverse `V · Σ† · Uᵀ` with the [`PINV_RTOL`] cutoff.
pub fn pinv(w: &Matrix) -> Result<Matrix> {
    let f = svd(w)?;
    let (n, m) = w.shape();
    let cutoff = f.cutoff(PINV_RTOL);
    let mut out = vec![0.0; m * n];
    for (i, &s) in f.sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for a in 0..m {
            let va = f.v.get(a, i) * inv;
            if va == 0.0 {
                continue;
            }
            let row = &mut out[a * n..(a + 1) * n];
            for (b, o) in row.iter_mut().enumerate() {
                *o += va * f.u.get(b, i);
            }
        }
    }
    Matrix::new(m, n, out)
}

pub fn numerical_rank(w: &Matrix) -> Result<usize> {
    Ok(svd(w)?.rank(PINV_RTOL))
}

fn jacobi_sweeps(cols: &mut [Vec<f64>], rot: &mut [Vec<f64>]) -> usize {
    let q = cols.len();
    let p = cols[0].len();
    let tol = f64::EPSILON * p as f64;
    for sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q.saturating_sub(1) {
            for j in i + 1..q {
                let (alpha, beta, gamma) = gram_entries(&cols[i], &cols[j]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(cols, i, j, c, s);
                rotate_pair(rot, i, j, c, s);
            }
        }
        if !rotated {
            return sweep + 1;
        }
    }
    MAX_SWEEPS
}

fn gram_entries(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        alpha += a * a;
        beta += b * b;
        gamma += a * b;
    }
    (alpha, beta, gamma)
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(j);
    let (ci, cj) = (&mut head[i], &mut tail[0]);
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn leading_entry_negative(col: &[f64]) -> bool {
    let mut best = 0.0f64;
    let mut value = 0.0;
    for &x in col {
        if x.abs() > best {
            best = x.abs();
            value = x;
        }
    }
    value < 0.0
}

fn negate(col: &mut [f64]) {
    for x in col {
        *x = -*x;
    }
}

fn from_columns(cols: &[Vec<f64>]) -> Matrix {
    let rows = cols[0].len();
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Orthonormal basis of the complement of `span(basis)` in `R^p`, from the
/// Householder QR of the given orthonormal columns.
fn orthonormal_complement(basis: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    let k = basis.len();
    if k >= p {
        return Vec::new();
    }
    let mut work: Vec<Vec<f64>> = basis.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let x = &work[j][j..];
        let xnorm = norm(x);
        let mut v = x.to_vec();
        if xnorm == 0.0 {
            reflectors.push(vec![0.0; p - j]);
            continue;
        }
        let alpha = if v[0] >= 0.0 { -xnorm } else { xnorm };
        v[0] -= alpha;
        let vnorm = norm(&v);
        if vnorm > 0.0 {
            for x in &mut v {
                *x /= vnorm;
            }
        }
        for col in work.iter_mut().skip(j) {
            reflect(&v, &mut col[j..]);
        }
        reflectors.push(v);
    }
    (k..p)
        .map(|c| {
            let mut e = vec![0.0; p];
            e[c] = 1.0;
            for (j, v) in reflectors.iter().enumerate().rev() {
                reflect(v, &mut e[j..]);
            }
            e
        })
        .collect()
}

fn reflect(v: &[f64], x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if dot == 0.0 {
        return;
    }
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi -= 2.0 * dot * vi;
    }
}
