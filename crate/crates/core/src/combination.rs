//! Combination-based tuners that reconstruct the frozen subspace and extend it
//! in one transformation: DoRA, the Spectral Adapter and SVDiff.

use rand::Rng;

use crate::error::{Error, Result};
use crate::extension::{construct_constrained_factors, INIT_STD};
use crate::linalg::{svd, Matrix, SvdFactors};
use crate::reconstruction::spectral_gradient;
use crate::tuner::Trainable;

/// Column norms below this are rejected by the DoRA normalization.
pub const MIN_COLUMN_NORM: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CombinationKind {
    Dora,
    SpectralAdapter,
    Svdiff,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CombinationState {
    /// `φ(W) = m · (W + AB) / ‖W + AB‖_c`, `a` n×r, `b` r×m.
    Dora { a: Matrix, b: Matrix, magnitude: Vec<f64> },
    /// Trainable offsets on the top-r singular vectors; `a` n×r, `b` m×r.
    SpectralAdapter { a: Matrix, b: Matrix, factors: SvdFactors },
    /// `φ(W) = U · relu(Σ + diag(shift)) · Vᵀ`.
    Svdiff { shift: Vec<f64>, factors: SvdFactors },
}

impl CombinationState {
    pub fn init<R: Rng + ?Sized>(kind: CombinationKind, w: &Matrix, r: usize, rng: &mut R) -> Result<Self> {
        let (n, m) = w.shape();
        let max = n.min(m);
        if kind != CombinationKind::Svdiff && (r == 0 || r > max) {
            return Err(Error::RankOutOfRange { rank: r, max });
        }
        Ok(match kind {
            CombinationKind::Dora => CombinationState::Dora {
                a: Matrix::random_normal(n, r, INIT_STD, rng),
                b: Matrix::zeros(r, m),
                magnitude: w.column_norms(),
            },
            CombinationKind::SpectralAdapter => CombinationState::SpectralAdapter {
                a: Matrix::zeros(n, r),
                b: Matrix::zeros(m, r),
                factors: svd(w)?,
            },
            CombinationKind::Svdiff => {
                let factors = svd(w)?;
                CombinationState::Svdiff {
                    shift: vec![0.0; factors.k()],
                    factors,
                }
            }
        })
    }

    pub fn kind(&self) -> CombinationKind {
        match self {
            CombinationState::Dora { .. } => CombinationKind::Dora,
            CombinationState::SpectralAdapter { .. } => CombinationKind::SpectralAdapter,
            CombinationState::Svdiff { .. } => CombinationKind::Svdiff,
        }
    }

    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        match self {
            CombinationState::Dora { a, b, magnitude } => dora_apply(w, a, b, magnitude),
            CombinationState::SpectralAdapter { a, b, factors } => spectral_adapter_apply(factors, a, b, w),
            CombinationState::Svdiff { shift, factors } => svdiff_apply(factors, shift, w),
        }
    }

    /// Smallest distance of a shifted singular value to the ReLU kink.
    pub(crate) fn kink_margin(&self) -> f64 {
        match self {
            CombinationState::Svdiff { shift, factors } => factors
                .sigma()
                .iter()
                .zip(shift)
                .fold(f64::INFINITY, |acc, (s, d)| acc.min((s + d).abs())),
            _ => f64::INFINITY,
        }
    }

    pub(crate) fn phi_grads(&self, w: &Matrix, d_phi: &Matrix) -> Result<Vec<Vec<f64>>> {
        match self {
            CombinationState::Dora { a, b, magnitude } => {
                let merged = w.add(&a.matmul(b)?)?;
                let norms = checked_column_norms(&merged)?;
                let inv: Vec<f64> = norms.iter().map(|c| 1.0 / c).collect();
                let dir = merged.scale_cols(&inv)?;
                let proj = dir.hadamard(d_phi)?.column_sums();
                let mut d_merged = d_phi.sub(&dir.scale_cols(&proj)?)?;
                let gain: Vec<f64> = magnitude.iter().zip(&inv).map(|(m, i)| m * i).collect();
                d_merged = d_merged.scale_cols(&gain)?;
                let da = d_merged.matmul_t(b)?;
                let db = a.t_matmul(&d_merged)?;
                Ok(vec![da.into_vec(), db.into_vec(), proj])
            }
            CombinationState::SpectralAdapter { a, b, factors } => {
                let (left, right) = spectral_bases(factors, a, b)?;
                let sigma = factors.sigma();
                let r = a.cols();
                let d_left = d_phi.matmul(&right.scale_cols(sigma)?)?;
                let d_right = d_phi.t_matmul(&left.scale_cols(sigma)?)?;
                Ok(vec![d_left.columns(0, r).into_vec(), d_right.columns(0, r).into_vec()])
            }
            CombinationState::Svdiff { shift, factors } => {
                let raw = spectral_gradient(factors, d_phi)?;
                Ok(vec![raw
                    .iter()
                    .zip(factors.sigma().iter().zip(shift))
                    .map(|(g, (s, d))| if s + d > 0.0 { *g } else { 0.0 })
                    .collect()])
            }
        }
    }
}

impl Trainable for CombinationState {
    fn param_names(&self) -> Vec<&'static str> {
        match self {
            CombinationState::Dora { .. } => vec!["A", "B", "magnitude"],
            CombinationState::SpectralAdapter { .. } => vec!["A", "B"],
            CombinationState::Svdiff { .. } => vec!["shift"],
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match self {
            CombinationState::Dora { a, b, magnitude } => vec![a.as_slice(), b.as_slice(), magnitude],
            CombinationState::SpectralAdapter { a, b, .. } => vec![a.as_slice(), b.as_slice()],
            CombinationState::Svdiff { shift, .. } => vec![shift],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            CombinationState::Dora { a, b, magnitude } => vec![a.as_mut_slice(), b.as_mut_slice(), magnitude],
            CombinationState::SpectralAdapter { a, b, .. } => vec![a.as_mut_slice(), b.as_mut_slice()],
            CombinationState::Svdiff { shift, .. } => vec![shift],
        }
    }
}

fn checked_column_norms(m: &Matrix) -> Result<Vec<f64>> {
    let norms = m.column_norms();
    if let Some((col, &norm)) = norms.iter().enumerate().find(|(_, &c)| c < MIN_COLUMN_NORM) {
        return Err(Error::DegenerateColumn { col, norm });
    }
    Ok(norms)
}

/// Column `j` of `W + AB` rescaled to norm `magnitude[j]`.
pub fn dora_apply(w: &Matrix, a: &Matrix, b: &Matrix, magnitude: &[f64]) -> Result<Matrix> {
    if magnitude.len() != w.cols() {
        return Err(Error::shape("dora_apply", format!("{} magnitudes for {} columns", magnitude.len(), w.cols())));
    }
    let merged = w.add(&a.matmul(b)?)?;
    let norms = checked_column_norms(&merged)?;
    let gain: Vec<f64> = magnitude.iter().zip(&norms).map(|(m, c)| m / c).collect();
    merged.scale_cols(&gain)
}

/// `(W + AB) · diag(d)`, the form DoRA takes once the magnitude is free.
pub fn dora_simplified_apply(w: &Matrix, a: &Matrix, b: &Matrix, d: &[f64]) -> Result<Matrix> {
    w.add(&a.matmul(b)?)?.scale_cols(d)
}

/// Factors of `ΔW* = A·B·D` under the same constraints as the ADB analysis:
/// `A` keeps the leading left singular vectors, `B = D₂†·Vᵀ·D†` absorbs the
/// pseudo-inverse of the diagonal `d`. `AᵀA = I` while `BBᵀ` is unconstrained.
pub fn dora_constrained_factors(delta_star: &Matrix, d: &[f64], r: usize) -> Result<(Matrix, Matrix)> {
    if d.len() != delta_star.cols() {
        return Err(Error::shape("dora_constrained_factors", "diagonal length differs from column count"));
    }
    let (a, b) = construct_constrained_factors(delta_star, r)?;
    let d_pinv: Vec<f64> = d.iter().map(|&x| if x == 0.0 { 0.0 } else { 1.0 / x }).collect();
    Ok((a, b.scale_cols(&d_pinv)?))
}

/// `[U_k with A added to its first r columns]`, `[V_k with B added likewise]`.
fn spectral_bases(factors: &SvdFactors, a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    let k = factors.k();
    let r = a.cols();
    if r == 0 || r > k || b.cols() != r {
        return Err(Error::RankOutOfRange { rank: r.max(b.cols()), max: k });
    }
    if a.rows() != factors.u().rows() || b.rows() != factors.v().rows() {
        return Err(Error::shape("spectral_adapter", "A must be n×r and B m×r"));
    }
    let mut left = factors.u_leading(k);
    let mut right = factors.v_leading(k);
    for j in 0..r {
        for i in 0..a.rows() {
            left.set(i, j, left.get(i, j) + a.get(i, j));
        }
        for i in 0..b.rows() {
            right.set(i, j, right.get(i, j) + b.get(i, j));
        }
    }
    Ok((left, right))
}

/// `[U_r + A | U_rest] · Σ · [V_r + B | V_rest]ᵀ`.
pub fn spectral_adapter_apply(factors: &SvdFactors, a: &Matrix, b: &Matrix, w: &Matrix) -> Result<Matrix> {
    if factors.u().rows() != w.rows() || factors.v().rows() != w.cols() {
        return Err(Error::shape("spectral_adapter_apply", "factors belong to a different shape"));
    }
    let (left, right) = spectral_bases(factors, a, b)?;
    left.scale_cols(factors.sigma())?.matmul_t(&right)
}

/// Expanded form `W + A·Σ_r·V_rᵀ + U_r·Σ_r·Bᵀ + A·Σ_r·Bᵀ`.
pub fn spectral_adapter_expansion(factors: &SvdFactors, a: &Matrix, b: &Matrix, w: &Matrix) -> Result<Matrix> {
    let r = a.cols();
    spectral_bases(factors, a, b)?;
    let sigma_r = &factors.sigma()[..r];
    let u_r = factors.u_leading(r);
    let v_r = factors.v_leading(r);
    let a_sigma = a.scale_cols(sigma_r)?;
    w.add(&a_sigma.matmul_t(&v_r)?)?
        .add(&u_r.scale_cols(sigma_r)?.matmul_t(b)?)?
        .add(&a_sigma.matmul_t(b)?)
}

/// `U · diag(max(σ + shift, 0)) · Vᵀ`.
pub fn svdiff_apply(factors: &SvdFactors, shift: &[f64], w: &Matrix) -> Result<Matrix> {
    if factors.u().rows() != w.rows() || factors.v().rows() != w.cols() || shift.len() != factors.k() {
        return Err(Error::shape("svdiff_apply", "shift or factors do not match the weight"));
    }
    let clamped: Vec<f64> = factors
        .sigma()
        .iter()
        .zip(shift)
        .map(|(s, d)| (s + d).max(0.0))
        .collect();
    factors.compose(&clamped)
}

/// The addition term `U · H_Σ(D) · Vᵀ` with `H_Σ(D) = max(D, −Σ)` on the diagonal.
pub fn svdiff_delta(factors: &SvdFactors, shift: &[f64]) -> Result<Matrix> {
    if shift.len() != factors.k() {
        return Err(Error::shape("svdiff_delta", "shift length differs from the spectrum"));
    }
    let h: Vec<f64> = factors.sigma().iter().zip(shift).map(|(s, d)| d.max(-s)).collect();
    factors.compose(&h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fresh_states_are_identity() {
        let mut g = rng(1);
        let w = Matrix::random_normal(6, 5, 1.0, &mut g);
        for kind in [CombinationKind::Dora, CombinationKind::SpectralAdapter, CombinationKind::Svdiff] {
            let st = CombinationState::init(kind, &w, 2, &mut g).unwrap();
            assert!(st.apply(&w).unwrap().max_abs_diff(&w) <= 1e-10, "{kind:?}");
        }
    }

    #[test]
    fn dora_examples() {
        let mut g = rng(2);
        let w = Matrix::random_normal(6, 5, 1.0, &mut g);
        let a = Matrix::random_normal(6, 2, 1.0, &mut g);
        let zero_b = Matrix::zeros(2, 5);
        let norms = w.column_norms();
        assert!(dora_apply(&w, &a, &zero_b, &norms).unwrap().max_abs_diff(&w) <= 1e-12);
        let doubled: Vec<f64> = norms.iter().map(|c| 2.0 * c).collect();
        assert!(dora_apply(&w, &a, &zero_b, &doubled).unwrap().max_abs_diff(&w.scale(2.0)) <= 1e-12);

        let b = Matrix::random_normal(2, 5, 1.0, &mut g);
        let mag: Vec<f64> = (0..5).map(|j| 0.5 + j as f64).collect();
        let out = dora_apply(&w, &a, &b, &mag).unwrap();
        for (c, m) in out.column_norms().iter().zip(&mag) {
            assert!((c - m).abs() <= 1e-10 * m);
        }
    }

    #[test]
    fn dora_degenerate_column() {
        let w = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let a = Matrix::zeros(2, 1);
        let b = Matrix::zeros(1, 2);
        assert!(matches!(
            dora_apply(&w, &a, &b, &[1.0, 1.0]),
            Err(Error::DegenerateColumn { col: 1, .. })
        ));
    }

    #[test]
    fn dora_simplified_form() {
        let mut g = rng(3);
        let w = Matrix::random_normal(6, 5, 1.0, &mut g);
        let a = Matrix::random_normal(6, 2, 1.0, &mut g);
        let b = Matrix::random_normal(2, 5, 1.0, &mut g);
        assert_eq!(dora_simplified_apply(&w, &a, &Matrix::zeros(2, 5), &[1.0; 5]).unwrap(), w);
        assert_eq!(dora_simplified_apply(&w, &a, &b, &[0.0; 5]).unwrap(), Matrix::zeros(6, 5));
        let mag: Vec<f64> = (0..5).map(|j| 1.0 + 0.3 * j as f64).collect();
        let merged_norms = w.add(&a.matmul(&b).unwrap()).unwrap().column_norms();
        let d: Vec<f64> = mag.iter().zip(&merged_norms).map(|(m, c)| m / c).collect();
        let full = dora_apply(&w, &a, &b, &mag).unwrap();
        assert!(dora_simplified_apply(&w, &a, &b, &d).unwrap().max_abs_diff(&full) <= 1e-12);
    }

    #[test]
    fn dora_constrained_b_is_not_orthogonal() {
        let mut g = rng(4);
        for _ in 0..10 {
            let target = Matrix::random_normal(6, 5, 1.0, &mut g);
            let d: Vec<f64> = (0..5).map(|_| { let z: f64 = StandardNormal.sample(&mut g); 0.5 + z.abs() }).collect();
            let (a, b) = dora_constrained_factors(&target, &d, 3).unwrap();
            assert!(a.t_matmul(&a).unwrap().max_abs_from_identity() <= 1e-10);
            assert!(b.matmul_t(&b).unwrap().max_abs_from_identity() > 1e-3);
            assert!(b.t_matmul(&b).unwrap().max_abs_from_identity() > 1e-3);
        }
    }

    #[test]
    fn spectral_adapter_paths() {
        let mut g = rng(5);
        let w = Matrix::random_normal(6, 5, 1.0, &mut g);
        let f = svd(&w).unwrap();
        let zero = spectral_adapter_apply(&f, &Matrix::zeros(6, 2), &Matrix::zeros(5, 2), &w).unwrap();
        assert!(zero.max_abs_diff(&w) <= 1e-10);

        let a = Matrix::random_normal(6, 2, 1.0, &mut g);
        let b = Matrix::random_normal(5, 2, 1.0, &mut g);
        let bracket = spectral_adapter_apply(&f, &a, &b, &w).unwrap();
        let expanded = spectral_adapter_expansion(&f, &a, &b, &w).unwrap();
        assert!(bracket.max_abs_diff(&expanded) <= 1e-10);

        // r = k with B = 0: W + A Σ Vᵀ, a delta of rank <= k
        let k = f.k();
        let a_full = Matrix::random_normal(6, k, 1.0, &mut g);
        let out = spectral_adapter_apply(&f, &a_full, &Matrix::zeros(5, k), &w).unwrap();
        let expect = w.add(&a_full.scale_cols(f.sigma()).unwrap().matmul_t(&f.v_leading(k)).unwrap()).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-10);
        let delta_rank = svd(&out.sub(&w).unwrap()).unwrap().rank(1e-12);
        assert!(delta_rank <= k);

        assert!(spectral_adapter_apply(&f, &Matrix::zeros(6, 6), &Matrix::zeros(5, 6), &w).is_err());
    }

    #[test]
    fn svdiff_examples() {
        let mut g = rng(6);
        let w = Matrix::random_normal(5, 4, 1.0, &mut g);
        let f = svd(&w).unwrap();
        assert!(svdiff_apply(&f, &[0.0; 4], &w).unwrap().max_abs_diff(&w) <= 1e-10);
        let neg: Vec<f64> = f.sigma().iter().map(|s| -2.0 * s).collect();
        assert_eq!(svdiff_apply(&f, &neg, &w).unwrap().max_abs(), 0.0);

        let shift: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut g)).collect();
        let direct = svdiff_apply(&f, &shift, &w).unwrap();
        let via_delta = w.add(&svdiff_delta(&f, &shift).unwrap()).unwrap();
        assert!(direct.max_abs_diff(&via_delta) <= 1e-10);

        let mut expected: Vec<f64> = f.sigma().iter().zip(&shift).map(|(s, d)| (s + d).max(0.0)).collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        let got = svd(&direct).unwrap();
        for (x, y) in got.sigma().iter().zip(&expected) {
            assert!((x - y).abs() <= 1e-8);
        }
    }
}
