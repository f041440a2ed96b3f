//! Reconstruction-based tuners: `φ(W) = f(W)` rebuilds the existing subspace
//! of the frozen weight instead of adding a new one.
//!
//! * Mode 1 replaces the singular values (`UΣ*Vᵀ`).
//! * Mode 2 scales singular-vector subspaces, which reduces to scaling rows
//!   and/or columns of `W`: (IA)³ is `W·diag(d₂)`, SSL is `diag(d₁)·W` and SSB
//!   is `diag(d₁)·W·diag(d₂)`.
//! * Mode 3 edits individual entries of an augmented weight: BitFit trains
//!   the appended bias row, soft prompts train prepended rows.

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix, SvdFactors};
use crate::tuner::Trainable;

/// Relative reconstruction residual tolerated when attaching cached factors.
pub const FACTOR_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReconstructionKind {
    SingularValues,
    Ia3,
    Ssl,
    Ssb,
    BitFit,
    SoftPrompt,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReconstructionState {
    SingularValues { sigma: Vec<f64>, factors: SvdFactors },
    Ia3 { d2: Vec<f64> },
    Ssl { d1: Vec<f64> },
    Ssb { d1: Vec<f64>, d2: Vec<f64> },
    BitFit { bias: Vec<f64> },
    SoftPrompt { prompt: Matrix },
}

impl ReconstructionState {
    /// Fresh state for an n×m weight: spectra copied, scales at one, bias
    /// copied from the frozen layer, prompts at zero (`prompt_len` rows).
    pub fn init(kind: ReconstructionKind, w: &Matrix, frozen_bias: &[f64], prompt_len: usize) -> Result<Self> {
        let (n, m) = w.shape();
        Ok(match kind {
            ReconstructionKind::SingularValues => Self::singular_values(w, svd(w)?)?,
            ReconstructionKind::Ia3 => ReconstructionState::Ia3 { d2: vec![1.0; m] },
            ReconstructionKind::Ssl => ReconstructionState::Ssl { d1: vec![1.0; n] },
            ReconstructionKind::Ssb => ReconstructionState::Ssb {
                d1: vec![1.0; n],
                d2: vec![1.0; m],
            },
            ReconstructionKind::BitFit => {
                if frozen_bias.len() != m {
                    return Err(Error::shape("BitFit", format!("bias of length {} for {m} outputs", frozen_bias.len())));
                }
                ReconstructionState::BitFit { bias: frozen_bias.to_vec() }
            }
            ReconstructionKind::SoftPrompt => {
                if prompt_len == 0 {
                    return Err(Error::InvalidConfig("soft prompt needs at least one row".into()));
                }
                ReconstructionState::SoftPrompt {
                    prompt: Matrix::zeros(prompt_len, m),
                }
            }
        })
    }

    /// Mode-1 state from factors computed elsewhere; rejects factors that do
    /// not reconstruct `w`.
    pub fn singular_values(w: &Matrix, factors: SvdFactors) -> Result<Self> {
        if factors.u().rows() != w.rows() || factors.v().rows() != w.cols() {
            return Err(Error::shape("singular_values", "factors belong to a different shape"));
        }
        let residual = factors.reconstruct().sub(w)?.frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE);
        if residual > FACTOR_TOLERANCE {
            return Err(Error::FactorMismatch(residual));
        }
        Ok(ReconstructionState::SingularValues {
            sigma: factors.sigma().to_vec(),
            factors,
        })
    }

    pub fn kind(&self) -> ReconstructionKind {
        match self {
            ReconstructionState::SingularValues { .. } => ReconstructionKind::SingularValues,
            ReconstructionState::Ia3 { .. } => ReconstructionKind::Ia3,
            ReconstructionState::Ssl { .. } => ReconstructionKind::Ssl,
            ReconstructionState::Ssb { .. } => ReconstructionKind::Ssb,
            ReconstructionState::BitFit { .. } => ReconstructionKind::BitFit,
            ReconstructionState::SoftPrompt { .. } => ReconstructionKind::SoftPrompt,
        }
    }

    /// The reconstructed weight. BitFit and soft prompts leave `W` itself
    /// untouched: their trainables live on the bias row and the prompt rows.
    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        match self {
            ReconstructionState::SingularValues { sigma, factors } => mode1_apply(factors, sigma, w),
            ReconstructionState::Ia3 { d2 } => ia3_apply(w, d2),
            ReconstructionState::Ssl { d1 } => ssl_apply(w, d1),
            ReconstructionState::Ssb { d1, d2 } => ssb_apply(w, d1, d2),
            ReconstructionState::BitFit { bias } => {
                if bias.len() != w.cols() {
                    return Err(Error::shape("BitFit", "bias length differs from output width"));
                }
                Ok(w.clone())
            }
            ReconstructionState::SoftPrompt { prompt } => {
                if prompt.cols() != w.cols() {
                    return Err(Error::shape("SoftPrompt", "prompt width differs from output width"));
                }
                Ok(w.clone())
            }
        }
    }

    /// Gradients of the weight-space kinds given `∂L/∂φ(W)`.
    pub(crate) fn phi_grads(&self, w: &Matrix, d_phi: &Matrix) -> Result<Vec<Vec<f64>>> {
        let weighted = || w.hadamard(d_phi);
        match self {
            ReconstructionState::SingularValues { factors, .. } => Ok(vec![spectral_gradient(factors, d_phi)?]),
            ReconstructionState::Ia3 { .. } => Ok(vec![weighted()?.column_sums()]),
            ReconstructionState::Ssl { .. } => Ok(vec![row_sums(&weighted()?)]),
            ReconstructionState::Ssb { d1, d2 } => {
                let g = weighted()?;
                let dd1 = row_sums(&g.scale_cols(d2)?);
                let dd2 = g.scale_rows(d1)?.column_sums();
                Ok(vec![dd1, dd2])
            }
            ReconstructionState::BitFit { .. } | ReconstructionState::SoftPrompt { .. } => {
                Err(Error::Unsupported("no weight-space parameters".into()))
            }
        }
    }
}

impl Trainable for ReconstructionState {
    fn param_names(&self) -> Vec<&'static str> {
        match self {
            ReconstructionState::SingularValues { .. } => vec!["sigma"],
            ReconstructionState::Ia3 { .. } => vec!["d2"],
            ReconstructionState::Ssl { .. } => vec!["d1"],
            ReconstructionState::Ssb { .. } => vec!["d1", "d2"],
            ReconstructionState::BitFit { .. } => vec!["bias"],
            ReconstructionState::SoftPrompt { .. } => vec!["prompt"],
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match self {
            ReconstructionState::SingularValues { sigma, .. } => vec![sigma],
            ReconstructionState::Ia3 { d2 } => vec![d2],
            ReconstructionState::Ssl { d1 } => vec![d1],
            ReconstructionState::Ssb { d1, d2 } => vec![d1, d2],
            ReconstructionState::BitFit { bias } => vec![bias],
            ReconstructionState::SoftPrompt { prompt } => vec![prompt.as_slice()],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ReconstructionState::SingularValues { sigma, .. } => vec![sigma],
            ReconstructionState::Ia3 { d2 } => vec![d2],
            ReconstructionState::Ssl { d1 } => vec![d1],
            ReconstructionState::Ssb { d1, d2 } => vec![d1, d2],
            ReconstructionState::BitFit { bias } => vec![bias],
            ReconstructionState::SoftPrompt { prompt } => vec![prompt.as_mut_slice()],
        }
    }
}

/// `∂L/∂σ'_i = u_iᵀ · (∂L/∂φ) · v_i`.
pub(crate) fn spectral_gradient(factors: &SvdFactors, d_phi: &Matrix) -> Result<Vec<f64>> {
    let k = factors.k();
    let t = d_phi.matmul(&factors.v_leading(k))?;
    let u = factors.u();
    Ok((0..k)
        .map(|i| (0..u.rows()).map(|a| u.get(a, i) * t.get(a, i)).sum())
        .collect())
}

fn row_sums(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().sum()).collect()
}

/// `U · diag(sigma') · Vᵀ` over the cached factors of `w`.
pub fn mode1_apply(factors: &SvdFactors, sigma: &[f64], w: &Matrix) -> Result<Matrix> {
    if factors.u().rows() != w.rows() || factors.v().rows() != w.cols() {
        return Err(Error::shape("mode1_apply", "factors belong to a different shape"));
    }
    factors.compose(sigma)
}

/// `W · diag(d₂)`.
pub fn ia3_apply(w: &Matrix, d2: &[f64]) -> Result<Matrix> {
    w.scale_cols(d2)
}

/// `diag(d₁) · W`.
pub fn ssl_apply(w: &Matrix, d1: &[f64]) -> Result<Matrix> {
    w.scale_rows(d1)
}

/// `diag(d₁) · W · diag(d₂)`.
pub fn ssb_apply(w: &Matrix, d1: &[f64], d2: &[f64]) -> Result<Matrix> {
    w.scale_rows(d1)?.scale_cols(d2)
}

/// Evaluates both sides of `U·D₁·Σ·D₂·Vᵀ = U·Σ̂·Vᵀ` with `Σ̂ = D₁ΣD₂` on the
/// SVD of `w` and returns the max-abs residual between them.
///
/// `Σ` is the n×m rectangular diagonal, `d1` scales its rows and `d2` its
/// columns.
pub fn column_scale_is_sigma_adjustment(w: &Matrix, d1: &[f64], d2: &[f64]) -> Result<f64> {
    let (n, m) = w.shape();
    if d1.len() != n || d2.len() != m {
        return Err(Error::shape(
            "column_scale_is_sigma_adjustment",
            format!("d1 {} / d2 {} for {n}x{m}", d1.len(), d2.len()),
        ));
    }
    let f = svd(w)?;
    let mut sigma_rect = Matrix::zeros(n, m);
    let mut sigma_hat = Matrix::zeros(n, m);
    for (i, &s) in f.sigma().iter().enumerate() {
        sigma_rect.set(i, i, s);
        sigma_hat.set(i, i, d1[i] * s * d2[i]);
    }
    let lhs = f
        .u()
        .matmul(&Matrix::diag(d1))?
        .matmul(&sigma_rect)?
        .matmul(&Matrix::diag(d2))?
        .matmul_t(f.v())?;
    let rhs = f.u().matmul(&sigma_hat)?.matmul_t(f.v())?;
    Ok(lhs.max_abs_diff(&rhs))
}

/// `[W; bᵀ]`, the (n+1)×m weight with the bias appended as a final row.
pub fn augment_bias(w: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != w.cols() {
        return Err(Error::shape("augment_bias", format!("bias of length {} for {} columns", bias.len(), w.cols())));
    }
    Matrix::vstack(w, &Matrix::new(1, bias.len(), bias.to_vec())?)
}

/// `[x | 1]`, the input matching [`augment_bias`].
pub fn augment_bias_input(x: &Matrix) -> Matrix {
    Matrix::hstack(x, &Matrix::from_fn(x.rows(), 1, |_, _| 1.0)).expect("same row count")
}

/// `x·W + 1·bᵀ`.
pub fn bitfit_forward(x: &Matrix, w: &Matrix, bias: &[f64]) -> Result<Matrix> {
    x.matmul(w)?.add_row_vector(bias)
}

/// `[P; W]`, the (l_p+n)×m weight with prompt rows on top.
pub fn augment_prompt(w: &Matrix, prompt: &Matrix) -> Result<Matrix> {
    Matrix::vstack(prompt, w)
}

/// Block input `[[I_l, 0], [0, x]]` matching [`augment_prompt`].
pub fn augment_prompt_input(x: &Matrix, prompt_len: usize) -> Matrix {
    let (batch, n) = x.shape();
    Matrix::from_fn(prompt_len + batch, prompt_len + n, |i, j| match (i < prompt_len, j < prompt_len) {
        (true, true) => {
            if i == j {
                1.0
            } else {
                0.0
            }
        }
        (false, false) => x.get(i - prompt_len, j - prompt_len),
        _ => 0.0,
    })
}

/// `[P; x·W]`.
pub fn soft_prompt_forward(x: &Matrix, w: &Matrix, prompt: &Matrix) -> Result<Matrix> {
    if prompt.cols() != w.cols() {
        return Err(Error::shape("soft_prompt_forward", "prompt width differs from output width"));
    }
    Matrix::vstack(prompt, &x.matmul(w)?)
}

/// Gradient of a loss with respect to the prompt, given `∂L/∂[P; xW]`:
/// the leading `prompt_len` rows pass straight through.
pub fn soft_prompt_backward(d_out: &Matrix, prompt_len: usize) -> Result<Matrix> {
    if prompt_len == 0 || prompt_len > d_out.rows() {
        return Err(Error::shape("soft_prompt_backward", format!("{prompt_len} prompt rows of {}", d_out.rows())));
    }
    Ok(d_out.row_block(0, prompt_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(len: usize, g: &mut ChaCha8Rng) -> Vec<f64> {
        let u = Uniform::new(-2.0, 2.0).unwrap();
        (0..len).map(|_| u.sample(g)).collect()
    }

    #[test]
    fn mode1_examples() {
        let mut g = rng(1);
        let w = Matrix::random_normal(5, 4, 1.0, &mut g);
        let st = ReconstructionState::init(ReconstructionKind::SingularValues, &w, &[0.0; 4], 0).unwrap();
        assert!(st.apply(&w).unwrap().max_abs_diff(&w) <= 1e-10);

        let ReconstructionState::SingularValues { sigma, factors } = &st else { unreachable!() };
        assert_eq!(mode1_apply(factors, &[0.0; 4], &w).unwrap(), Matrix::zeros(5, 4));
        let doubled: Vec<f64> = sigma.iter().map(|s| 2.0 * s).collect();
        assert!(mode1_apply(factors, &doubled, &w).unwrap().max_abs_diff(&w.scale(2.0)) <= 1e-10);
    }

    #[test]
    fn mode1_output_shares_singular_subspaces() {
        let mut g = rng(2);
        let w = Matrix::random_normal(6, 4, 1.0, &mut g);
        let f = svd(&w).unwrap();
        let sigma = random_vec(4, &mut g);
        let out = mode1_apply(&f, &sigma, &w).unwrap();
        let core = f.u().t_matmul(&out).unwrap().matmul(f.v()).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                let expect = if i == j { sigma.get(i).copied().unwrap_or(0.0) } else { 0.0 };
                assert!((core.get(i, j) - expect).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn mismatched_factors_rejected() {
        let mut g = rng(3);
        let w = Matrix::random_normal(4, 4, 1.0, &mut g);
        let other = Matrix::random_normal(4, 4, 1.0, &mut g);
        let err = ReconstructionState::singular_values(&w, svd(&other).unwrap()).unwrap_err();
        assert!(matches!(err, Error::FactorMismatch(_)));
    }

    #[test]
    fn scaling_examples() {
        let mut g = rng(4);
        let w = Matrix::random_normal(4, 5, 1.0, &mut g);
        assert_eq!(ia3_apply(&w, &[1.0; 5]).unwrap(), w);
        assert_eq!(ssl_apply(&w, &[1.0; 4]).unwrap(), w);
        assert_eq!(ssb_apply(&w, &[1.0; 4], &[1.0; 5]).unwrap(), w);

        let out = ia3_apply(&w, &[2.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        for i in 0..4 {
            assert_eq!(out.get(i, 0), 2.0 * w.get(i, 0));
            for j in 1..5 {
                assert_eq!(out.get(i, j), w.get(i, j));
            }
        }

        let d1 = random_vec(4, &mut g);
        let d2 = random_vec(5, &mut g);
        let composed = ia3_apply(&ssl_apply(&w, &d1).unwrap(), &d2).unwrap();
        assert!(ssb_apply(&w, &d1, &d2).unwrap().max_abs_diff(&composed) <= 1e-14);
        // reductions are exact
        assert_eq!(ssb_apply(&w, &[1.0; 4], &d2).unwrap(), ia3_apply(&w, &d2).unwrap());
        assert_eq!(ssb_apply(&w, &d1, &[1.0; 5]).unwrap(), ssl_apply(&w, &d1).unwrap());
        assert!(ia3_apply(&w, &[1.0; 4]).is_err());
    }

    #[test]
    fn fresh_states_are_identity() {
        let mut g = rng(5);
        let w = Matrix::random_normal(4, 6, 1.0, &mut g);
        let bias = random_vec(6, &mut g);
        for kind in [
            ReconstructionKind::Ia3,
            ReconstructionKind::Ssl,
            ReconstructionKind::Ssb,
            ReconstructionKind::BitFit,
            ReconstructionKind::SoftPrompt,
        ] {
            let st = ReconstructionState::init(kind, &w, &bias, 2).unwrap();
            assert_eq!(st.apply(&w).unwrap(), w, "{kind:?}");
        }
        let st = ReconstructionState::init(ReconstructionKind::BitFit, &w, &bias, 0).unwrap();
        assert_eq!(st.params()[0], bias.as_slice());
    }

    #[test]
    fn trainable_counts() {
        let w = Matrix::from_fn(4, 6, |i, j| (i * 6 + j) as f64 + 1.0);
        let count = |k| ReconstructionState::init(k, &w, &[0.0; 6], 3).unwrap().trainable_count();
        assert_eq!(count(ReconstructionKind::SingularValues), 4);
        assert_eq!(count(ReconstructionKind::Ia3), 6);
        assert_eq!(count(ReconstructionKind::Ssl), 4);
        assert_eq!(count(ReconstructionKind::Ssb), 10);
        assert_eq!(count(ReconstructionKind::BitFit), 6);
        assert_eq!(count(ReconstructionKind::SoftPrompt), 18);
    }

    #[test]
    fn column_scaling_is_spectrum_adjustment() {
        let mut g = rng(6);
        let w = Matrix::random_normal(5, 4, 1.0, &mut g);
        assert!(column_scale_is_sigma_adjustment(&w, &[1.0; 5], &[1.0; 4]).unwrap() <= 1e-12);
        assert!(column_scale_is_sigma_adjustment(&w, &[1.0; 5], &[0.0; 4]).unwrap() <= 1e-15);
        for _ in 0..100 {
            let w = Matrix::random_normal(5, 4, 1.0, &mut g);
            let d1 = random_vec(5, &mut g);
            let d2 = random_vec(4, &mut g);
            assert!(column_scale_is_sigma_adjustment(&w, &d1, &d2).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn bitfit_paths_agree() {
        let mut g = rng(7);
        let x = Matrix::random_normal(3, 4, 1.0, &mut g);
        let w = Matrix::random_normal(4, 5, 1.0, &mut g);
        assert_eq!(bitfit_forward(&x, &w, &[0.0; 5]).unwrap(), x.matmul(&w).unwrap());

        let bias = random_vec(5, &mut g);
        let zero_out = bitfit_forward(&Matrix::zeros(3, 4), &w, &bias).unwrap();
        for i in 0..3 {
            assert_eq!(zero_out.row(i), bias.as_slice());
        }

        let aug = augment_bias(&w, &bias).unwrap();
        assert_eq!(aug.shape(), (5, 5));
        let via_aug = augment_bias_input(&x).matmul(&aug).unwrap();
        assert!(via_aug.max_abs_diff(&bitfit_forward(&x, &w, &bias).unwrap()) <= 1e-12);
    }

    #[test]
    fn soft_prompt_paths_agree() {
        let mut g = rng(8);
        let x = Matrix::random_normal(3, 4, 1.0, &mut g);
        let w = Matrix::random_normal(4, 5, 1.0, &mut g);
        let zero = Matrix::zeros(2, 5);
        let out = soft_prompt_forward(&x, &w, &zero).unwrap();
        assert_eq!(out.row_block(0, 2), zero);
        assert_eq!(out.row_block(2, 5), x.matmul(&w).unwrap());

        let prompt = Matrix::random_normal(2, 5, 1.0, &mut g);
        let eye = soft_prompt_forward(&Matrix::identity(4), &w, &prompt).unwrap();
        assert_eq!(eye, augment_prompt(&w, &prompt).unwrap());

        let direct = soft_prompt_forward(&x, &w, &prompt).unwrap();
        let block = augment_prompt_input(&x, 2).matmul(&augment_prompt(&w, &prompt).unwrap()).unwrap();
        assert!(direct.max_abs_diff(&block) <= 1e-12);
    }

    #[test]
    fn soft_prompt_gradient_matches_finite_differences() {
        let mut g = rng(9);
        let x = Matrix::random_normal(3, 4, 1.0, &mut g);
        let w = Matrix::random_normal(4, 5, 1.0, &mut g);
        let mut prompt = Matrix::random_normal(2, 5, 1.0, &mut g);
        let target = Matrix::random_normal(5, 5, 1.0, &mut g);
        let loss = |p: &Matrix| {
            let out = soft_prompt_forward(&x, &w, p).unwrap();
            out.sub(&target).unwrap().as_slice().iter().map(|v| v * v).sum::<f64>()
        };
        let out = soft_prompt_forward(&x, &w, &prompt).unwrap();
        let d_out = out.sub(&target).unwrap().scale(2.0);
        let analytic = soft_prompt_backward(&d_out, 2).unwrap();
        let eps = 1e-5;
        for idx in 0..10 {
            let orig = prompt.as_slice()[idx];
            prompt.as_mut_slice()[idx] = orig + eps;
            let up = loss(&prompt);
            prompt.as_mut_slice()[idx] = orig - eps;
            let down = loss(&prompt);
            prompt.as_mut_slice()[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - analytic.as_slice()[idx]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
