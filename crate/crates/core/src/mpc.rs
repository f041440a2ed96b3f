//! Matrix pattern constraints on the `AB` factors of extension tuners.
//!
//! `Orthogonal` and `Diagonal` are penalties added to the training loss.
//! `Nonlinear` is structural: it places an activation between `A` and `B`,
//! which turns a LoRA state into a parallel adapter.

use std::fmt;
use std::str::FromStr;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::extension::{ExtensionForm, ExtensionKind, ExtensionState};
use crate::linalg::Matrix;

pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RegularizerKind {
    #[default]
    None,
    /// `‖AᵀA − I‖² + ‖BBᵀ − I‖²`
    Orthogonal,
    /// `‖AᵀA − I‖² + ‖BBᵀ − diag(BBᵀ)‖²`
    Diagonal,
    /// Activation between `A` and `B`.
    Nonlinear,
}

impl RegularizerKind {
    pub fn is_penalty(self) -> bool {
        matches!(self, RegularizerKind::Orthogonal | RegularizerKind::Diagonal)
    }

    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Orthogonal => "o",
            RegularizerKind::Diagonal => "d",
            RegularizerKind::Nonlinear => "n",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(RegularizerKind::None),
            "o" | "mpc_o" => Ok(RegularizerKind::Orthogonal),
            "d" | "mpc_d" => Ok(RegularizerKind::Diagonal),
            "n" | "mpc_n" => Ok(RegularizerKind::Nonlinear),
            other => Err(Error::InvalidConfig(format!("unknown mpc kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    /// Penalty weight; ignored by `None` and `Nonlinear`.
    pub lambda: f64,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        Ok(Self { kind, lambda })
    }

    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            lambda: 0.0,
        }
    }
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        Self::none()
    }
}

fn check_factors(kind: RegularizerKind, a: &Matrix, b: &Matrix) -> Result<()> {
    if !kind.is_penalty() {
        return Err(Error::Unsupported(format!("mpc kind `{kind}` has no penalty")));
    }
    if a.cols() != b.rows() {
        return Err(Error::shape("mpc", format!("A has {} columns, B has {} rows", a.cols(), b.rows())));
    }
    Ok(())
}

/// `AᵀA − I` and `BBᵀ − target` for the requested kind.
fn residuals(kind: RegularizerKind, a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    let r = a.cols();
    let ra = a.t_matmul(a)?.sub(&Matrix::identity(r))?;
    let gram = b.matmul_t(b)?;
    let target = match kind {
        RegularizerKind::Orthogonal => Matrix::identity(r),
        _ => Matrix::diag(&(0..r).map(|i| gram.get(i, i)).collect::<Vec<_>>()),
    };
    Ok((ra, gram.sub(&target)?))
}

pub fn mpc_value(kind: RegularizerKind, a: &Matrix, b: &Matrix) -> Result<f64> {
    check_factors(kind, a, b)?;
    let (ra, rb) = residuals(kind, a, b)?;
    let fa = ra.frobenius_norm();
    let fb = rb.frobenius_norm();
    Ok(fa * fa + fb * fb)
}

/// `(4A(AᵀA − I), 4(BBᵀ − T)B)`. The diagonal target has zero gradient
/// contribution because the residual vanishes on the diagonal.
pub fn mpc_grad(kind: RegularizerKind, a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    check_factors(kind, a, b)?;
    let (ra, rb) = residuals(kind, a, b)?;
    Ok((a.matmul(&ra)?.scale(4.0), rb.matmul(b)?.scale(4.0)))
}

/// Rewrites a LoRA state as a parallel adapter with activation `h`.
pub fn mpc_n_wrap(state: ExtensionState, h: Activation) -> Result<ExtensionState> {
    if state.kind() != ExtensionKind::LoRA {
        return Err(Error::Unsupported(format!(
            "the nonlinear constraint applies to LoRA only, got {:?}",
            state.kind()
        )));
    }
    ExtensionState::new(ExtensionForm::ParallelAdapter { h }, state.a, state.b, state.scale)
}
