//! Extension-based tuners: `φ(W) = W + s·ΔW` with a low-rank addition term.
//!
//! The addition term comes in three factorized shapes (`AB`, `A·diag(d)·B`,
//! `A·G·B`) and two adapter shapes that put a nonlinearity between the
//! down- and up-projection. Besides the tuners themselves this module exposes
//! the algebra that relates the shapes: converting `AGB` into an equivalent
//! two-factor product, and building factors of a target update that satisfy
//! the semi-orthogonality constraints the diagonal form implies.

use rand::Rng;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::tuner::Trainable;

/// Standard deviation of the Gaussian used for `A` at initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExtensionKind {
    /// `ΔW = AB`
    LoRA,
    /// `ΔW = A·diag(d)·B` (AdaLoRA / TriLoRA form)
    Adb,
    /// `ΔW = A·G·B` (FLoRA form)
    Agb,
    /// `x → x + h(xA)B` applied after the frozen projection
    SerialAdapter,
    /// `x → xW + h(xA)B`
    ParallelAdapter,
}

/// Kind-specific part of an extension tuner.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtensionForm {
    LoRA,
    Adb { d: Vec<f64> },
    Agb { g: Matrix },
    SerialAdapter { h: Activation },
    ParallelAdapter { h: Activation },
}

impl ExtensionForm {
    pub fn kind(&self) -> ExtensionKind {
        match self {
            ExtensionForm::LoRA => ExtensionKind::LoRA,
            ExtensionForm::Adb { .. } => ExtensionKind::Adb,
            ExtensionForm::Agb { .. } => ExtensionKind::Agb,
            ExtensionForm::SerialAdapter { .. } => ExtensionKind::SerialAdapter,
            ExtensionForm::ParallelAdapter { .. } => ExtensionKind::ParallelAdapter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtensionConfig {
    pub scale: f64,
    pub activation: Activation,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            activation: Activation::Relu,
        }
    }
}

/// Trainable state of one extension tuner attached to an n×m weight.
///
/// `a` is n×r (m×r for the serial adapter, which acts on the layer output)
/// and `b` is r×m.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionState {
    pub form: ExtensionForm,
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

impl ExtensionState {
    /// Fresh state: `A ~ N(0, 0.02²)`, `B = 0`, `d = 1`, `G = I`, so `ΔW = 0`.
    pub fn init<R: Rng + ?Sized>(
        kind: ExtensionKind,
        n: usize,
        m: usize,
        r: usize,
        config: ExtensionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(r, n, m)?;
        let a_rows = if kind == ExtensionKind::SerialAdapter { m } else { n };
        let a = Matrix::random_normal(a_rows, r, INIT_STD, rng);
        let b = Matrix::zeros(r, m);
        let form = match kind {
            ExtensionKind::LoRA => ExtensionForm::LoRA,
            ExtensionKind::Adb => ExtensionForm::Adb { d: vec![1.0; r] },
            ExtensionKind::Agb => ExtensionForm::Agb { g: Matrix::identity(r) },
            ExtensionKind::SerialAdapter => ExtensionForm::SerialAdapter { h: config.activation },
            ExtensionKind::ParallelAdapter => ExtensionForm::ParallelAdapter { h: config.activation },
        };
        Self::new(form, a, b, config.scale)
    }

    pub fn new(form: ExtensionForm, a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        let r = b.rows();
        if a.cols() != r {
            return Err(Error::shape("ExtensionState", format!("A has {} columns, B has {r} rows", a.cols())));
        }
        match &form {
            ExtensionForm::Adb { d } if d.len() != r => {
                return Err(Error::shape("ExtensionState", format!("d has length {}, rank is {r}", d.len())));
            }
            ExtensionForm::Agb { g } if g.shape() != (r, r) => {
                return Err(Error::shape("ExtensionState", format!("G is {}x{}, rank is {r}", g.rows(), g.cols())));
            }
            ExtensionForm::SerialAdapter { .. } if a.rows() != b.cols() => {
                return Err(Error::shape(
                    "ExtensionState",
                    format!("serial adapter needs A with {} rows, got {}", b.cols(), a.rows()),
                ));
            }
            _ => {}
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("ExtensionState scale"));
        }
        Ok(Self { form, a, b, scale })
    }

    pub fn kind(&self) -> ExtensionKind {
        self.form.kind()
    }

    pub fn rank(&self) -> usize {
        self.b.rows()
    }

    /// Checks that the state fits an n×m weight.
    pub fn check_weight(&self, w: &Matrix) -> Result<()> {
        let (n, m) = w.shape();
        check_rank(self.rank(), n, m)?;
        let a_rows = if self.kind() == ExtensionKind::SerialAdapter { m } else { n };
        if self.a.rows() != a_rows || self.b.cols() != m {
            return Err(Error::shape(
                "extension",
                format!(
                    "state (A {}x{}, B {}x{}) does not fit weight {n}x{m}",
                    self.a.rows(),
                    self.a.cols(),
                    self.b.rows(),
                    self.b.cols()
                ),
            ));
        }
        Ok(())
    }

    /// The unscaled addition term `ΔW`.
    ///
    /// Adapter kinds report the update they induce on the weight when the
    /// layer input is the identity: `h(WA)B` for the serial adapter and
    /// `h(A)B` for the parallel one.
    pub fn delta(&self, w: &Matrix) -> Result<Matrix> {
        self.check_weight(w)?;
        match &self.form {
            ExtensionForm::LoRA => self.a.matmul(&self.b),
            ExtensionForm::Adb { d } => self.a.scale_cols(d)?.matmul(&self.b),
            ExtensionForm::Agb { g } => self.a.matmul(g)?.matmul(&self.b),
            ExtensionForm::SerialAdapter { h } => h.apply(&w.matmul(&self.a)?).matmul(&self.b),
            ExtensionForm::ParallelAdapter { h } => h.apply(&self.a).matmul(&self.b),
        }
    }

    /// `φ(W) = W + s·ΔW`.
    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        let delta = self.delta(w)?;
        if self.scale == 0.0 {
            return Ok(w.clone());
        }
        w.add_scaled(&delta, self.scale)
    }

    pub fn is_adapter(&self) -> bool {
        matches!(self.kind(), ExtensionKind::SerialAdapter | ExtensionKind::ParallelAdapter)
    }

    /// Gradients of the factorized kinds given `∂L/∂φ(W)`, in parameter order.
    pub(crate) fn phi_grads(&self, d_phi: &Matrix) -> Result<Vec<Vec<f64>>> {
        let s = self.scale;
        match &self.form {
            ExtensionForm::LoRA => {
                let da = d_phi.matmul_t(&self.b)?.scale(s);
                let db = self.a.t_matmul(d_phi)?.scale(s);
                Ok(vec![da.into_vec(), db.into_vec()])
            }
            ExtensionForm::Adb { d } => {
                let da = d_phi.matmul_t(&self.b.scale_rows(d)?)?.scale(s);
                let at_dphi = self.a.t_matmul(d_phi)?;
                let dd: Vec<f64> = (0..self.rank())
                    .map(|k| s * at_dphi.row(k).iter().zip(self.b.row(k)).map(|(x, y)| x * y).sum::<f64>())
                    .collect();
                let db = at_dphi.scale_rows(d)?.scale(s);
                Ok(vec![da.into_vec(), dd, db.into_vec()])
            }
            ExtensionForm::Agb { g } => {
                let da = d_phi.matmul_t(&g.matmul(&self.b)?)?.scale(s);
                let at_dphi = self.a.t_matmul(d_phi)?;
                let dg = at_dphi.matmul_t(&self.b)?.scale(s);
                let db = g.t_matmul(&at_dphi)?.scale(s);
                Ok(vec![da.into_vec(), dg.into_vec(), db.into_vec()])
            }
            _ => Err(Error::Unsupported("adapters are differentiated through their forward pass".into())),
        }
    }

    /// Layer forward for adapter kinds: returns the pre-bias output and the
    /// bottleneck pre-activation.
    pub(crate) fn adapter_forward(&self, x: &Matrix, w: &Matrix) -> Result<(Matrix, AdapterCache)> {
        match &self.form {
            ExtensionForm::SerialAdapter { h } => {
                let base = x.matmul(w)?;
                let pre = base.matmul(&self.a)?;
                let out = base.add_scaled(&h.apply(&pre).matmul(&self.b)?, self.scale)?;
                Ok((out, AdapterCache { base: Some(base), pre }))
            }
            ExtensionForm::ParallelAdapter { h } => {
                let pre = x.matmul(&self.a)?;
                let out = x.matmul(w)?.add_scaled(&h.apply(&pre).matmul(&self.b)?, self.scale)?;
                Ok((out, AdapterCache { base: None, pre }))
            }
            _ => Err(Error::Unsupported("not an adapter".into())),
        }
    }

    /// Adapter backward: parameter gradients `[dA, dB]` and `∂L/∂x`.
    pub(crate) fn adapter_backward(
        &self,
        x: &Matrix,
        w: &Matrix,
        cache: &AdapterCache,
        dz: &Matrix,
    ) -> Result<(Vec<Vec<f64>>, Matrix)> {
        let h = self.activation().ok_or_else(|| Error::Unsupported("not an adapter".into()))?;
        let s = self.scale;
        let act = h.apply(&cache.pre);
        let db = act.t_matmul(dz)?.scale(s);
        let d_pre = h.backprop(&cache.pre, &dz.matmul_t(&self.b)?.scale(s));
        match &cache.base {
            Some(base) => {
                let da = base.t_matmul(&d_pre)?;
                let d_base = dz.add(&d_pre.matmul_t(&self.a)?)?;
                let dx = d_base.matmul_t(w)?;
                Ok((vec![da.into_vec(), db.into_vec()], dx))
            }
            None => {
                let da = x.t_matmul(&d_pre)?;
                let dx = dz.matmul_t(w)?.add(&d_pre.matmul_t(&self.a)?)?;
                Ok((vec![da.into_vec(), db.into_vec()], dx))
            }
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match &self.form {
            ExtensionForm::SerialAdapter { h } | ExtensionForm::ParallelAdapter { h } => Some(*h),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AdapterCache {
    /// `xW`, kept for the serial adapter only.
    pub base: Option<Matrix>,
    /// Bottleneck pre-activation.
    pub pre: Matrix,
}

impl Trainable for ExtensionState {
    fn param_names(&self) -> Vec<&'static str> {
        match self.form {
            ExtensionForm::Adb { .. } => vec!["A", "d", "B"],
            ExtensionForm::Agb { .. } => vec!["A", "G", "B"],
            _ => vec!["A", "B"],
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match &self.form {
            ExtensionForm::Adb { d } => vec![self.a.as_slice(), d, self.b.as_slice()],
            ExtensionForm::Agb { g } => vec![self.a.as_slice(), g.as_slice(), self.b.as_slice()],
            _ => vec![self.a.as_slice(), self.b.as_slice()],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match &mut self.form {
            ExtensionForm::Adb { d } => vec![self.a.as_mut_slice(), d.as_mut_slice(), self.b.as_mut_slice()],
            ExtensionForm::Agb { g } => vec![self.a.as_mut_slice(), g.as_mut_slice(), self.b.as_mut_slice()],
            _ => vec![self.a.as_mut_slice(), self.b.as_mut_slice()],
        }
    }
}

fn check_rank(r: usize, n: usize, m: usize) -> Result<()> {
    let max = n.min(m);
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    Ok(())
}

/// Rewrites `A·G·B` as a two-factor product `A*·B⋄` through `G = UΣVᵀ`:
/// `A* = A·U·Σ`, `B⋄ = Vᵀ·B`.
pub fn equivalence_transform(a: &Matrix, g: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    let r = g.rows();
    if g.cols() != r || a.cols() != r || b.rows() != r {
        return Err(Error::shape(
            "equivalence_transform",
            format!(
                "A {}x{}, G {}x{}, B {}x{}",
                a.rows(),
                a.cols(),
                g.rows(),
                g.cols(),
                b.rows(),
                b.cols()
            ),
        ));
    }
    let f = svd(g)?;
    let a_star = a.matmul(f.u())?.scale_cols(f.sigma())?;
    let b_diamond = f.v().t_matmul(b)?;
    Ok((a_star, b_diamond))
}

/// Factors of a target update under the constraints `A† = D₁Uᵀ`, `B† = VD₂`
/// with `D₁ = I_{r×n}` and `D₂ = I_{m×r}`: `A = U·D₁†` keeps the leading `r`
/// left singular vectors and `B = D₂†·Vᵀ` the leading `r` right ones, so
/// `AᵀA = BBᵀ = I_r` and `A·diag(σ₁..σ_r)·B` is the rank-r truncated SVD.
pub fn construct_constrained_factors(delta_star: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let (n, m) = delta_star.shape();
    check_rank(r, n, m)?;
    let f = svd(delta_star)?;
    let d1_pinv = Matrix::rect_identity(n, r);
    let d2_pinv = Matrix::rect_identity(r, m);
    let a = f.u().matmul(&d1_pinv)?;
    let b = d2_pinv.matmul_t(f.v())?;
    Ok((a, b))
}

/// `x + h(x·A)·B`.
pub fn serial_adapter_forward(x: &Matrix, a: &Matrix, b: &Matrix, h: Activation) -> Result<Matrix> {
    x.add(&h.apply(&x.matmul(a)?).matmul(b)?)
}

/// `x·W + h(x·A)·B`.
pub fn parallel_adapter_forward(x: &Matrix, w: &Matrix, a: &Matrix, b: &Matrix, h: Activation) -> Result<Matrix> {
    x.matmul(w)?.add(&h.apply(&x.matmul(a)?).matmul(b)?)
}
