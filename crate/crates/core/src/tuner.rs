//! Method names and the per-layer tuner state that dispatches over the three
//! tuner families.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::activation::Activation;
use crate::combination::{CombinationKind, CombinationState};
use crate::error::{Error, Result};
use crate::extension::{AdapterCache, ExtensionConfig, ExtensionKind, ExtensionState};
use crate::linalg::Matrix;
use crate::mpc::{mpc_grad, mpc_value, RegularizerKind, RegularizerSpec};
use crate::reconstruction::{ReconstructionKind, ReconstructionState};

/// Named trainable tensors.
pub trait Trainable {
    fn param_names(&self) -> Vec<&'static str>;
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn trainable_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Reconstruction,
    Extension,
    Combination,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    SamParser,
    Ia3,
    Ssl,
    Ssb,
    BitFit,
    LoRA,
    AdaLoRA,
    TriLoRA,
    FLoRA,
    SerialAdapter,
    ParallelAdapter,
    DoRA,
    Svdiff,
    Spectral,
    /// Full fine-tuning of `W` and the bias; the reference baseline.
    Full,
}

impl Method {
    /// The fourteen PEFT methods, excluding [`Method::Full`].
    pub const ALL: [Method; 14] = [
        Method::SamParser,
        Method::Ia3,
        Method::Ssl,
        Method::Ssb,
        Method::BitFit,
        Method::LoRA,
        Method::AdaLoRA,
        Method::TriLoRA,
        Method::FLoRA,
        Method::SerialAdapter,
        Method::ParallelAdapter,
        Method::DoRA,
        Method::Svdiff,
        Method::Spectral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SamParser => "sam_parser",
            Method::Ia3 => "ia3",
            Method::Ssl => "ssl",
            Method::Ssb => "ssb",
            Method::BitFit => "bitfit",
            Method::LoRA => "lora",
            Method::AdaLoRA => "adalora",
            Method::TriLoRA => "trilora",
            Method::FLoRA => "flora",
            Method::SerialAdapter => "serial_adapter",
            Method::ParallelAdapter => "parallel_adapter",
            Method::DoRA => "dora",
            Method::Svdiff => "svdiff",
            Method::Spectral => "spectral",
            Method::Full => "full",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Method::SamParser | Method::Ia3 | Method::Ssl | Method::Ssb | Method::BitFit => Family::Reconstruction,
            Method::LoRA
            | Method::AdaLoRA
            | Method::TriLoRA
            | Method::FLoRA
            | Method::SerialAdapter
            | Method::ParallelAdapter => Family::Extension,
            Method::DoRA | Method::Svdiff | Method::Spectral => Family::Combination,
            Method::Full => Family::Full,
        }
    }

    /// Whether the rank hyperparameter changes the state.
    pub fn uses_rank(self) -> bool {
        matches!(self.family(), Family::Extension) || matches!(self, Method::DoRA | Method::Spectral)
    }

    /// Regularizer a method carries on its own. AdaLoRA is the ADB form
    /// trained with the orthogonality penalty.
    pub fn builtin_regularizer(self) -> RegularizerKind {
        match self {
            Method::AdaLoRA => RegularizerKind::Orthogonal,
            _ => RegularizerKind::None,
        }
    }

    /// Whether the penalty regularizers apply to this method's factors.
    pub fn accepts_penalty(self) -> bool {
        matches!(self, Method::LoRA | Method::AdaLoRA | Method::TriLoRA | Method::FLoRA)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .chain(std::iter::once(&Method::Full))
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunerConfig {
    pub rank: usize,
    pub scale: f64,
    /// Bottleneck activation of the adapters.
    pub activation: Activation,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            scale: 1.0,
            activation: Activation::Relu,
        }
    }
}

/// Trainable state attached to one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum TunerState {
    Extension(ExtensionState),
    Reconstruction(ReconstructionState),
    Combination(CombinationState),
    Full { delta_w: Matrix, delta_b: Vec<f64> },
}

/// Intermediates of one tuned layer kept for backward.
#[derive(Debug, Clone)]
pub(crate) enum TunerCache {
    Weight(Matrix),
    Adapter(AdapterCache),
}

impl TunerState {
    /// Fresh state for `method` on the layer `(w, bias)`; `φ(W) = W` and the
    /// layer output is unchanged.
    pub fn attach<R: Rng + ?Sized>(
        method: Method,
        w: &Matrix,
        bias: &[f64],
        config: &TunerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, m) = w.shape();
        if bias.len() != m {
            return Err(Error::shape("attach", format!("bias of length {} for {m} outputs", bias.len())));
        }
        let ext = |kind: ExtensionKind, rng: &mut R| {
            let cfg = ExtensionConfig {
                scale: config.scale,
                activation: config.activation,
            };
            ExtensionState::init(kind, n, m, config.rank, cfg, rng).map(TunerState::Extension)
        };
        let rec = |kind: ReconstructionKind| ReconstructionState::init(kind, w, bias, 0).map(TunerState::Reconstruction);
        let comb =
            |kind: CombinationKind, rng: &mut R| CombinationState::init(kind, w, config.rank, rng).map(TunerState::Combination);
        match method {
            Method::SamParser => rec(ReconstructionKind::SingularValues),
            Method::Ia3 => rec(ReconstructionKind::Ia3),
            Method::Ssl => rec(ReconstructionKind::Ssl),
            Method::Ssb => rec(ReconstructionKind::Ssb),
            Method::BitFit => rec(ReconstructionKind::BitFit),
            Method::LoRA => ext(ExtensionKind::LoRA, rng),
            Method::AdaLoRA | Method::TriLoRA => ext(ExtensionKind::Adb, rng),
            Method::FLoRA => ext(ExtensionKind::Agb, rng),
            Method::SerialAdapter => ext(ExtensionKind::SerialAdapter, rng),
            Method::ParallelAdapter => ext(ExtensionKind::ParallelAdapter, rng),
            Method::DoRA => comb(CombinationKind::Dora, rng),
            Method::Svdiff => comb(CombinationKind::Svdiff, rng),
            Method::Spectral => comb(CombinationKind::SpectralAdapter, rng),
            Method::Full => Ok(TunerState::Full {
                delta_w: Matrix::zeros(n, m),
                delta_b: vec![0.0; m],
            }),
        }
    }

    /// The tuned weight `φ(W)`. Adapters report `W + s·ΔW` at identity input.
    pub fn effective_weight(&self, w: &Matrix) -> Result<Matrix> {
        match self {
            TunerState::Extension(e) => e.apply(w),
            TunerState::Reconstruction(r) => r.apply(w),
            TunerState::Combination(c) => c.apply(w),
            TunerState::Full { delta_w, .. } => w.add(delta_w),
        }
    }

    /// The bias the layer adds after `x·φ(W)`.
    pub fn effective_bias(&self, bias: &[f64]) -> Vec<f64> {
        match self {
            TunerState::Reconstruction(ReconstructionState::BitFit { bias: tuned }) => tuned.clone(),
            TunerState::Full { delta_b, .. } => bias.iter().zip(delta_b).map(|(b, d)| b + d).collect(),
            _ => bias.to_vec(),
        }
    }

    fn is_adapter(&self) -> bool {
        matches!(self, TunerState::Extension(e) if e.is_adapter())
    }

    /// Pre-activation `x·φ(W) + bias` of a tuned layer.
    pub(crate) fn forward(&self, x: &Matrix, w: &Matrix, bias: &[f64]) -> Result<(Matrix, TunerCache)> {
        let b = self.effective_bias(bias);
        if let (TunerState::Extension(e), true) = (self, self.is_adapter()) {
            let (out, cache) = e.adapter_forward(x, w)?;
            return Ok((out.add_row_vector(&b)?, TunerCache::Adapter(cache)));
        }
        let phi = self.effective_weight(w)?;
        let z = x.matmul(&phi)?.add_row_vector(&b)?;
        Ok((z, TunerCache::Weight(phi)))
    }

    /// Parameter gradients in [`Trainable::params`] order, and `∂L/∂x`.
    pub(crate) fn backward(
        &self,
        x: &Matrix,
        w: &Matrix,
        cache: &TunerCache,
        dz: &Matrix,
    ) -> Result<(Vec<Vec<f64>>, Matrix)> {
        match (self, cache) {
            (TunerState::Extension(e), TunerCache::Adapter(c)) => e.adapter_backward(x, w, c, dz),
            (_, TunerCache::Weight(phi)) => {
                let dx = dz.matmul_t(phi)?;
                let grads = match self {
                    TunerState::Reconstruction(ReconstructionState::BitFit { .. }) => vec![dz.column_sums()],
                    TunerState::Full { .. } => vec![x.t_matmul(dz)?.into_vec(), dz.column_sums()],
                    TunerState::Extension(e) => e.phi_grads(&x.t_matmul(dz)?)?,
                    TunerState::Reconstruction(r) => r.phi_grads(w, &x.t_matmul(dz)?)?,
                    TunerState::Combination(c) => c.phi_grads(w, &x.t_matmul(dz)?)?,
                };
                Ok((grads, dx))
            }
            _ => Err(Error::CacheMismatch("cache was produced by a different tuner form".into())),
        }
    }

    /// Smallest distance of a tuner-internal ReLU input to its kink.
    pub(crate) fn kink_margin(&self, cache: &TunerCache) -> f64 {
        match (self, cache) {
            (TunerState::Extension(e), TunerCache::Adapter(c)) => e
                .activation()
                .map_or(f64::INFINITY, |h| h.kink_margin(&c.pre)),
            (TunerState::Combination(c), _) => c.kink_margin(),
            _ => f64::INFINITY,
        }
    }

    /// `(A, B)` of the forms a penalty regularizer applies to.
    pub fn penalty_factors(&self) -> Option<(&Matrix, &Matrix)> {
        match self {
            TunerState::Extension(e) if !e.is_adapter() => Some((&e.a, &e.b)),
            _ => None,
        }
    }

    /// `λ·MPC(A, B)` and its gradient laid out like [`Trainable::params`].
    /// Returns `None` when `spec` is not a penalty.
    pub fn penalty(&self, spec: &RegularizerSpec) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
        if !spec.kind.is_penalty() {
            return Ok(None);
        }
        let (a, b) = self
            .penalty_factors()
            .ok_or_else(|| Error::Unsupported(format!("mpc `{}` needs a factorized extension tuner", spec.kind)))?;
        let value = spec.lambda * mpc_value(spec.kind, a, b)?;
        let (ga, gb) = mpc_grad(spec.kind, a, b)?;
        let mut grads: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let last = grads.len() - 1;
        grads[0] = ga.scale(spec.lambda).into_vec();
        grads[last] = gb.scale(spec.lambda).into_vec();
        Ok(Some((value, grads)))
    }
}

impl Trainable for TunerState {
    fn param_names(&self) -> Vec<&'static str> {
        match self {
            TunerState::Extension(e) => e.param_names(),
            TunerState::Reconstruction(r) => r.param_names(),
            TunerState::Combination(c) => c.param_names(),
            TunerState::Full { .. } => vec!["delta_w", "delta_b"],
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match self {
            TunerState::Extension(e) => e.params(),
            TunerState::Reconstruction(r) => r.params(),
            TunerState::Combination(c) => c.params(),
            TunerState::Full { delta_w, delta_b } => vec![delta_w.as_slice(), delta_b],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            TunerState::Extension(e) => e.params_mut(),
            TunerState::Reconstruction(r) => r.params_mut(),
            TunerState::Combination(c) => c.params_mut(),
            TunerState::Full { delta_w, delta_b } => vec![delta_w.as_mut_slice(), delta_b],
        }
    }
}
