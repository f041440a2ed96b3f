//! Central finite differences and the per-method gradient check suite.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::mpc::{RegularizerKind, RegularizerSpec};
use crate::reconstruction::{soft_prompt_backward, soft_prompt_forward};
use crate::train::{loss_and_grad, objective, prepare, Dataset, Loss, TrainConfig};
use crate::tuner::{Method, TunerConfig};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Instances with a ReLU input closer than this to zero are resampled.
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_RESAMPLES: usize = 200;

/// `(f(θ + εe_i) − f(θ − εe_i)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, theta: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + eps;
            let up = f(&probe);
            probe[i] = theta[i] - eps;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are below 1e-9.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-9 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckCase {
    pub method: Method,
    pub regularizer: RegularizerKind,
}

impl GradcheckCase {
    pub fn plain(method: Method) -> Self {
        Self {
            method,
            regularizer: method.builtin_regularizer(),
        }
    }

    pub fn label(&self) -> String {
        match self.regularizer {
            RegularizerKind::None => self.method.name().to_string(),
            k => format!("{}+mpc_{k}", self.method),
        }
    }
}

impl fmt::Display for GradcheckCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Every method plus the regularized LoRA-family variants.
pub fn default_cases() -> Vec<GradcheckCase> {
    let mut cases: Vec<GradcheckCase> = Method::ALL.iter().map(|&m| GradcheckCase::plain(m)).collect();
    cases.push(GradcheckCase::plain(Method::Full));
    for (method, regularizer) in [
        (Method::LoRA, RegularizerKind::Orthogonal),
        (Method::LoRA, RegularizerKind::Diagonal),
        (Method::LoRA, RegularizerKind::Nonlinear),
        (Method::TriLoRA, RegularizerKind::Diagonal),
        (Method::FLoRA, RegularizerKind::Orthogonal),
    ] {
        cases.push(GradcheckCase { method, regularizer });
    }
    cases
}

/// Worst relative error of one tensor over the checked instances.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub case: String,
    pub tensor: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub resampled: usize,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn perturb(values: &mut [f64], rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for v in values {
        *v += noise.sample(rng);
    }
}

fn random_instance(case: &GradcheckCase, instance: usize, rng: &mut ChaCha8Rng) -> Result<(Model, Dataset, Loss)> {
    let mut model = Model::mlp(&[5, 7, 4], 0, rng)?;
    for i in 0..model.depth() {
        let layer = model.layer_mut(i);
        let bias: Vec<f64> = (0..layer.output_dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
        *layer = crate::model::Layer::new(layer.weight().clone(), bias, layer.activation)?;
    }
    let config = TunerConfig {
        rank: 2,
        scale: 0.8,
        ..TunerConfig::default()
    };
    model.attach_all(case.method, &config, rng)?;
    prepare(
        &mut model,
        &TrainConfig {
            regularizer: RegularizerSpec::new(case.regularizer, 0.5)?,
            ..TrainConfig::default()
        },
    )?;
    for p in model.params_mut() {
        perturb(p, rng);
    }
    let x = Matrix::random_normal(6, 5, 1.0, rng);
    let (loss, y) = if instance.is_multiple_of(2) {
        (Loss::Mse, Matrix::random_normal(6, 4, 1.0, rng))
    } else {
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        (Loss::CrossEntropy, Matrix::from_fn(6, 4, |i, j| if labels[i] == j { 1.0 } else { 0.0 }))
    };
    Ok((model, Dataset::new(x, y)?, loss))
}

/// Compares analytic and finite-difference gradients of every trainable
/// tensor on `instances` random two-layer ReLU models.
pub fn check_case(case: &GradcheckCase, instances: usize, seed: u64) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = RegularizerSpec::new(case.regularizer, 0.5)?;
    let mut worst: Vec<TensorCheck> = Vec::new();
    let mut resampled = 0;
    for instance in 0..instances {
        let mut attempt = 0;
        let (model, data, loss) = loop {
            let candidate = random_instance(case, instance, &mut rng)?;
            let (_, cache) = candidate.0.forward(&candidate.1.x)?;
            if candidate.0.kink_margin(&cache) >= KINK_MARGIN {
                break candidate;
            }
            attempt += 1;
            resampled += 1;
            if attempt >= MAX_RESAMPLES {
                return Err(Error::Unsupported(format!("{case}: no kink-free instance found")));
            }
        };
        let (_, analytic) = objective(&model, &data, loss, &spec)?;
        let names = model.param_names();
        if worst.is_empty() {
            worst = names
                .iter()
                .map(|n| TensorCheck {
                    case: case.label(),
                    tensor: n.clone(),
                    instances: 0,
                    max_rel_error: 0.0,
                    resampled: 0,
                })
                .collect();
        }
        let theta = model.params_snapshot();
        for (k, check) in worst.iter_mut().enumerate() {
            let mut probe = model.clone();
            let numeric = finite_diff_grad(
                |t| {
                    probe.params_mut()[k].copy_from_slice(t);
                    objective(&probe, &data, loss, &spec).map_or(f64::NAN, |r| r.0)
                },
                &theta[k],
                EPSILON,
            );
            let err = relative_error(&analytic[k], &numeric);
            check.max_rel_error = if err.is_nan() { f64::INFINITY } else { check.max_rel_error.max(err) };
            check.instances += 1;
        }
    }
    for check in &mut worst {
        check.resampled = resampled;
    }
    Ok(worst)
}

/// Soft-prompt gradient through `[P; xW]` under squared loss.
pub fn check_soft_prompt(instances: usize, seed: u64) -> Result<TensorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..instances {
        let w = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let x = Matrix::random_normal(6, 5, 1.0, &mut rng);
        let prompt = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let target = Matrix::random_normal(9, 4, 1.0, &mut rng);
        let value = |p: &Matrix| -> Result<(f64, Matrix)> {
            let out = soft_prompt_forward(&x, &w, p)?;
            loss_and_grad(Loss::Mse, &out, &target)
        };
        let (_, d_out) = value(&prompt)?;
        let analytic = soft_prompt_backward(&d_out, 3)?;
        let numeric = finite_diff_grad(
            |t| {
                let p = Matrix::new(3, 4, t.to_vec()).expect("finite probe");
                value(&p).map_or(f64::NAN, |r| r.0)
            },
            prompt.as_slice(),
            EPSILON,
        );
        max_err = max_err.max(relative_error(analytic.as_slice(), &numeric));
    }
    Ok(TensorCheck {
        case: "soft_prompt".into(),
        tensor: "prompt".into(),
        instances,
        max_rel_error: max_err,
        resampled: 0,
    })
}

/// Runs every default case plus the soft-prompt check.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<TensorCheck>> {
    let mut out = Vec::new();
    for (i, case) in default_cases().iter().enumerate() {
        out.extend(check_case(case, instances, seed.wrapping_add(i as u64 * 7919))?);
    }
    out.push(check_soft_prompt(instances, seed)?);
    Ok(out)
}
