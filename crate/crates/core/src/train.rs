//! Losses, optimizers and the training loop over tuner parameters.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::mpc::{mpc_n_wrap, RegularizerKind, RegularizerSpec};
use crate::tuner::TunerState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Loss {
    /// Mean over every entry of `(pred − target)²`.
    #[default]
    Mse,
    /// Softmax cross-entropy against one-hot rows, averaged over the batch.
    CrossEntropy,
}

/// Inputs and targets, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::shape("Dataset", format!("{} inputs, {} targets", x.rows(), y.rows())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Minibatch size; 0 or anything at least the dataset size means full batch.
    pub batch_size: usize,
    pub loss: Loss,
    pub regularizer: RegularizerSpec,
    /// Activation inserted by the nonlinear constraint.
    pub nonlinearity: Activation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-2,
            optimizer: Optimizer::adam(),
            batch_size: 0,
            loss: Loss::Mse,
            regularizer: RegularizerSpec::none(),
            nonlinearity: Activation::Relu,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::InvalidConfig("adam needs betas in [0, 1) and eps > 0".into()));
            }
        }
        RegularizerSpec::new(self.regularizer.kind, self.regularizer.lambda)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Objective (task loss plus penalty) at each step, before its update.
    pub loss_per_step: Vec<f64>,
    pub final_params: Vec<Vec<f64>>,
    pub wallclock_ms: u64,
}

/// Loss value and `∂L/∂pred`.
pub fn loss_and_grad(loss: Loss, pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    match loss {
        Loss::Mse => {
            let diff = pred.sub(target)?;
            let count = (pred.rows() * pred.cols()) as f64;
            let value = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / count;
            Ok((value, diff.scale(2.0 / count)))
        }
        Loss::CrossEntropy => {
            let batch = pred.rows() as f64;
            let mut grad = Matrix::zeros(pred.rows(), pred.cols());
            let mut value = 0.0;
            for i in 0..pred.rows() {
                let row = pred.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                for (j, &v) in row.iter().enumerate() {
                    let t = target.get(i, j);
                    value -= t * (v - log_z);
                    grad.set(i, j, ((v - log_z).exp() - t) / batch);
                }
            }
            Ok((value / batch, grad))
        }
    }
}

/// Objective on `data` and its gradient over [`Model::params`].
pub fn objective(model: &Model, data: &Dataset, loss: Loss, regularizer: &RegularizerSpec) -> Result<(f64, Vec<Vec<f64>>)> {
    let (pred, cache) = model.forward(&data.x)?;
    let (mut value, d_out) = loss_and_grad(loss, &pred, &data.y)?;
    let mut grads = model.backward(&cache, &d_out)?;
    if regularizer.kind.is_penalty() {
        let mut offset = 0;
        for layer in model.layers() {
            let Some(t) = &layer.tuner else { continue };
            let count = crate::tuner::Trainable::params(t).len();
            if let Some((v, g)) = t.penalty(regularizer)? {
                value += v;
                for (dst, src) in grads[offset..offset + count].iter_mut().zip(g) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            offset += count;
        }
    }
    Ok((value, grads))
}

/// Task loss without any penalty.
pub fn evaluate(model: &Model, data: &Dataset, loss: Loss) -> Result<f64> {
    let pred = model.predict(&data.x)?;
    Ok(loss_and_grad(loss, &pred, &data.y)?.0)
}

/// Fraction of rows whose arg-max prediction matches the one-hot target.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let pred = model.predict(&data.x)?;
    if pred.shape() != data.y.shape() {
        return Err(Error::shape("accuracy", "prediction and target shapes differ"));
    }
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
            .0
    };
    let hits = (0..pred.rows())
        .filter(|&i| argmax(pred.row(i)) == argmax(data.y.row(i)))
        .count();
    Ok(hits as f64 / pred.rows().max(1) as f64)
}

/// Structural part of the regularizer: rewrites LoRA states as parallel
/// adapters when the nonlinear constraint is requested.
pub fn prepare(model: &mut Model, config: &TrainConfig) -> Result<()> {
    if config.regularizer.kind != RegularizerKind::Nonlinear {
        return Ok(());
    }
    for i in 0..model.depth() {
        let layer = model.layer_mut(i);
        if let Some(t) = layer.tuner.take() {
            let wrapped = match t {
                TunerState::Extension(e) => TunerState::Extension(mpc_n_wrap(e, config.nonlinearity)?),
                _ => return Err(Error::Unsupported("the nonlinear constraint needs a LoRA tuner".into())),
            };
            layer.tuner = Some(wrapped);
        }
    }
    Ok(())
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Trains the tuner parameters of `model` in place. Frozen weights never change.
pub fn train(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<TrainTrace> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    prepare(model, config)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let full_batch = config.batch_size == 0 || config.batch_size >= data.len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState {
        m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        t: 0,
    };
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch;
        let data_ref = if full_batch {
            data
        } else {
            if cursor + config.batch_size > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch = data.subset(&order[cursor..cursor + config.batch_size]);
            cursor += config.batch_size;
            &batch
        };
        let (value, grads) = match objective(model, data_ref, config.loss, &config.regularizer) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        if !value.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step });
        }
        losses.push(value);

        match config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in model.params_mut().into_iter().zip(&grads) {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= config.lr * d;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                adam.t += 1;
                let c1 = 1.0 - beta1.powi(adam.t);
                let c2 = 1.0 - beta2.powi(adam.t);
                for (k, (p, g)) in model.params_mut().into_iter().zip(&grads).enumerate() {
                    for (i, (x, d)) in p.iter_mut().zip(g).enumerate() {
                        let m = &mut adam.m[k][i];
                        let v = &mut adam.v[k][i];
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        *x -= config.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        if model.params().iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged { step });
        }
    }

    Ok(TrainTrace {
        loss_per_step: losses,
        final_params: model.params_snapshot(),
        wallclock_ms: start.elapsed().as_millis() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuner::{Method, TunerConfig};

    fn setup(seed: u64) -> (Model, Dataset) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::mlp(&[4, 8, 3], seed, &mut g).unwrap();
        let x = Matrix::random_normal(16, 4, 1.0, &mut g);
        let y = Matrix::random_normal(16, 3, 1.0, &mut g);
        (model, Dataset::new(x, y).unwrap())
    }

    #[test]
    fn mse_and_cross_entropy_values() {
        let p = Matrix::from_rows(&[&[1.0, 2.0]]);
        let t = Matrix::from_rows(&[&[0.0, 0.0]]);
        let (v, g) = loss_and_grad(Loss::Mse, &p, &t).unwrap();
        assert!((v - 2.5).abs() < 1e-15);
        assert_eq!(g, Matrix::from_rows(&[&[1.0, 2.0]]));

        let p = Matrix::from_rows(&[&[0.0, 0.0]]);
        let t = Matrix::from_rows(&[&[1.0, 0.0]]);
        let (v, g) = loss_and_grad(Loss::CrossEntropy, &p, &t).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!((g.get(0, 0) + 0.5).abs() < 1e-15 && (g.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tiny_learning_rate_changes_nothing() {
        let (mut model, data) = setup(1);
        let mut g = ChaCha8Rng::seed_from_u64(9);
        model.attach_all(Method::LoRA, &TunerConfig { rank: 2, ..TunerConfig::default() }, &mut g).unwrap();
        let before = model.params_snapshot();
        let config = TrainConfig { steps: 20, lr: 1e-300, ..TrainConfig::default() };
        let trace = train(&mut model, &data, &config).unwrap();
        for (a, b) in trace.final_params.iter().flatten().zip(before.iter().flatten()) {
            assert!((a - b).abs() <= 1e-290);
        }
        let first = trace.loss_per_step[0];
        assert!(trace.loss_per_step.iter().all(|l| (l - first).abs() <= 1e-15 * first));
    }

    #[test]
    fn no_tuner_means_no_trainables() {
        let (mut model, data) = setup(2);
        let fp = model.frozen_fingerprint();
        let trace = train(&mut model, &data, &TrainConfig { steps: 5, ..TrainConfig::default() }).unwrap();
        assert!(trace.final_params.is_empty());
        assert_eq!(model.frozen_fingerprint(), fp);
    }

    #[test]
    fn training_is_deterministic_and_leaves_frozen_weights() {
        let (base, data) = setup(3);
        let run = || {
            let mut model = base.clone();
            let mut g = ChaCha8Rng::seed_from_u64(11);
            model.attach_all(Method::Ssb, &TunerConfig::default(), &mut g).unwrap();
            let config = TrainConfig {
                steps: 50,
                batch_size: 5,
                seed: 4,
                ..TrainConfig::default()
            };
            let trace = train(&mut model, &data, &config).unwrap();
            (trace, model.frozen_fingerprint())
        };
        let (a, fa) = run();
        let (b, fb) = run();
        assert_eq!(a.loss_per_step, b.loss_per_step);
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(fa, base.frozen_fingerprint());
        assert_eq!(fa, fb);
    }

    #[test]
    fn divergence_names_the_step() {
        let (mut model, data) = setup(5);
        let mut g = ChaCha8Rng::seed_from_u64(12);
        model.attach_all(Method::Full, &TunerConfig::default(), &mut g).unwrap();
        let config = TrainConfig {
            steps: 200,
            lr: 1e150,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut model, &data, &config), Err(Error::Diverged { .. })));
    }

    #[test]
    fn nonlinear_constraint_rewrites_lora() {
        let (mut model, data) = setup(6);
        let mut g = ChaCha8Rng::seed_from_u64(13);
        model.attach_all(Method::LoRA, &TunerConfig { rank: 2, ..TunerConfig::default() }, &mut g).unwrap();
        let config = TrainConfig {
            steps: 1,
            regularizer: RegularizerSpec::new(RegularizerKind::Nonlinear, 0.0).unwrap(),
            ..TrainConfig::default()
        };
        train(&mut model, &data, &config).unwrap();
        assert!(matches!(
            &model.layers()[0].tuner,
            Some(TunerState::Extension(e)) if e.is_adapter()
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
