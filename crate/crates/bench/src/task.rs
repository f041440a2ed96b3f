//! Synthetic tasks: planted low-rank weight recovery and a 2-D toy
//! classification pair for pretrain-then-fine-tune runs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use subtune_core::train::{train, Dataset, Loss, Optimizer, TrainConfig};
use subtune_core::{Activation, Error, Layer, Matrix, Method, Model, TunerConfig};

use crate::error::Result;

pub const PROBES: usize = 64;

/// A frozen `w` and a hidden optimum `w_star = w + X·Yᵀ + noise`, observed
/// through probe inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryTask {
    pub w: Matrix,
    pub w_star: Matrix,
    pub probes: Matrix,
    pub targets: Matrix,
    pub planted_rank: usize,
    pub noise_std: f64,
}

impl RecoveryTask {
    pub fn dataset(&self) -> Dataset {
        Dataset {
            x: self.probes.clone(),
            y: self.targets.clone(),
        }
    }

    /// One linear layer holding `w`, zero bias.
    pub fn model(&self, seed: u64) -> Result<Model> {
        let layer = Layer::new(self.w.clone(), vec![0.0; self.w.cols()], Activation::Identity)?;
        Ok(Model::new(vec![layer], seed)?)
    }
}

pub fn gen_recovery_task(seed: u64, n: usize, m: usize, planted_rank: usize, noise_std: f64) -> Result<RecoveryTask> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidConfig("task dimensions must be positive".into()).into());
    }
    if planted_rank > n.min(m) {
        return Err(Error::RankOutOfRange {
            rank: planted_rank,
            max: n.min(m),
        }
        .into());
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise_std must be non-negative, got {noise_std}")).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::random_normal(n, m, 1.0 / (n as f64).sqrt(), &mut rng);
    let mut w_star = w.clone();
    if planted_rank > 0 {
        let std = 1.0 / (planted_rank as f64).sqrt();
        let x = Matrix::random_normal(n, planted_rank, std, &mut rng);
        let y = Matrix::random_normal(m, planted_rank, std, &mut rng);
        w_star = w_star.add(&x.matmul_t(&y)?)?;
    }
    if noise_std > 0.0 {
        w_star = w_star.add(&Matrix::random_normal(n, m, noise_std, &mut rng))?;
    }
    let probes = Matrix::random_normal(PROBES, n, 1.0, &mut rng);
    let targets = probes.matmul(&w_star)?;
    Ok(RecoveryTask {
        w,
        w_star,
        probes,
        targets,
        planted_rank,
        noise_std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationTask {
    pub train: Dataset,
    pub test: Dataset,
}

/// Task A is used for pretraining, task B (rotated and shifted) for tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassification {
    pub task_a: ClassificationTask,
    pub task_b: ClassificationTask,
}

pub const TRAIN_POINTS: usize = 2000;
pub const TEST_POINTS: usize = 500;
const COMPONENT_STD: f64 = 0.8;
const CENTERS: [[[f64; 2]; 2]; 2] = [[[-2.0, 0.5], [-1.0, -1.5]], [[2.0, -0.5], [1.0, 1.5]]];
const TASK_B_ANGLE: f64 = std::f64::consts::FRAC_PI_4;
const TASK_B_SHIFT: [f64; 2] = [0.5, -0.5];

fn sample_split(rng: &mut ChaCha8Rng, points: usize, angle: f64, shift: [f64; 2]) -> Dataset {
    let noise = Normal::new(0.0, COMPONENT_STD).expect("valid std");
    let (sin, cos) = angle.sin_cos();
    let per_class = points / 2;
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(points);
    for (class, centers) in CENTERS.iter().enumerate() {
        for i in 0..per_class {
            let c = centers[i % 2];
            let p = [c[0] + noise.sample(rng), c[1] + noise.sample(rng)];
            let q = [cos * p[0] - sin * p[1] + shift[0], sin * p[0] + cos * p[1] + shift[1]];
            rows.push((q, class));
        }
    }
    rows.shuffle(rng);
    Dataset {
        x: Matrix::from_fn(rows.len(), 2, |i, j| rows[i].0[j]),
        y: Matrix::from_fn(rows.len(), 2, |i, j| if rows[i].1 == j { 1.0 } else { 0.0 }),
    }
}

/// Two-component Gaussian mixtures per class with exactly balanced labels.
pub fn gen_toy_classification(seed: u64) -> ToyClassification {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut task = |angle, shift| ClassificationTask {
        train: sample_split(&mut rng, TRAIN_POINTS, angle, shift),
        test: sample_split(&mut rng, TEST_POINTS, angle, shift),
    };
    let task_a = task(0.0, [0.0, 0.0]);
    let task_b = task(TASK_B_ANGLE, TASK_B_SHIFT);
    ToyClassification { task_a, task_b }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Trains a fresh MLP on `data` with full fine-tuning and folds the update
/// into its weights.
pub fn pretrain(widths: &[usize], data: &Dataset, config: &PretrainConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::mlp(widths, seed, &mut rng)?;
    model.attach_all(Method::Full, &TunerConfig::default(), &mut rng)?;
    let train_config = TrainConfig {
        steps: config.steps,
        lr: config.lr,
        optimizer: Optimizer::adam(),
        batch_size: config.batch_size,
        loss: Loss::CrossEntropy,
        seed,
        ..TrainConfig::default()
    };
    train(&mut model, data, &train_config)?;
    model.merge()?;
    Ok(model)
}
