//! Runs the `method × rank × seed` grid of a config in a worker pool.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use subtune_core::train::{accuracy, evaluate, train, Loss, TrainConfig};
use subtune_core::{Model, RegularizerSpec, TunerConfig};

use crate::config::{ExperimentConfig, MethodSpec, TaskConfig};
use crate::error::{BenchError, Result};
use crate::params::permille;
use crate::report::{aggregate, write_csv, Aggregate, Direction, Row};
use crate::task::{gen_recovery_task, gen_toy_classification, pretrain, PretrainConfig, RecoveryTask, ToyClassification};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed of the task shared by every method at `seed`.
pub fn task_seed(master_seed: u64, seed: u64) -> u64 {
    mix(&[master_seed, seed, fnv1a(b"task")])
}

/// Seed of one cell; independent of where the cell sits in the grid.
pub fn cell_seed(master_seed: u64, label: &str, rank: usize, seed: u64) -> u64 {
    mix(&[master_seed, fnv1a(label.as_bytes()), rank as u64, seed])
}

enum SeedContext {
    Recovery(RecoveryTask),
    Classification { data: ToyClassification, base: Model },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub method: String,
    pub rank: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub metric: &'static str,
    pub backbone_params: usize,
    pub rows: Vec<Row>,
    pub failures: Vec<Failure>,
    pub aggregate: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn direction(&self) -> Direction {
        if self.metric == "accuracy" {
            Direction::Higher
        } else {
            Direction::Lower
        }
    }

    pub fn has_failures(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_csv(&self.rows, &mut buf)?;
        Ok(buf)
    }

    pub fn json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&csv, self.csv_bytes()?).map_err(|e| BenchError::io(&csv, e))?;
        std::fs::write(&json, self.json()? + "\n").map_err(|e| BenchError::io(&json, e))?;
        Ok((csv, json))
    }

    /// Metric values of one method at one rank, in seed order.
    pub fn metrics(&self, method: &str, rank: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.rank == rank)
            .map(|r| r.final_metric)
            .collect()
    }
}

fn seed_context(config: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let ts = task_seed(config.master_seed, seed);
    match &config.task {
        TaskConfig::Recovery {
            n,
            m,
            planted_rank,
            noise_std,
        } => Ok(SeedContext::Recovery(gen_recovery_task(ts, *n, *m, *planted_rank, *noise_std)?)),
        TaskConfig::Classification {
            widths,
            pretrain_steps,
            pretrain_lr,
            batch_size,
        } => {
            let data = gen_toy_classification(ts);
            let pc = PretrainConfig {
                steps: *pretrain_steps,
                lr: *pretrain_lr,
                batch_size: *batch_size,
            };
            let base = pretrain(widths, &data.task_a.train, &pc, ts)?;
            Ok(SeedContext::Classification { data, base })
        }
    }
}

struct CellOutcome {
    params: usize,
    backbone: usize,
    metric: f64,
    wallclock_ms: u64,
}

fn run_cell(config: &ExperimentConfig, spec: &MethodSpec, rank: usize, seed: u64, ctx: &SeedContext) -> Result<CellOutcome> {
    let cs = cell_seed(config.master_seed, &spec.label(), rank, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cs);
    let tuner = TunerConfig {
        rank,
        scale: config.scale,
        activation: config.activation()?,
    };
    let mut train_config = TrainConfig {
        steps: config.steps,
        lr: config.lr_for(spec),
        optimizer: config.optimizer.build(),
        batch_size: 0,
        loss: Loss::Mse,
        regularizer: RegularizerSpec::new(spec.regularizer, config.lambda)?,
        nonlinearity: tuner.activation,
        seed: cs,
    };
    let (mut model, data, test) = match ctx {
        SeedContext::Recovery(task) => (task.model(seed)?, task.dataset(), None),
        SeedContext::Classification { data, base } => {
            if let TaskConfig::Classification { batch_size, .. } = &config.task {
                train_config.batch_size = *batch_size;
            }
            train_config.loss = Loss::CrossEntropy;
            (base.clone(), data.task_b.train.clone(), Some(&data.task_b.test))
        }
    };
    for i in 0..model.depth() {
        let layer = &model.layers()[i];
        let cap = layer.input_dim().min(layer.output_dim());
        let layer_tuner = TunerConfig {
            rank: rank.min(cap),
            ..tuner
        };
        model.attach(i, spec.method, &layer_tuner, &mut rng)?;
    }
    let backbone = model.frozen_count();
    let trace = train(&mut model, &data, &train_config)?;
    let metric = match test {
        Some(test) => accuracy(&model, test)?,
        None => evaluate(&model, &data, Loss::Mse)?,
    };
    Ok(CellOutcome {
        params: model.trainable_count(),
        backbone,
        metric,
        wallclock_ms: if config.timing { trace.wallclock_ms } else { 0 },
    })
}

/// Runs every cell of `config` on `threads` workers (0 picks the default).
/// Failed cells are kept in the report with a NaN metric.
pub fn run_experiment(config: &ExperimentConfig, threads: usize) -> Result<ExperimentReport> {
    config.validate()?;
    let specs = config.method_specs()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
    let metric = match config.task {
        TaskConfig::Recovery { .. } => "loss",
        TaskConfig::Classification { .. } => "accuracy",
    };

    let contexts: Vec<std::result::Result<SeedContext, String>> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&s| seed_context(config, s).map_err(|e| e.to_string()))
            .collect()
    });
    let cells: Vec<(usize, &MethodSpec, usize, u64)> = specs
        .iter()
        .flat_map(|spec| {
            config.ranks.iter().flat_map(move |&rank| {
                config.seeds.iter().enumerate().map(move |(si, &seed)| (si, spec, rank, seed))
            })
        })
        .collect();
    let outcomes: Vec<std::result::Result<CellOutcome, String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(si, spec, rank, seed)| match &contexts[si] {
                Ok(ctx) => run_cell(config, spec, rank, seed, ctx).map_err(|e| e.to_string()),
                Err(e) => Err(format!("task setup failed: {e}")),
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(cells.len());
    let mut failures = Vec::new();
    let mut backbone_params = 0;
    for ((_, spec, rank, seed), outcome) in cells.iter().zip(outcomes) {
        let label = spec.label();
        match outcome {
            Ok(o) => {
                backbone_params = o.backbone;
                rows.push(Row {
                    method: label,
                    rank: *rank,
                    seed: *seed,
                    params: o.params,
                    permille: permille(o.params, o.backbone),
                    final_metric: o.metric,
                    wallclock_ms: o.wallclock_ms,
                });
            }
            Err(reason) => {
                rows.push(Row {
                    method: label.clone(),
                    rank: *rank,
                    seed: *seed,
                    params: 0,
                    permille: f64::NAN,
                    final_metric: f64::NAN,
                    wallclock_ms: 0,
                });
                failures.push(Failure {
                    method: label,
                    rank: *rank,
                    seed: *seed,
                    reason,
                });
            }
        }
    }
    let aggregate = aggregate(&rows);
    Ok(ExperimentReport {
        metric,
        backbone_params,
        rows,
        failures,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_order_independent() {
        assert_eq!(cell_seed(1, "lora", 4, 7), cell_seed(1, "lora", 4, 7));
        assert_ne!(cell_seed(1, "lora", 4, 7), cell_seed(1, "lora", 4, 8));
        assert_ne!(cell_seed(1, "lora", 4, 7), cell_seed(1, "flora", 4, 7));
        assert_ne!(task_seed(0, 1), task_seed(1, 1));
    }

    #[test]
    fn one_cell_report() {
        let config = ExperimentConfig::from_toml(
            r#"
methods = ["lora"]
ranks = [2]
seeds = [0]
steps = 20
[task]
kind = "recovery"
n = 6
m = 5
planted_rank = 1
"#,
        )
        .unwrap();
        let report = run_experiment(&config, 1).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].params, 2 * (6 + 5));
        assert!(!report.has_failures());
        assert_eq!(report.aggregate.len(), 1);
    }

    #[test]
    fn failed_cells_are_recorded() {
        let config = ExperimentConfig::from_toml(
            r#"
methods = ["lora", "ssb"]
ranks = [2]
seeds = [0]
steps = 50
lr = 1e200
optimizer = "sgd"
[task]
kind = "recovery"
n = 6
m = 5
planted_rank = 1
"#,
        )
        .unwrap();
        let report = run_experiment(&config, 2).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.has_failures());
        assert!(report.failures.iter().all(|f| f.reason.contains("diverged")));
    }
}
