//! TOML experiment configuration.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use subtune_core::{Activation, Method, Optimizer, RegularizerKind};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerName {
    pub fn build(self) -> Optimizer {
        match self {
            OptimizerName::Adam => Optimizer::adam(),
            OptimizerName::Sgd => Optimizer::Sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskConfig {
    /// Single linear layer fitted to probes of a planted optimum.
    Recovery {
        n: usize,
        m: usize,
        planted_rank: usize,
        #[serde(default)]
        noise_std: f64,
    },
    /// Pretrain an MLP on task A, fine-tune on task B, report test accuracy.
    Classification {
        #[serde(default = "default_widths")]
        widths: Vec<usize>,
        #[serde(default = "default_pretrain_steps")]
        pretrain_steps: usize,
        #[serde(default = "default_pretrain_lr")]
        pretrain_lr: f64,
        #[serde(default = "default_batch_size")]
        batch_size: usize,
    },
}

fn default_widths() -> Vec<usize> {
    vec![2, 256, 256, 2]
}
fn default_pretrain_steps() -> usize {
    500
}
fn default_pretrain_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    64
}
fn default_ranks() -> Vec<usize> {
    vec![2, 4, 8, 16]
}
fn default_steps() -> usize {
    2000
}
fn default_lr() -> f64 {
    1e-2
}
fn default_lambda() -> f64 {
    subtune_core::mpc::DEFAULT_LAMBDA
}
fn default_scale() -> f64 {
    1.0
}
fn default_activation() -> String {
    "relu".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Method names, optionally suffixed with `+mpc_o`, `+mpc_d` or `+mpc_n`.
    pub methods: Vec<String>,
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerName,
    /// Regularizer applied to every method without its own suffix: none, o, d or n.
    #[serde(default = "none_string")]
    pub mpc: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub master_seed: u64,
    /// Record wall-clock time per cell. Off by default so reports stay byte-stable.
    #[serde(default)]
    pub timing: bool,
    #[serde(default = "default_activation")]
    pub adapter_activation: String,
    /// Per-method learning rates keyed by method label or bare name.
    #[serde(default)]
    pub lr_overrides: BTreeMap<String, f64>,
    pub task: TaskConfig,
}

fn none_string() -> String {
    "none".into()
}

/// A method together with the regularizer it trains under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MethodSpec {
    pub method: Method,
    pub regularizer: RegularizerKind,
    explicit: bool,
}

impl MethodSpec {
    pub fn new(method: Method, regularizer: RegularizerKind) -> Self {
        Self {
            method,
            regularizer,
            explicit: regularizer != method.builtin_regularizer(),
        }
    }

    pub fn label(&self) -> String {
        if self.explicit {
            format!("{}+mpc_{}", self.method, self.regularizer)
        } else {
            self.method.name().to_string()
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match self.regularizer {
            RegularizerKind::None => true,
            RegularizerKind::Orthogonal | RegularizerKind::Diagonal => self.method.accepts_penalty(),
            RegularizerKind::Nonlinear => self.method == Method::LoRA,
        };
        if ok {
            Ok(())
        } else {
            Err(BenchError::Config(format!(
                "mpc `{}` cannot be applied to method `{}`",
                self.regularizer, self.method
            )))
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn parse_method(entry: &str, global: RegularizerKind) -> Result<MethodSpec> {
    let (name, suffix) = match entry.split_once('+') {
        Some((name, suffix)) => (name, Some(suffix)),
        None => (entry, None),
    };
    let method: Method = name
        .parse()
        .map_err(|_| BenchError::Config(format!("methods: unknown method `{name}`")))?;
    let spec = match suffix {
        Some(s) => {
            let kind: RegularizerKind = s
                .strip_prefix("mpc_")
                .ok_or_else(|| BenchError::Config(format!("methods: bad suffix in `{entry}`")))?
                .parse()
                .map_err(|e: subtune_core::Error| BenchError::Config(format!("methods: {e}")))?;
            MethodSpec {
                method,
                regularizer: kind,
                explicit: true,
            }
        }
        None if global != RegularizerKind::None => MethodSpec {
            method,
            regularizer: global,
            explicit: true,
        },
        None => MethodSpec::new(method, method.builtin_regularizer()),
    };
    spec.check()?;
    Ok(spec)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            BenchError::Config(msg) => BenchError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn regularizer(&self) -> Result<RegularizerKind> {
        self.mpc
            .parse()
            .map_err(|e: subtune_core::Error| BenchError::Config(format!("mpc: {e}")))
    }

    pub fn activation(&self) -> Result<Activation> {
        self.adapter_activation
            .parse()
            .map_err(|e: subtune_core::Error| BenchError::Config(format!("adapter_activation: {e}")))
    }

    pub fn method_specs(&self) -> Result<Vec<MethodSpec>> {
        let global = self.regularizer()?;
        self.methods.iter().map(|m| parse_method(m, global)).collect()
    }

    /// Learning rate for a method, honouring overrides by label then by name.
    pub fn lr_for(&self, spec: &MethodSpec) -> f64 {
        self.lr_overrides
            .get(&spec.label())
            .or_else(|| self.lr_overrides.get(spec.method.name()))
            .copied()
            .unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(BenchError::Config(msg));
        if self.methods.is_empty() {
            return err("methods: at least one method is required".into());
        }
        let specs = self.method_specs()?;
        let mut labels = HashSet::new();
        for s in &specs {
            if !labels.insert(s.label()) {
                return err(format!("methods: `{}` is listed twice", s.label()));
            }
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return err("ranks: need at least one positive rank".into());
        }
        if self.seeds.is_empty() {
            return err("seeds: at least one seed is required".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return err("seeds: duplicate seed".into());
        }
        if self.steps == 0 {
            return err("steps: must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err(format!("lr: must be positive, got {}", self.lr));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return err(format!("lambda: must be non-negative, got {}", self.lambda));
        }
        if !self.scale.is_finite() {
            return err("scale: must be finite".into());
        }
        self.activation()?;
        for (key, lr) in &self.lr_overrides {
            let known = specs.iter().any(|s| &s.label() == key || s.method.name() == key);
            if !known {
                return err(format!("lr_overrides: `{key}` is not one of the configured methods"));
            }
            if !(lr.is_finite() && *lr > 0.0) {
                return err(format!("lr_overrides.{key}: must be positive"));
            }
        }
        match &self.task {
            TaskConfig::Recovery {
                n,
                m,
                planted_rank,
                noise_std,
            } => {
                if *n == 0 || *m == 0 {
                    return err("task: n and m must be positive".into());
                }
                if planted_rank > n.min(m) {
                    return err(format!("task.planted_rank: {planted_rank} exceeds min(n, m)"));
                }
                if !(noise_std.is_finite() && *noise_std >= 0.0) {
                    return err("task.noise_std: must be non-negative".into());
                }
            }
            TaskConfig::Classification {
                widths,
                pretrain_steps,
                pretrain_lr,
                batch_size,
            } => {
                if widths.len() < 2 || widths.contains(&0) || widths[0] != 2 || widths[widths.len() - 1] != 2 {
                    return err("task.widths: need positive widths starting and ending at 2".into());
                }
                if *pretrain_steps == 0 || !(pretrain_lr.is_finite() && *pretrain_lr > 0.0) {
                    return err("task: pretrain_steps and pretrain_lr must be positive".into());
                }
                if *batch_size == 0 {
                    return err("task.batch_size: must be positive".into());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
methods = ["lora", "lora+mpc_o", "adalora"]
ranks = [2]
seeds = [0, 1]

[task]
kind = "recovery"
n = 8
m = 8
planted_rank = 2
"#;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let labels: Vec<String> = c.method_specs().unwrap().iter().map(|s| s.label()).collect();
        assert_eq!(labels, ["lora", "lora+mpc_o", "adalora"]);
        assert_eq!(c.method_specs().unwrap()[2].regularizer, RegularizerKind::Orthogonal);
        assert_eq!(c.steps, 2000);
        assert_eq!(c.lambda, 1e-3);
    }

    #[test]
    fn unknown_field_names_the_line() {
        let text = MINIMAL.replace("seeds = [0, 1]", "seeds = [0, 1]\nbogus = 3");
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(msg.contains("bogus") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn incompatible_mpc_is_rejected() {
        let text = MINIMAL.replace("\"adalora\"]", "\"ssb+mpc_o\"]");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(BenchError::Config(_))));
        let text = MINIMAL.replace("ranks = [2]", "ranks = [2]\nmpc = \"n\"").replace(", \"lora+mpc_o\", \"adalora\"", "");
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c.method_specs().unwrap()[0].label(), "lora+mpc_n");
    }

    #[test]
    fn bad_values_are_rejected() {
        for (from, to) in [
            ("ranks = [2]", "ranks = [0]"),
            ("seeds = [0, 1]", "seeds = [1, 1]"),
            ("planted_rank = 2", "planted_rank = 9"),
            ("\"lora\",", "\"lora\", \"lora\","),
            ("\"lora\",", "\"qlora\","),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(ExperimentConfig::from_toml(&text).is_err(), "{to}");
        }
    }
}
