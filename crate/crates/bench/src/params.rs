//! Closed-form trainable parameter counts per method and placement.

use std::fmt;
use std::str::FromStr;

use subtune_core::Method;

use crate::error::{BenchError, Result};

/// Everything `count_params` knows how to price.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountKind {
    Method(Method),
    /// `rank` prompt rows in front of every layer output.
    SoftPrompt,
}

impl FromStr for CountKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "soft_prompt" {
            return Ok(CountKind::SoftPrompt);
        }
        s.parse::<Method>()
            .map(CountKind::Method)
            .map_err(|_| BenchError::Config(format!("unknown method `{s}`")))
    }
}

impl fmt::Display for CountKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CountKind::Method(m) => m.fmt(f),
            CountKind::SoftPrompt => f.write_str("soft_prompt"),
        }
    }
}

/// Trainable parameters of `kind` on one n×m layer.
pub fn layer_count(kind: CountKind, n: usize, m: usize, r: usize) -> usize {
    let k = n.min(m);
    match kind {
        CountKind::SoftPrompt => r * m,
        CountKind::Method(method) => match method {
            Method::SamParser | Method::Svdiff => k,
            Method::Ia3 | Method::BitFit => m,
            Method::Ssl => n,
            Method::Ssb => n + m,
            Method::LoRA | Method::ParallelAdapter | Method::Spectral => r * (n + m),
            Method::AdaLoRA | Method::TriLoRA => r * (n + m) + r,
            Method::FLoRA => r * (n + m) + r * r,
            Method::SerialAdapter => 2 * r * m,
            Method::DoRA => r * (n + m) + m,
            Method::Full => n * m + m,
        },
    }
}

fn uses_rank(kind: CountKind) -> bool {
    match kind {
        CountKind::SoftPrompt => true,
        CountKind::Method(m) => m.uses_rank(),
    }
}

/// Sum of [`layer_count`] over `dims`.
pub fn count_params(kind: CountKind, dims: &[(usize, usize)], rank: usize) -> Result<usize> {
    if dims.is_empty() || dims.iter().any(|&(n, m)| n == 0 || m == 0) {
        return Err(BenchError::Config("layer dimensions must be positive".into()));
    }
    if uses_rank(kind) {
        let limit = match kind {
            CountKind::SoftPrompt => usize::MAX,
            _ => dims.iter().map(|&(n, m)| n.min(m)).min().unwrap_or(0),
        };
        if rank == 0 || rank > limit {
            return Err(BenchError::Config(format!("rank {rank} is out of range for {kind}")));
        }
    }
    Ok(dims.iter().map(|&(n, m)| layer_count(kind, n, m, rank)).sum())
}

pub fn permille(count: usize, backbone: usize) -> f64 {
    1000.0 * count as f64 / backbone as f64
}

/// Parses `NxM,NxM,...`.
pub fn parse_shape(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|part| {
            let (n, m) = part
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| BenchError::Config(format!("expected NxM, got `{part}`")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| BenchError::Config(format!("bad dimension `{v}` in `{part}`")))
            };
            Ok((parse(n)?, parse(m)?))
        })
        .collect()
}

/// The per-block placement of keys, values and the FFN intermediate weight
/// in a RoBERTa-base sized transformer.
pub const ROBERTA_BASE_BLOCK: [(usize, usize); 3] = [(768, 768), (768, 768), (768, 3072)];
pub const ROBERTA_BASE_BLOCKS: usize = 12;
pub const ROBERTA_BASE_PARAMS: usize = 125_000_000;
