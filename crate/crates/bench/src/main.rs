use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use subtune_bench::config::ExperimentConfig;
use subtune_bench::params::{count_params, parse_shape, permille, CountKind};
use subtune_bench::report::{compare_methods, format_orderings, read_csv, Direction};
use subtune_bench::{run_experiment, BenchError};
use subtune_core::gradcheck::{default_cases, check_case, check_soft_prompt, TensorCheck};
use subtune_core::Method;

#[derive(Parser)]
#[command(name = "subtune", version, about = "Subspace tuning experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid described by a TOML config.
    Run {
        config: PathBuf,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Only cases whose label matches, e.g. `lora` or `lora+mpc_o`.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the algebraic identities between tuner forms.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trainable parameter counts for a placement such as `768x768,768x3072`.
    Params {
        shape: String,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        /// Number of times the shape repeats.
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        /// Backbone size for the permille column; defaults to the placement size.
        #[arg(long)]
        backbone: Option<usize>,
    },
    /// Order methods in a result CSV by mean metric.
    Report {
        csv: PathBuf,
        #[arg(long, default_value = "loss")]
        metric: String,
    },
}

fn exit_for(err: &BenchError) -> ExitCode {
    match err {
        BenchError::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(config: PathBuf, threads: usize, out: PathBuf) -> Result<ExitCode, BenchError> {
    let cfg = ExperimentConfig::load(&config)?;
    let report = run_experiment(&cfg, threads)?;
    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let (csv, json) = report.write(&out, stem)?;
    for a in &report.aggregate {
        let stderr = a.stderr.map_or("-".into(), |v| format!("{v:.4e}"));
        println!(
            "{:<24} r={:<3} mean {} {:.6e} stderr {} seeds {} failed {}",
            a.method, a.rank, report.metric, a.mean, stderr, a.seeds, a.failed
        );
    }
    for f in &report.failures {
        eprintln!("failed: {} r={} seed={}: {}", f.method, f.rank, f.seed, f.reason);
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(if report.has_failures() { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn gradcheck(kind: Option<String>, instances: usize, seed: u64) -> Result<ExitCode, BenchError> {
    let mut checks: Vec<TensorCheck> = Vec::new();
    let wanted = |label: &str| kind.as_deref().is_none_or(|k| k == label);
    for (i, case) in default_cases().iter().enumerate() {
        if wanted(&case.label()) {
            checks.extend(check_case(case, instances, seed.wrapping_add(i as u64 * 7919))?);
        }
    }
    if wanted("soft_prompt") {
        checks.push(check_soft_prompt(instances, seed)?);
    }
    if checks.is_empty() {
        return Err(BenchError::Config(format!("no gradient check named `{}`", kind.unwrap_or_default())));
    }
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        if !c.passed() {
            failed += 1;
        }
        println!(
            "{status:<4} {:<24} {:<18} max_rel {:.3e} over {} instances",
            c.case, c.tensor, c.max_rel_error, c.instances
        );
    }
    println!("{} tensors checked, {failed} failed", checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn verify(trials: usize, seed: u64) -> Result<ExitCode, BenchError> {
    let checks = subtune_bench::verify::run_identities(trials, seed)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed();
        println!(
            "{:<4} {:<48} max error {:.3e} (tolerance {:.0e})",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.max_error,
            c.tolerance
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn params(shape: &str, rank: usize, blocks: usize, backbone: Option<usize>) -> Result<ExitCode, BenchError> {
    let block = parse_shape(shape)?;
    if blocks == 0 {
        return Err(BenchError::Config("--blocks must be positive".into()));
    }
    let dims: Vec<(usize, usize)> = std::iter::repeat_n(block.iter().copied(), blocks).flatten().collect();
    let backbone = backbone.unwrap_or_else(|| dims.iter().map(|(n, m)| n * m).sum());
    println!("{:<18} {:>12} {:>10}", "method", "params", "permille");
    let kinds = Method::ALL
        .iter()
        .map(|&m| CountKind::Method(m))
        .chain([CountKind::Method(Method::Full), CountKind::SoftPrompt]);
    for kind in kinds {
        match count_params(kind, &dims, rank) {
            Ok(count) => println!("{:<18} {:>12} {:>10.4}", kind.to_string(), count, permille(count, backbone)),
            Err(e) => println!("{:<18} {e}", kind.to_string()),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn report(csv: PathBuf, metric: &str) -> Result<ExitCode, BenchError> {
    let direction = Direction::from_metric(metric)?;
    let rows = read_csv(&csv)?;
    print!("{}", format_orderings(&compare_methods(&rows, direction)?, direction));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, threads, out } => run(config, threads, out),
        Command::Gradcheck { kind, instances, seed } => gradcheck(kind, instances, seed),
        Command::Verify { trials, seed } => verify(trials, seed),
        Command::Params {
            shape,
            rank,
            blocks,
            backbone,
        } => params(&shape, rank, blocks, backbone),
        Command::Report { csv, metric } => report(csv, &metric),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_for(&e)
    })
}
