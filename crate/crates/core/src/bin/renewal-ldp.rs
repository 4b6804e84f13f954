use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use renewal_ldp::harness::{execute, ExperimentConfig, ExperimentKind};
use renewal_ldp::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Lln,
    Decay,
    Contraction,
    Legendre,
    Invariants,
}

impl From<Kind> for ExperimentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Lln => ExperimentKind::Lln,
            Kind::Decay => ExperimentKind::Decay,
            Kind::Contraction => ExperimentKind::Contraction,
            Kind::Legendre => ExperimentKind::Legendre,
            Kind::Invariants => ExperimentKind::Invariants,
        }
    }
}

/// Experiments on large deviations of Markov renewal processes.
///
/// Exit codes: 0 ok, 1 config error, 2 property failure, 3 numerical
/// non-convergence.
#[derive(Debug, Parser)]
#[command(name = "renewal-ldp", version)]
struct Cli {
    /// Experiment to run.
    kind: Kind,
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out`, then `out/<kind>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seeds: Option<Vec<u64>>,
    /// Tilt only the first (1 + delta) Z t steps in decay runs.
    #[arg(long, value_name = "DELTA")]
    hybrid: Option<f64>,
    /// Relative balance tolerance for constraint-set membership.
    #[arg(long)]
    tol: Option<f64>,
    /// Restarts for the contracted-rate minimization.
    #[arg(long)]
    restarts: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonConvergence(_) | Error::LowAcceptance { .. } | Error::InfiniteNormalizer(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let kind = ExperimentKind::from(cli.kind);
    let (mut cfg, text) = match ExperimentConfig::load(&cli.config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(s) = cli.seeds {
        cfg.seeds = s;
    }
    if let Some(h) = cli.hybrid {
        cfg.decay.hybrid = Some(h);
    }
    if let Some(t) = cli.tol {
        cfg.tolerances.membership = t;
    }
    if let Some(r) = cli.restarts {
        cfg.contraction.restarts = r;
    }
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
    match execute(kind, &cfg, &text, &out) {
        Ok(o) => {
            println!("{}: {} rows written to {}", kind.name(), o.rows.len(), out.display());
            if o.passed() {
                ExitCode::SUCCESS
            } else {
                for f in &o.failures {
                    let seed = f.seed.map(|s| format!(" (seed {s})")).unwrap_or_default();
                    eprintln!("FAIL {}: {}{}: {}", f.module, f.property, seed, f.detail);
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_errors_map_to_3() {
        assert_eq!(exit_code(&Error::NonConvergence("dv".into())), 3);
        assert_eq!(exit_code(&Error::LowAcceptance { state: "a".into(), rate: 1e-4 }), 3);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
    }
}
