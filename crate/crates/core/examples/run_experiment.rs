//! Runs a harness experiment from a config in code, without the CLI.
//!
//! cargo run --release --example run_experiment

use std::path::Path;

use renewal_ldp::harness::{run, ExperimentConfig, ExperimentKind};

fn main() -> renewal_ldp::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("models");
    let cfg = ExperimentConfig::from_toml_str(
        "model = \"two_state_pareto.toml\"\n[legendre]\nm_points = 40\n",
        &dir,
    )?;
    let out = run(ExperimentKind::Legendre, &cfg)?;
    for row in out.rows.iter().filter(|r| r.param("metric").is_some_and(|m| m.starts_with("flat"))) {
        println!("{} = {}", row.params, row.measured);
    }
    println!("passed: {}", out.passed());
    Ok(())
}
