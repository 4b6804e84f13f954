//! Simulates one path, prints its empirical pair and exports it as CSV.
//!
//! cargo run --example simulate_trajectory

use std::path::Path;

use renewal_ldp::model::Model;
use renewal_ldp::simulate::{empirical_pair, simulate};

fn main() -> renewal_ldp::Result<()> {
    let model = Model::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("models/two_state_pareto.toml"))?;
    let t = 100.0;
    let traj = simulate(&model, t, 42)?;
    println!("N_t = {} jumps before t = {t}", traj.n_jumps);

    let e = empirical_pair(&traj, model.n());
    for x in 0..model.n() {
        println!(
            "state {}: mu_t(x, 1/tau) = {:.4}, kernel gap = {:.2e}, divergence = {:.2e}",
            model.states.label(x),
            e.inv_tau_mass(x),
            e.kernel_gap(x),
            e.divergence(x)
        );
    }
    println!("Q_t = {:?}", e.flow);

    let mut out = Vec::new();
    traj.write_csv(&mut out, model.states.labels())?;
    let text = String::from_utf8_lossy(&out);
    for line in text.lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
