//! The rate function on a few pairs: its per-state split, the membership gate
//! and the variational lower bound.
//!
//! cargo run --release --example rate_function

use std::path::Path;

use renewal_ldp::grid::QuadGrid;
use renewal_ldp::measures::{check_membership, CandidatePair, DEFAULT_TOL};
use renewal_ldp::model::Model;
use renewal_ldp::rate::{rate_I, variational_lb};

fn main() -> renewal_ldp::Result<()> {
    let model = Model::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("models/two_state_exp.toml"))?;
    let grid = QuadGrid::for_model(&model);
    let lln = CandidatePair::lln(&model, &grid)?;

    // Same waits, flat kernel: only the kernel entropy is paid.
    let ones: Vec<Vec<f64>> = grid.states.iter().map(|g| vec![1.0; g.len()]).collect();
    let flat = CandidatePair::from_kernel_and_tilts(&grid, &[vec![0.5, 0.5], vec![0.5, 0.5]], &ones)?;

    // Slower waits at `a`.
    let slow: Vec<Vec<f64>> = grid
        .states
        .iter()
        .enumerate()
        .map(|(x, g)| g.nodes.iter().map(|t| if x == 0 { (0.3 * t).exp() } else { 1.0 }).collect())
        .collect();
    let slow = CandidatePair::from_kernel_and_tilts(&grid, &model.kernel.rows(), &slow)?;

    for (name, pair) in [("lln", &lln), ("flat kernel", &flat), ("slow waits at a", &slow)] {
        let r = rate_I(&model, pair)?;
        println!("{name}: I = {:.6} (quadrature error {:.1e})", r.value, r.abs_err);
        for (x, t) in r.terms.iter().enumerate() {
            println!("  {}: kernel {:.6}, wait {:.6}, atom {:.6}", model.states.label(x), t.kernel, t.wait, t.atom);
        }
        println!("  sampled lower bound {:.6}", variational_lb(&model, pair, 200, 1)?);
    }

    let mut off = flat.clone();
    off.flow[0][1] += 0.05;
    println!(
        "unbalanced flow: class {:?}, I = {}",
        check_membership(&off, DEFAULT_TOL).class,
        rate_I(&model, &off)?.value
    );
    Ok(())
}
