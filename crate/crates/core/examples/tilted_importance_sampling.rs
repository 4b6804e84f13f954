//! Estimates the probability that the empirical pair lands in a ball around a
//! target pair, by simulating under the tilt that makes the target typical.
//!
//! cargo run --release --example tilted_importance_sampling

use std::path::Path;

use renewal_ldp::grid::QuadGrid;
use renewal_ldp::measures::CandidatePair;
use renewal_ldp::model::Model;
use renewal_ldp::rate::rate_I;
use renewal_ldp::simulate::EmpiricalPair;
use renewal_ldp::tilt::{estimate_probability, estimate_probability_with, tilt_from_pair, BallEvent};

fn main() -> renewal_ldp::Result<()> {
    let model = Model::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("models/two_state_exp.toml"))?;
    let grid = QuadGrid::for_model(&model);
    let ones: Vec<Vec<f64>> = grid.states.iter().map(|g| vec![1.0; g.len()]).collect();
    let target = CandidatePair::from_kernel_and_tilts(&grid, &[vec![0.5, 0.5], vec![0.5, 0.5]], &ones)?;
    let tilted = tilt_from_pair(&model, &target)?;
    println!("I(target) = {:.5}, tilted kernel {:?}", rate_I(&model, &target)?.value, tilted.kernel.rows());

    let ball = BallEvent::new(&target, 0.1);
    let event = |e: &EmpiricalPair| ball.contains(e);
    for t in [50.0, 100.0] {
        let est = estimate_probability(&model, &tilted, &event, t, 2000, 1)?;
        println!(
            "t = {t}: P = {:.3e} +- {:.1e}, -log P / t = {:.4}, {} hits",
            est.estimate, est.ci, est.rate_estimate, est.hits
        );
    }
    let est = estimate_probability_with(&model, &tilted, &event, 50.0, 2000, 1, Some(0.1))?;
    println!("hybrid tilt, t = 50: P = {:.3e} +- {:.1e}", est.estimate, est.ci);
    Ok(())
}
