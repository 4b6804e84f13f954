//! Distance from the empirical pair to its law-of-large-numbers limit as the
//! horizon grows.
//!
//! cargo run --release --example lln_convergence

use std::path::Path;

use renewal_ldp::measures::distance;
use renewal_ldp::model::Model;
use renewal_ldp::simulate::{empirical_pair, lln_limit, simulate};

fn main() -> renewal_ldp::Result<()> {
    let model = Model::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("models/two_state_exp.toml"))?;
    let limit = lln_limit(&model)?;
    println!("limiting flows {:?}", limit.flow);
    for t in [1e2, 1e3, 1e4, 1e5] {
        let mut d: Vec<f64> = (1..=10)
            .map(|seed| Ok(distance(&empirical_pair(&simulate(&model, t, seed)?, model.n()), &limit)))
            .collect::<renewal_ldp::Result<_>>()?;
        d.sort_by(f64::total_cmp);
        println!("t = {t:>8}: median distance {:.4}", d[d.len() / 2]);
    }
    Ok(())
}
