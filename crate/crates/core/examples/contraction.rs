//! The contracted rate of the state occupation law, for light and heavy
//! tails.
//!
//! cargo run --release --example contraction

use std::path::Path;

use renewal_ldp::model::Model;
use renewal_ldp::rate::rate_I1;

fn main() -> renewal_ldp::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("models");
    for name in ["two_state_exp.toml", "two_state_pareto.toml"] {
        let model = Model::load(dir.join(name))?;
        println!("{name}");
        for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let r = rate_I1(&model, &[a, 1.0 - a])?;
            println!("  pi_a = {a:.2}: I_1 = {:.6}, zeta = {:?}", r.value, r.argmin.unwrap_or_default());
        }
    }
    Ok(())
}
