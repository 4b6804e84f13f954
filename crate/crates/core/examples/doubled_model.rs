//! Waits that depend on the next state, handled by lifting to edge-states.
//!
//! cargo run --example doubled_model

use std::collections::HashMap;

use renewal_ldp::model::{double_variables, Kernel, StateSpace};
use renewal_ldp::simulate::simulate;
use renewal_ldp::waits::WaitLaw;

fn main() -> renewal_ldp::Result<()> {
    let states = StateSpace::new(["a", "b"])?;
    let kernel = Kernel::from_rows(vec![vec![0.0, 1.0], vec![0.5, 0.5]])?;
    let mut waits = HashMap::new();
    waits.insert((0, 1), WaitLaw::exponential(1.0));
    waits.insert((1, 0), WaitLaw::pareto(2.5, 1.0));
    waits.insert((1, 1), WaitLaw::exponential(4.0));
    let d = double_variables(&states, &kernel, &[1.0, 0.0], &waits)?;
    println!("edge-states {:?}", d.model.states.labels());
    println!("kernel {:?}", d.model.kernel.rows());
    let tr = simulate(&d.model, 50.0, 3)?;
    let path: Vec<&str> = tr.states.iter().take(8).map(|&i| d.model.states.label(i)).collect();
    println!("first steps {path:?}");
    Ok(())
}
