//! The Donsker-Varadhan rate of a kernel with its optimal flow.
//!
//! cargo run --example donsker_varadhan

use renewal_ldp::model::{stationary, Kernel};
use renewal_ldp::rate::donsker_varadhan;

fn main() -> renewal_ldp::Result<()> {
    let k = Kernel::from_rows(vec![vec![0.2, 0.8], vec![0.6, 0.4]])?;
    let nu = stationary(&k)?;
    println!("stationary law {nu:?}: I_DV = {:.2e}", donsker_varadhan(&k, &nu)?.value);
    for zeta in [[0.5, 0.5], [0.9, 0.1], [0.2, 1.3]] {
        let s = donsker_varadhan(&k, &zeta)?;
        println!(
            "zeta = {zeta:?}: I_DV = {:.6}, u = {:?}, Q* = {:?} ({} iterations)",
            s.value, s.u, s.q_star, s.iterations
        );
    }
    Ok(())
}
