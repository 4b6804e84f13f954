//! Log-moment generating functions, abscissas and Legendre transforms of the
//! supported wait families.
//!
//! cargo run --example legendre_transform

use renewal_ldp::waits::WaitLaw;

fn main() {
    let laws = [
        WaitLaw::exponential(1.0),
        WaitLaw::Gamma { shape: 2.0, scale: 0.5 },
        WaitLaw::pareto(3.0, 1.0),
        WaitLaw::LogNormal { location: 0.0, scale: 0.5 },
        WaitLaw::Weibull { shape: 0.7, scale: 1.0 },
        WaitLaw::Deterministic { value: 1.0 },
    ];
    for law in &laws {
        let mean = law.mean();
        print!("{:<13} xi = {:<5} mean = {mean:.4}  Lambda*:", law.family(), law.abscissa());
        for f in [0.5, 0.9, 1.0, 1.5, 3.0] {
            print!(" {:.4}", law.legendre(f * mean));
        }
        println!();
    }
    // Heavy tails give a flat zero to the right of the mean.
    let p = WaitLaw::pareto(3.0, 1.0);
    let (v, theta) = p.legendre_with_argmax(1.2);
    println!("Pareto(3, 1): Lambda*(1.2) = {v:.6} at theta = {theta:.6}; Lambda*(10) = {}", p.legendre(10.0));
}
