//! Finite-difference gradient check of random small networks and every
//! loss branch.
//!
//! cargo run --release --example gradcheck [trials]

use nesy_har::gradcheck::{run_gradcheck, sign_flip_control};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let trials = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(6);
    let report = run_gradcheck(7, trials)?;
    for r in &report.results {
        println!("{:<24} {:.2e} over {} coordinates", r.name, r.max_rel_error, r.checked);
    }
    println!("all below tolerance: {}", report.passed());

    let control = sign_flip_control(7);
    println!("sign-flipped layer rejected: {} ({:.2e})", !control.passed(), control.max_rel_error);
    Ok(())
}
