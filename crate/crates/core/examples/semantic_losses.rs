//! The five semantic losses on one prediction, with and without the top
//! activity in the consistent set.
//!
//! cargo run --example semantic_losses

use nesy_har::knowledge::ActivitySet;
use nesy_har::losses::{combined_loss, LossConfig, ProbabilityDistribution, SemanticLoss};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = ProbabilityDistribution::new(vec![0.55, 0.25, 0.15, 0.05])?;
    let sets = [
        ("top consistent", ActivitySet::from_indices(4, [0, 2])),
        ("top inconsistent", ActivitySet::from_indices(4, [1, 2])),
    ];
    println!("P = {:?}", p.probs());
    for (name, a) in &sets {
        println!("\n{name}: A* = {:?}", a.iter().collect::<Vec<_>>());
        for kind in SemanticLoss::ALL {
            let l = kind.evaluate(&p, a);
            println!("  {:>3}  value {:.3}  grad {:?}", kind.code(), l.value, l.gradient);
        }
    }

    // the training objective adds alpha times the semantic term
    let cfg = LossConfig::semantic(SemanticLoss::MinusProbOne, 7.0);
    let total = combined_loss(&p, 1, &sets[1].1, &cfg)?;
    println!("\ncross-entropy(label 1) + 7 * -P1 = {:.4}", total.value);
    Ok(())
}
