//! Post-hoc context refinement of a network output.
//!
//! cargo run --example refine

use nesy_har::knowledge::{KnowledgeModel, SymbolicReasoner};
use nesy_har::losses::ProbabilityDistribution;
use nesy_har::strategies::refine;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let km = KnowledgeModel::load(concat!(env!("CARGO_MANIFEST_DIR"), "/rules/synthetic.rules"))?;
    let p = ProbabilityDistribution::new(vec![0.10, 0.20, 0.05, 0.15, 0.50])?;
    let show = |d: &ProbabilityDistribution| {
        d.probs()
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{}={v:.3}", km.activities().name(i)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("network : {}", show(&p));

    for text in ["location_type=outdoor, speed=low", "speed=high, transport_route=false"] {
        let state = km.contexts().parse_state(text)?;
        let r = refine(&p, &km.consistent_activities(&state));
        let tag = if r.fallback { " (no consistent mass, unchanged)" } else { "" };
        println!("{text}\n  refined: {}{tag}", show(&r.distribution));
    }
    Ok(())
}
