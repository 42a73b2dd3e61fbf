//! Query the shipped fourteen-activity rules with a few context states.
//!
//! cargo run --example reason

use nesy_har::knowledge::{KnowledgeModel, SymbolicReasoner};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let km = KnowledgeModel::load(concat!(env!("CARGO_MANIFEST_DIR"), "/rules/domino.rules"))?;
    println!("{} activities, {} predicates, {} rules", km.activities().len(), km.contexts().len(), km.rule_count());

    for text in [
        "",
        "location_type=outdoor",
        "transport_route=false, speed=null",
        "location_type=indoor, height_variation=positive, speed=null",
        "speed=high, transport_route=true",
    ] {
        let state = km.contexts().parse_state(text)?;
        let names: Vec<&str> = km.consistent_activities(&state).iter().map(|a| km.activities().name(a)).collect();
        println!("{{{text}}}\n  -> {}", names.join(", "));
    }
    Ok(())
}
