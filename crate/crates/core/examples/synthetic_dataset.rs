//! Generate a synthetic dataset, write it to disk, read it back and audit
//! how many labels the rules accept.
//!
//! cargo run --example synthetic_dataset

use nesy_har::context::DiscretizationConfig;
use nesy_har::data::{audit_consistency, encode_users, generate_synthetic, load_dataset, write_dataset, SyntheticConfig};
use nesy_har::knowledge::{KnowledgeModel, SymbolicReasoner};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let km = KnowledgeModel::load(concat!(env!("CARGO_MANIFEST_DIR"), "/rules/synthetic.rules"))?;
    let cfg = SyntheticConfig {
        users: 3,
        windows_per_user: 60,
        violation_rate: 0.1,
        ..Default::default()
    };
    let ds = generate_synthetic(&cfg, &km, &DiscretizationConfig::default())?;

    let dir = std::env::temp_dir().join("nesy-har-synthetic-example");
    write_dataset(&dir, &ds.layout, &ds.users)?;
    let back = load_dataset(&dir)?;
    println!("wrote and reloaded {} users under {}", back.users.len(), dir.display());

    let (samples, _) = encode_users(&back.users, &back.layout, km.activities(), km.contexts(), false)?;
    let audit = audit_consistency(&samples, &km);
    for (activity, n, ok) in &audit.per_activity {
        println!("{activity:<16} {ok:>3}/{n:<3}");
    }
    println!("consistent labels: {:.1}% (asked for {:.0}% violations)", audit.rate() * 100.0, cfg.violation_rate * 100.0);
    Ok(())
}
