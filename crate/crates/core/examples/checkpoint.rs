//! Save a semantic-loss model, load it back and classify windows without
//! any knowledge at hand.
//!
//! cargo run --release --example checkpoint

use nesy_har::data::{encode_users, generate_synthetic, split_validation, SyntheticConfig};
use nesy_har::knowledge::{KnowledgeModel, SymbolicReasoner};
use nesy_har::losses::{LossConfig, SemanticLoss};
use nesy_har::nn::NetworkSpec;
use nesy_har::strategies::{predict, train, StrategyConfig, TrainConfig, TrainedModel, TrainingSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let km = KnowledgeModel::load(concat!(env!("CARGO_MANIFEST_DIR"), "/rules/synthetic.rules"))?;
    let ds = generate_synthetic(&SyntheticConfig { users: 2, windows_per_user: 80, ..Default::default() }, &km, &Default::default())?;
    let (samples, _) = encode_users(&ds.users, &ds.layout, km.activities(), km.contexts(), false)?;
    let (tr, val) = split_validation(samples.clone(), 0.1, 0);
    let set = TrainingSet { train: &tr, validation: &val, activities: km.activities(), contexts: km.contexts() };
    let spec = NetworkSpec::compact(3, 3, 64, km.contexts().len(), km.activities().len());
    let strategy = StrategyConfig::semantic(LossConfig::semantic(SemanticLoss::All, 3.0));
    let mut model = train(set, &strategy, Some(&km), &spec, &TrainConfig { max_epochs: 15, ..Default::default() })?;
    model.layout = Some(ds.layout.clone());

    let path = std::env::temp_dir().join("nesy-har-example-model.json");
    model.save(&path)?;
    let loaded = TrainedModel::load(&path)?;
    println!("saved {} ({} parameters) to {}", loaded.strategy.label(), loaded.params.count(), path.display());

    for s in samples.iter().step_by(40) {
        let p = predict(&loaded, s, None)?;
        let truth = s.label.map_or("-", |l| km.activities().name(l));
        println!("{}: predicted {:<16} truth {truth}", s.id, km.activities().name(p.activity));
    }
    Ok(())
}
