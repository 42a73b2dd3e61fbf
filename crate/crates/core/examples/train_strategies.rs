//! Train the four strategies on a scarce synthetic training set and score
//! them on a held-out user.
//!
//! cargo run --release --example train_strategies

use nesy_har::data::{downsample_training, split_validation};
use nesy_har::eval::{confusion, macro_f1};
use nesy_har::knowledge::{KnowledgeModel, SymbolicReasoner};
use nesy_har::losses::{LossConfig, SemanticLoss};
use nesy_har::nn::NetworkSpec;
use nesy_har::strategies::{train, StrategyConfig, StrategyKind, TrainConfig, TrainingSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let km = KnowledgeModel::load(concat!(env!("CARGO_MANIFEST_DIR"), "/rules/synthetic.rules"))?;
    let cfg = nesy_har::data::SyntheticConfig { users: 4, windows_per_user: 150, ..Default::default() };
    let ds = nesy_har::data::generate_synthetic(&cfg, &km, &Default::default())?;
    let (samples, _) = nesy_har::data::encode_users(&ds.users, &ds.layout, km.activities(), km.contexts(), false)?;

    let (test, rest): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.user == "user0");
    let rest = downsample_training(&rest, 0.3, 1)?;
    let (tr, val) = split_validation(rest, 0.1, 2);
    println!("{} training, {} validation, {} test windows", tr.len(), val.len(), test.len());

    let set = TrainingSet { train: &tr, validation: &val, activities: km.activities(), contexts: km.contexts() };
    let spec = NetworkSpec::compact(3, 3, 64, km.contexts().len(), km.activities().len());
    let train_cfg = TrainConfig { seed: 5, ..Default::default() };
    let baseline = train(set, &StrategyConfig::baseline(), None, &spec, &train_cfg)?;

    let mut refined = baseline.clone();
    refined.strategy = StrategyConfig::of(StrategyKind::ContextRefinement);
    let semantic = StrategyConfig::semantic(LossConfig::semantic(SemanticLoss::MinusProbOne, 3.0));
    let models = [
        ("baseline", baseline),
        ("semantic loss -P1", train(set, &semantic, Some(&km), &spec, &train_cfg)?),
        ("symbolic features", train(set, &StrategyConfig::of(StrategyKind::SymbolicFeatures), Some(&km), &spec, &train_cfg)?),
        ("context refinement", refined),
    ];
    for (name, m) in &models {
        let f1 = macro_f1(&confusion(m, &test, Some(&km))?)?.score;
        println!("{name:<20} macro F1 {f1:.4}  ({} epochs)", m.metadata.epochs_run);
    }
    Ok(())
}
