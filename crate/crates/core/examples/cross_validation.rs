//! Leave-one-user-out experiment over two strategies and two training
//! fractions, with the console summary and per-cell CSV.
//!
//! cargo run --release --example cross_validation

use nesy_har::eval::{cells_csv, make_folds, run_experiment, summary_table, ExperimentData, ExperimentSpec, StrategyEntry};
use nesy_har::knowledge::{KnowledgeModel, SymbolicReasoner};
use nesy_har::losses::{LossConfig, SemanticLoss};
use nesy_har::nn::NetworkSpec;
use nesy_har::strategies::{StrategyConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let km = KnowledgeModel::load(concat!(env!("CARGO_MANIFEST_DIR"), "/rules/synthetic.rules"))?;
    let cfg = nesy_har::data::SyntheticConfig { users: 4, windows_per_user: 80, ..Default::default() };
    let ds = nesy_har::data::generate_synthetic(&cfg, &km, &Default::default())?;
    let (samples, _) = nesy_har::data::encode_users(&ds.users, &ds.layout, km.activities(), km.contexts(), false)?;

    let users: Vec<String> = ds.users.iter().map(|u| u.user.clone()).collect();
    for (i, fold) in make_folds(&users, 1, 1)?.folds.iter().enumerate() {
        println!("fold {i}: test {:?}", fold.test_users);
    }

    let spec = ExperimentSpec {
        strategies: vec![
            StrategyEntry::fixed(StrategyConfig::baseline()),
            StrategyEntry::fixed(StrategyConfig::semantic(LossConfig::semantic(SemanticLoss::All, 3.0))),
        ],
        fractions: vec![0.25, 1.0],
        repetitions: 2,
        seeds: vec![1, 2],
        fold_size: 1,
        validation_fraction: 0.1,
        network: NetworkSpec::compact(3, 3, 64, km.contexts().len(), km.activities().len()),
        train: TrainConfig { max_epochs: 20, ..Default::default() },
    };
    let data = ExperimentData { samples: &samples, activities: km.activities(), contexts: km.contexts(), reasoner: Some(&km) };
    let report = run_experiment(data, &spec)?;
    print!("{}", summary_table(&report));
    println!("\n{}", cells_csv(&report)?.lines().take(4).collect::<Vec<_>>().join("\n"));
    Ok(())
}
