//! Leave-k-users-out experiments, macro F1 and confidence intervals.
//!
//! One *cell* is a (strategy, fraction, repetition, fold) combination: its
//! training users are downsampled per class, split 90/10 per window into
//! train and validation, a model is trained and the held-out users are
//! classified into a confusion matrix. A repetition's score is the macro F1
//! of its confusion matrices pooled over folds; aggregates report the mean
//! and a normal-approximation 95% interval over repetitions.
//!
//! Strategies whose training is identical (baseline and context refinement)
//! share one trained model per (repetition, fold, fraction). Every seed is
//! derived from the repetition seed, so a rerun reproduces every number.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{downsample_training, split_validation, EncodedSample};
use crate::knowledge::{ActivityVocabulary, ContextVocabulary, SymbolicReasoner};
use crate::losses::LossConfig;
use crate::nn::NetworkSpec;
use crate::strategies::{self, StrategyConfig, StrategyKind, TrainConfig, TrainedModel, TrainingSet};
use crate::{Error, Result};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("fold size {k} is invalid for {users} users")]
    InvalidFoldSize { k: usize, users: usize },
    #[error("duplicate user `{0}`")]
    DuplicateUser(String),
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("confusion matrix must be square, got {rows} rows of {cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("a confidence interval needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("alpha grid is empty")]
    EmptyAlphaGrid,
    #[error("test user `{0}` leaked into training")]
    Leakage(String),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
}

/// One cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub test_users: Vec<String>,
    pub train_users: Vec<String>,
    /// Seeds the per-window train/validation split.
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// SplitMix64 finalizer; derives independent seeds from a base seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shuffles the users and cuts them into groups of `k` test users; the
/// last group takes the remainder. With `k = 1` every user is a fold.
pub fn make_folds(users: &[String], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k == 0 || k > users.len() {
        return Err(EvalError::InvalidFoldSize { k, users: users.len() });
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = users.iter().find(|u| !seen.insert(u.as_str())) {
        return Err(EvalError::DuplicateUser(dup.clone()));
    }
    let mut order = users.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = order
        .chunks(k)
        .enumerate()
        .map(|(i, test)| {
            let mut test_users = test.to_vec();
            test_users.sort();
            let mut train_users: Vec<String> = users.iter().filter(|u| !test.contains(u)).cloned().collect();
            train_users.sort();
            Fold {
                test_users,
                train_users,
                split_seed: mix_seed(seed, 0x5911_7000 + i as u64),
            }
        })
        .collect();
    let plan = FoldPlan { folds };
    plan.check_disjoint()?;
    Ok(plan)
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    fn check_disjoint(&self) -> Result<(), EvalError> {
        for f in &self.folds {
            if let Some(u) = f.test_users.iter().find(|u| f.train_users.contains(u)) {
                return Err(EvalError::Leakage(u.clone()));
            }
        }
        Ok(())
    }
}

/// Rows are true activities, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, EvalError> {
        let k = rows.len();
        if k == 0 {
            return Err(EvalError::EmptyConfusion);
        }
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(EvalError::NotSquare { rows: k, cols: r.len() });
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.k + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroF1 {
    pub score: f64,
    pub per_class: Vec<f64>,
    /// Classes with neither true nor predicted instances; they count as 0.
    pub zero_support: Vec<usize>,
}

pub fn macro_f1(c: &ConfusionMatrix) -> Result<MacroF1, EvalError> {
    if c.k == 0 {
        return Err(EvalError::EmptyConfusion);
    }
    let mut per_class = Vec::with_capacity(c.k);
    let mut zero_support = Vec::new();
    for i in 0..c.k {
        let tp = c.get(i, i) as f64;
        let actual: u64 = (0..c.k).map(|j| c.get(i, j)).sum();
        let predicted: u64 = (0..c.k).map(|j| c.get(j, i)).sum();
        if actual == 0 && predicted == 0 {
            zero_support.push(i);
            per_class.push(0.0);
            continue;
        }
        // F1 = 2 tp / (2 tp + fp + fn)
        per_class.push(2.0 * tp / (actual + predicted) as f64);
    }
    Ok(MacroF1 {
        score: per_class.iter().sum::<f64>() / c.k as f64,
        per_class,
        zero_support,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub halfwidth: f64,
}

/// `mean ± 1.96 · s / √n` with the sample standard deviation `s`.
pub fn confidence_interval(values: &[f64]) -> Result<ConfidenceInterval, EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewValues(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(ConfidenceInterval {
        mean,
        halfwidth: 1.96 * var.sqrt() / (n as f64).sqrt(),
    })
}

/// A strategy in an experiment; `alpha_grid` turns on per-cell alpha
/// selection for semantic loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEntry {
    pub config: StrategyConfig,
    #[serde(default)]
    pub alpha_grid: Option<Vec<u32>>,
}

impl StrategyEntry {
    pub fn fixed(config: StrategyConfig) -> Self {
        StrategyEntry { config, alpha_grid: None }
    }

    pub fn label(&self) -> String {
        self.config.label()
    }

    /// Entries with equal keys train identical models.
    fn training_key(&self) -> String {
        let cfg = match self.config.kind {
            StrategyKind::ContextRefinement => StrategyConfig::baseline(),
            _ => self.config,
        };
        format!("{:?}|{:?}", cfg, self.alpha_grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub strategies: Vec<StrategyEntry>,
    pub fractions: Vec<f64>,
    pub repetitions: usize,
    /// One seed per repetition (extra seeds are ignored).
    pub seeds: Vec<u64>,
    pub fold_size: usize,
    pub validation_fraction: f64,
    pub network: NetworkSpec,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn validate(&self, users: usize, has_reasoner: bool) -> Result<(), EvalError> {
        let mut problems = Vec::new();
        if self.strategies.is_empty() {
            problems.push("no strategies".to_string());
        }
        for s in &self.strategies {
            if let Err(e) = s.config.validate() {
                problems.push(format!("{}: {e}", s.label()));
            }
            if s.config.kind != StrategyKind::Baseline && !has_reasoner {
                problems.push(format!("{} needs a knowledge model", s.label()));
            }
            if let Some(grid) = &s.alpha_grid {
                if s.config.kind != StrategyKind::SemanticLoss {
                    problems.push(format!("{}: alpha_grid only applies to semantic_loss", s.label()));
                }
                if grid.is_empty() {
                    problems.push(format!("{}: alpha_grid is empty", s.label()));
                }
            }
        }
        let labels: BTreeSet<String> = self.strategies.iter().map(StrategyEntry::label).collect();
        if labels.len() != self.strategies.len() {
            problems.push("strategy labels must be unique".into());
        }
        if self.fractions.is_empty() {
            problems.push("no fractions".into());
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            problems.push(format!("fraction {f} is outside (0, 1]"));
        }
        if self.repetitions == 0 {
            problems.push("repetitions must be at least 1".into());
        }
        if self.seeds.len() < self.repetitions {
            problems.push(format!(
                "{} seeds for {} repetitions",
                self.seeds.len(),
                self.repetitions
            ));
        }
        if self.fold_size == 0 || self.fold_size >= users {
            problems.push(format!("fold size {} leaves no training users among {users}", self.fold_size));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            problems.push(format!("validation fraction {} is outside (0, 1)", self.validation_fraction));
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.network.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EvalError::InvalidExperiment(problems.join("; ")))
        }
    }
}

/// Samples of every user plus the vocabularies and the optional reasoner.
#[derive(Clone, Copy)]
pub struct ExperimentData<'a> {
    pub samples: &'a [EncodedSample],
    pub activities: &'a ActivityVocabulary,
    pub contexts: &'a ContextVocabulary,
    pub reasoner: Option<&'a dyn SymbolicReasoner>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: String,
    pub fraction: f64,
    pub repetition: usize,
    pub fold: usize,
    pub test_users: Vec<String>,
    pub train_windows: usize,
    pub validation_windows: usize,
    pub test_windows: usize,
    /// Alpha chosen by grid search, if any.
    pub alpha: Option<f64>,
    pub epochs: usize,
    pub confusion: Option<ConfusionMatrix>,
    pub macro_f1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: String,
    pub fraction: f64,
    /// Macro F1 per repetition over the pooled folds; failed repetitions
    /// are left out.
    pub per_repetition: Vec<f64>,
    pub mean: Option<f64>,
    /// `None` with fewer than two repetitions.
    pub halfwidth: Option<f64>,
    pub failed_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub activities: Vec<String>,
    pub strategies: Vec<String>,
    pub fractions: Vec<f64>,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn aggregate(&self, strategy: &str, fraction: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.strategy == strategy && a.fraction == fraction)
    }
}

/// Outcome of [`grid_search_alpha`].
#[derive(Debug, Clone)]
pub struct AlphaSearch {
    pub alpha: u32,
    /// Validation macro F1 per alpha, in grid order; empty for a singleton grid.
    pub scores: Vec<(u32, f64)>,
    /// The model trained with the chosen alpha, when training happened.
    pub model: Option<TrainedModel>,
}

/// Trains a semantic-loss model per alpha and keeps the one with the best
/// validation macro F1; ties go to the lower alpha. A single-alpha grid is
/// returned without training.
pub fn grid_search_alpha(
    set: TrainingSet<'_>,
    strategy: &StrategyConfig,
    alphas: &[u32],
    reasoner: Option<&dyn SymbolicReasoner>,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<AlphaSearch> {
    let semantic = strategy
        .loss
        .semantic
        .filter(|_| strategy.kind == StrategyKind::SemanticLoss)
        .ok_or_else(|| EvalError::InvalidExperiment("alpha search needs a semantic_loss strategy".into()))?;
    match alphas {
        [] => return Err(EvalError::EmptyAlphaGrid.into()),
        [only] => {
            return Ok(AlphaSearch {
                alpha: *only,
                scores: Vec::new(),
                model: None,
            })
        }
        _ => {}
    }
    let mut grid = alphas.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut best: Option<(u32, f64, TrainedModel)> = None;
    let mut scores = Vec::new();
    for &alpha in &grid {
        let s = StrategyConfig::semantic(LossConfig::semantic(semantic, f64::from(alpha)));
        let model = strategies::train(set, &s, reasoner, spec, cfg)?;
        let score = macro_f1(&confusion(&model, set.validation, reasoner)?)?.score;
        scores.push((alpha, score));
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((alpha, score, model));
        }
    }
    let (alpha, _, model) = best.expect("grid has at least two alphas");
    Ok(AlphaSearch {
        alpha,
        scores,
        model: Some(model),
    })
}

/// Classifies labeled samples into a confusion matrix.
pub fn confusion(model: &TrainedModel, samples: &[EncodedSample], reasoner: Option<&dyn SymbolicReasoner>) -> Result<ConfusionMatrix> {
    let mut c = ConfusionMatrix::new(model.activities.len());
    for s in samples {
        let Some(label) = s.label else { continue };
        let p = strategies::predict(model, s, reasoner)?;
        c.add(label, p.activity);
    }
    Ok(c)
}

/// Inputs shared by every strategy in one (repetition, fold, fraction).
struct Split {
    repetition: usize,
    fold: usize,
    fraction: f64,
    test_users: Vec<String>,
    train: Vec<EncodedSample>,
    validation: Vec<EncodedSample>,
    test: Vec<EncodedSample>,
    seed: u64,
}

struct Job<'s> {
    split: &'s Split,
    entry: &'s StrategyEntry,
}

struct Trained {
    model: TrainedModel,
    alpha: Option<f64>,
}

fn build_splits(data: &ExperimentData<'_>, spec: &ExperimentSpec) -> Result<Vec<Split>> {
    let mut users: Vec<String> = data.samples.iter().map(|s| s.user.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    users.sort();
    let mut by_user: HashMap<&str, Vec<&EncodedSample>> = HashMap::new();
    for s in data.samples.iter().filter(|s| s.label.is_some()) {
        by_user.entry(s.user.as_str()).or_default().push(s);
    }
    let gather = |names: &[String]| -> Vec<EncodedSample> {
        names
            .iter()
            .flat_map(|u| by_user.get(u.as_str()).into_iter().flatten())
            .map(|s| (*s).clone())
            .collect()
    };
    let mut splits = Vec::new();
    for repetition in 0..spec.repetitions {
        let seed = spec.seeds[repetition];
        let plan = make_folds(&users, spec.fold_size, seed)?;
        for (fold, f) in plan.folds.iter().enumerate() {
            let pool = gather(&f.train_users);
            let test = gather(&f.test_users);
            if let Some(leak) = pool.iter().find(|s| f.test_users.contains(&s.user)) {
                return Err(EvalError::Leakage(leak.user.clone()).into());
            }
            for (fi, &fraction) in spec.fractions.iter().enumerate() {
                let kept = downsample_training(&pool, fraction, mix_seed(seed, ((fold as u64) << 16) | fi as u64))?;
                let (train, validation) = split_validation(kept, spec.validation_fraction, f.split_seed);
                splits.push(Split {
                    repetition,
                    fold,
                    fraction,
                    test_users: f.test_users.clone(),
                    train,
                    validation,
                    test: test.clone(),
                    seed: mix_seed(seed, 0xf01d_0000 + fold as u64),
                });
            }
        }
    }
    Ok(splits)
}

fn run_job(job: &Job<'_>, data: &ExperimentData<'_>, spec: &ExperimentSpec) -> Result<Trained> {
    let set = TrainingSet {
        train: &job.split.train,
        validation: &job.split.validation,
        activities: data.activities,
        contexts: data.contexts,
    };
    let cfg = TrainConfig {
        seed: job.split.seed,
        ..spec.train
    };
    let entry = job.entry;
    if let Some(grid) = &entry.alpha_grid {
        let search = grid_search_alpha(set, &entry.config, grid, data.reasoner, &spec.network, &cfg)?;
        let alpha = f64::from(search.alpha);
        let model = match search.model {
            Some(m) => m,
            None => {
                let mut s = entry.config;
                s.loss.alpha = alpha;
                strategies::train(set, &s, data.reasoner, &spec.network, &cfg)?
            }
        };
        return Ok(Trained {
            model,
            alpha: Some(alpha),
        });
    }
    let training = match entry.config.kind {
        StrategyKind::ContextRefinement => StrategyConfig::baseline(),
        _ => entry.config,
    };
    let model = strategies::train(set, &training, data.reasoner, &spec.network, &cfg)?;
    Ok(Trained { model, alpha: None })
}

fn evaluate_cell(
    split: &Split,
    entry: &StrategyEntry,
    trained: &Result<Trained, String>,
    data: &ExperimentData<'_>,
) -> CellResult {
    let mut cell = CellResult {
        strategy: entry.label(),
        fraction: split.fraction,
        repetition: split.repetition,
        fold: split.fold,
        test_users: split.test_users.clone(),
        train_windows: split.train.len(),
        validation_windows: split.validation.len(),
        test_windows: split.test.len(),
        alpha: None,
        epochs: 0,
        confusion: None,
        macro_f1: None,
        error: None,
    };
    let t = match trained {
        Ok(t) => t,
        Err(e) => {
            cell.error = Some(e.clone());
            return cell;
        }
    };
    let mut model = t.model.clone();
    model.strategy.kind = entry.config.kind;
    cell.alpha = t.alpha;
    cell.epochs = model.metadata.epochs_run;
    match confusion(&model, &split.test, data.reasoner).and_then(|c| {
        assert_eq!(c.total() as usize, split.test.len(), "every test window lands in the confusion matrix");
        Ok((macro_f1(&c)?.score, c))
    }) {
        Ok((f1, c)) => {
            cell.macro_f1 = Some(f1);
            cell.confusion = Some(c);
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

/// Runs the full grid. Training runs on the current rayon pool; results do
/// not depend on the thread count. Failed cells are recorded with their
/// error and the run continues.
pub fn run_experiment(data: ExperimentData<'_>, spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let users: BTreeSet<&str> = data.samples.iter().map(|s| s.user.as_str()).collect();
    spec.validate(users.len(), data.reasoner.is_some())?;
    if let Some(r) = data.reasoner {
        if r.activities() != data.activities || r.contexts() != data.contexts {
            return Err(EvalError::InvalidExperiment("knowledge model and data vocabularies differ".into()).into());
        }
    }
    let splits = build_splits(&data, spec)?;

    // one job per distinct training per split
    let mut jobs: Vec<Job<'_>> = Vec::new();
    let mut job_of: Vec<Vec<usize>> = Vec::new();
    for split in &splits {
        let mut keys: BTreeMap<String, usize> = BTreeMap::new();
        let mut row = Vec::new();
        for entry in &spec.strategies {
            let id = *keys.entry(entry.training_key()).or_insert_with(|| {
                jobs.push(Job { split, entry });
                jobs.len() - 1
            });
            row.push(id);
        }
        job_of.push(row);
    }
    log::info!(
        "{} cells, {} trainings over {} splits",
        splits.len() * spec.strategies.len(),
        jobs.len(),
        splits.len()
    );
    let trained: Vec<Result<Trained, String>> = jobs
        .par_iter()
        .map(|job| {
            let out = run_job(job, &data, spec).map_err(|e| e.to_string());
            if let Err(e) = &out {
                log::warn!(
                    "{} rep {} fold {} fraction {}: {e}",
                    job.entry.label(),
                    job.split.repetition,
                    job.split.fold,
                    job.split.fraction
                );
            }
            out
        })
        .collect();

    let mut cells = Vec::new();
    for (si, split) in splits.iter().enumerate() {
        for (ei, entry) in spec.strategies.iter().enumerate() {
            cells.push(evaluate_cell(split, entry, &trained[job_of[si][ei]], &data));
        }
    }
    cells.sort_by(|a, b| {
        let ka = (strategy_index(spec, &a.strategy), fraction_index(spec, a.fraction), a.repetition, a.fold);
        let kb = (strategy_index(spec, &b.strategy), fraction_index(spec, b.fraction), b.repetition, b.fold);
        ka.cmp(&kb)
    });
    let aggregates = aggregate(&cells, spec, data.activities.len())?;
    Ok(ExperimentReport {
        activities: data.activities.names(),
        strategies: spec.strategies.iter().map(StrategyEntry::label).collect(),
        fractions: spec.fractions.clone(),
        cells,
        aggregates,
    })
}

fn strategy_index(spec: &ExperimentSpec, label: &str) -> usize {
    spec.strategies.iter().position(|s| s.label() == label).unwrap_or(usize::MAX)
}

fn fraction_index(spec: &ExperimentSpec, f: f64) -> usize {
    spec.fractions.iter().position(|&x| x == f).unwrap_or(usize::MAX)
}

fn aggregate(cells: &[CellResult], spec: &ExperimentSpec, k: usize) -> Result<Vec<Aggregate>> {
    let mut out = Vec::new();
    for entry in &spec.strategies {
        let label = entry.label();
        for &fraction in &spec.fractions {
            let mine: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.strategy == label && c.fraction == fraction)
                .collect();
            let failed_cells = mine.iter().filter(|c| c.error.is_some()).count();
            let mut per_repetition = Vec::new();
            for rep in 0..spec.repetitions {
                let rep_cells: Vec<_> = mine.iter().filter(|c| c.repetition == rep).collect();
                if rep_cells.iter().any(|c| c.confusion.is_none()) {
                    continue;
                }
                let mut pooled = ConfusionMatrix::new(k);
                for c in rep_cells {
                    pooled.merge(c.confusion.as_ref().expect("checked"));
                }
                per_repetition.push(macro_f1(&pooled)?.score);
            }
            let (mean, halfwidth) = match per_repetition.len() {
                0 => (None, None),
                1 => (Some(per_repetition[0]), None),
                _ => {
                    let ci = confidence_interval(&per_repetition)?;
                    (Some(ci.mean), Some(ci.halfwidth))
                }
            };
            out.push(Aggregate {
                strategy: label.clone(),
                fraction,
                per_repetition,
                mean,
                halfwidth,
                failed_cells,
            });
        }
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per cell; the confusion matrix is flattened row-major with
/// rows separated by `;`.
pub fn cells_csv(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "strategy",
        "fraction",
        "repetition",
        "fold",
        "test_users",
        "train_windows",
        "validation_windows",
        "test_windows",
        "alpha",
        "epochs",
        "macro_f1",
        "confusion",
        "error",
    ];
    w.write_record(header).map_err(csv_err)?;
    for c in &report.cells {
        let confusion = c
            .confusion
            .as_ref()
            .map(|m| {
                m.rows()
                    .iter()
                    .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(" "))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default();
        w.write_record([
            c.strategy.clone(),
            c.fraction.to_string(),
            c.repetition.to_string(),
            c.fold.to_string(),
            c.test_users.join(" "),
            c.train_windows.to_string(),
            c.validation_windows.to_string(),
            c.test_windows.to_string(),
            fmt_opt(c.alpha),
            c.epochs.to_string(),
            fmt_opt(c.macro_f1),
            confusion,
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn aggregates_csv(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "fraction", "mean_macro_f1", "ci95_halfwidth", "repetitions", "per_repetition", "failed_cells"])
        .map_err(csv_err)?;
    for a in &report.aggregates {
        w.write_record([
            a.strategy.clone(),
            a.fraction.to_string(),
            fmt_opt(a.mean),
            fmt_opt(a.halfwidth),
            a.per_repetition.len().to_string(),
            a.per_repetition.iter().map(f64::to_string).collect::<Vec<_>>().join(" "),
            a.failed_cells.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("report serialization failed: {e}"))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

/// Strategies down, fractions across, `mean ± halfwidth` in each cell.
pub fn summary_table(report: &ExperimentReport) -> String {
    let cell = |a: Option<&Aggregate>| match a {
        Some(Aggregate { mean: Some(m), halfwidth: Some(h), .. }) => format!("{m:.4} ± {h:.4}"),
        Some(Aggregate { mean: Some(m), .. }) => format!("{m:.4}"),
        _ => "failed".to_string(),
    };
    let name_w = report.strategies.iter().map(|s| s.chars().count()).max().unwrap_or(8).max(8);
    let cols: Vec<String> = report.fractions.iter().map(|f| format!("{:.0}%", f * 100.0)).collect();
    let rows: Vec<Vec<String>> = report
        .strategies
        .iter()
        .map(|s| report.fractions.iter().map(|&f| cell(report.aggregate(s, f))).collect())
        .collect();
    let col_w: Vec<usize> = (0..cols.len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).chain([cols[j].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "strategy");
    for (c, w) in cols.iter().zip(&col_w) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    let rule = name_w + col_w.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for (s, r) in report.strategies.iter().zip(&rows) {
        let _ = write!(out, "{s:<name_w$}");
        for (v, w) in r.iter().zip(&col_w) {
            let pad = w - v.chars().count();
            let _ = write!(out, "  {}{v}", " ".repeat(pad));
        }
        out.push('\n');
    }
    out.push_str("macro F1, mean ± 95% CI over repetitions\n");
    out
}

/// Writes `cells.csv`, `aggregates.csv`, `report.json` and `summary.txt`.
pub fn write_report(dir: impl AsRef<Path>, report: &ExperimentReport) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).map_err(|source| Error::Json {
        path: dir.join("report.json"),
        source,
    })?;
    for (name, text) in [
        ("cells.csv", cells_csv(report)?),
        ("aggregates.csv", aggregates_csv(report)?),
        ("report.json", json + "\n"),
        ("summary.txt", summary_table(report)),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
