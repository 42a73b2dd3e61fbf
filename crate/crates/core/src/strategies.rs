//! The four classification strategies over the shared network core.
//!
//! | kind                 | training loss              | reasoner at inference |
//! |----------------------|----------------------------|-----------------------|
//! | `baseline`           | cross-entropy              | no                    |
//! | `semantic_loss`      | cross-entropy + α·semantic | no                    |
//! | `symbolic_features`  | cross-entropy              | yes, as network input |
//! | `context_refinement` | cross-entropy              | yes, after softmax    |

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EncodedSample, InputLayout};
use crate::knowledge::{ActivitySet, ActivityVocabulary, ContextState, ContextVocabulary, SymbolicReasoner};
use crate::losses::{self, LossConfig, ProbabilityDistribution, Reduction};
use crate::nn::{self, Adam, AdamConfig, BackwardOptions, Mode, NetworkInput, NetworkSpec, Parameters};
use crate::{Error, Result};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("strategy {0} needs a knowledge model")]
    MissingKnowledge(StrategyKind),
    #[error("invalid strategy configuration: {0}")]
    InvalidConfig(String),
    #[error("sample {0} has no label")]
    MissingLabel(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss {value} at epoch {epoch} on sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: String, value: f64 },
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Baseline,
    SemanticLoss,
    SymbolicFeatures,
    ContextRefinement,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Baseline,
        StrategyKind::SemanticLoss,
        StrategyKind::SymbolicFeatures,
        StrategyKind::ContextRefinement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Baseline => "baseline",
            StrategyKind::SemanticLoss => "semantic_loss",
            StrategyKind::SymbolicFeatures => "symbolic_features",
            StrategyKind::ContextRefinement => "context_refinement",
        }
    }

    /// Whether training consults the reasoner.
    pub fn reasons_in_training(self) -> bool {
        matches!(self, StrategyKind::SemanticLoss | StrategyKind::SymbolicFeatures)
    }

    /// Whether prediction consults the reasoner.
    pub fn reasons_at_inference(self) -> bool {
        matches!(self, StrategyKind::SymbolicFeatures | StrategyKind::ContextRefinement)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = StrategyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| StrategyError::InvalidConfig(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default)]
    pub loss: LossConfig,
}

impl StrategyConfig {
    pub fn baseline() -> Self {
        StrategyConfig {
            kind: StrategyKind::Baseline,
            loss: LossConfig::cross_entropy_only(),
        }
    }

    pub fn semantic(loss: LossConfig) -> Self {
        StrategyConfig {
            kind: StrategyKind::SemanticLoss,
            loss,
        }
    }

    pub fn of(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            loss: LossConfig::cross_entropy_only(),
        }
    }

    /// Short label used in reports, e.g. `semantic_loss[-P1]`.
    pub fn label(&self) -> String {
        match (self.kind, self.loss.semantic) {
            (StrategyKind::SemanticLoss, Some(s)) => format!("semantic_loss[{s}]"),
            (kind, _) => kind.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        self.loss
            .validate()
            .map_err(|e| StrategyError::InvalidConfig(e.to_string()))?;
        match (self.kind, self.loss.semantic) {
            (StrategyKind::SemanticLoss, None) => Err(StrategyError::InvalidConfig(
                "semantic_loss needs a semantic_type other than none".into(),
            )),
            (StrategyKind::SemanticLoss, Some(_)) | (_, None) => Ok(()),
            (kind, Some(_)) => Err(StrategyError::InvalidConfig(format!(
                "{kind} trains with cross-entropy only; semantic_type must be none"
            ))),
        }
    }

    /// The spec a model of this strategy uses: the infusion input is present
    /// exactly for symbolic features.
    pub fn network_spec(&self, base: &NetworkSpec) -> NetworkSpec {
        base.clone().with_infusion(self.kind == StrategyKind::SymbolicFeatures)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub reduction: Reduction,
    /// Drives initialization, shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            batch_size: 32,
            patience: 5,
            adam: AdamConfig::default(),
            reduction: Reduction::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        let bad = |m: &str| Err(StrategyError::InvalidConfig(m.into()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement
/// of the validation loss. Epochs count from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 0 until the first finite observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stopped_early: bool,
    pub optimizer_steps: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// Network, weights and everything needed to classify new windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub strategy: StrategyConfig,
    pub spec: NetworkSpec,
    pub params: Parameters,
    pub activities: ActivityVocabulary,
    pub contexts: ContextVocabulary,
    pub metadata: TrainingMetadata,
    /// How raw recordings become windows; absent for models trained on
    /// pre-encoded samples.
    #[serde(default)]
    pub layout: Option<InputLayout>,
}

const CHECKPOINT_FORMAT: &str = "nesy-har-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<M> {
    format: String,
    version: u32,
    model: M,
}

impl TrainedModel {
    pub fn kind(&self) -> StrategyKind {
        self.strategy.kind
    }

    /// Writes a JSON checkpoint; floats round-trip exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self,
        };
        let text = serde_json::to_string(&ck).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let head: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        if head.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(StrategyError::Checkpoint(format!("{} is not a {CHECKPOINT_FORMAT} file", path.display())).into());
        }
        let version = head.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(StrategyError::Checkpoint(format!("unsupported version {version:?}")).into());
        }
        let ck: Checkpoint<TrainedModel> = serde_json::from_value(head).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        let model = ck.model;
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        self.spec.validate()?;
        self.params.check_shapes(&self.spec)?;
        if self.spec.infusion != (self.kind() == StrategyKind::SymbolicFeatures) {
            return Err(StrategyError::Checkpoint("infusion input does not match the strategy".into()).into());
        }
        if self.activities.len() != self.spec.activities || self.contexts.len() != self.spec.context_width {
            return Err(StrategyError::Checkpoint("vocabulary sizes do not match the network".into()).into());
        }
        if !self.params.is_finite() {
            return Err(StrategyError::Checkpoint("non-finite parameters".into()).into());
        }
        Ok(())
    }
}

/// Training and validation samples with their vocabularies.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub train: &'a [EncodedSample],
    pub validation: &'a [EncodedSample],
    pub activities: &'a ActivityVocabulary,
    pub contexts: &'a ContextVocabulary,
}

/// Memoizes the reasoner per distinct context state.
pub struct ReasonerCache<'a> {
    reasoner: &'a dyn SymbolicReasoner,
    cache: HashMap<ContextState, ActivitySet>,
}

impl<'a> ReasonerCache<'a> {
    pub fn new(reasoner: &'a dyn SymbolicReasoner) -> Self {
        ReasonerCache {
            reasoner,
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, state: &ContextState) -> &ActivitySet {
        let reasoner = self.reasoner;
        self.cache
            .entry(state.clone())
            .or_insert_with(|| reasoner.consistent_activities(state))
    }

    /// Number of distinct states seen.
    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

fn check_vocabularies(
    reasoner: &dyn SymbolicReasoner,
    activities: &ActivityVocabulary,
    contexts: &ContextVocabulary,
) -> Result<(), StrategyError> {
    if reasoner.activities() != activities {
        return Err(StrategyError::VocabularyMismatch(
            "knowledge model and data disagree on the activity list".into(),
        ));
    }
    if reasoner.contexts() != contexts {
        return Err(StrategyError::VocabularyMismatch(
            "knowledge model and data disagree on the context vocabulary".into(),
        ));
    }
    Ok(())
}

/// Per-sample quantities that stay fixed during training.
struct Prepared<'s> {
    sample: &'s EncodedSample,
    label: usize,
    consistent: ActivitySet,
    infusion: Option<Vec<f64>>,
}

fn prepare<'s>(
    samples: &'s [EncodedSample],
    strategy: &StrategyConfig,
    cache: &mut Option<ReasonerCache<'_>>,
    k: usize,
) -> Result<Vec<Prepared<'s>>, StrategyError> {
    samples
        .iter()
        .map(|s| {
            let label = s.label.ok_or_else(|| StrategyError::MissingLabel(s.id.clone()))?;
            if label >= k {
                return Err(StrategyError::InvalidConfig(format!("sample {} has label {label} >= {k}", s.id)));
            }
            let consistent = match cache {
                Some(c) if strategy.kind.reasons_in_training() => c.get(&s.state).clone(),
                _ => ActivitySet::full(k),
            };
            let infusion = (strategy.kind == StrategyKind::SymbolicFeatures).then(|| consistent.indicator());
            Ok(Prepared {
                sample: s,
                label,
                consistent,
                infusion,
            })
        })
        .collect()
}

fn input_of<'a>(p: &'a Prepared<'_>) -> NetworkInput<'a> {
    NetworkInput {
        phone: &p.sample.phone,
        watch: &p.sample.watch,
        context: &p.sample.context,
        infusion: p.infusion.as_deref(),
    }
}

/// Trains one model, stopping early on the validation loss.
pub fn train(
    set: TrainingSet<'_>,
    strategy: &StrategyConfig,
    reasoner: Option<&dyn SymbolicReasoner>,
    base_spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    train_with_hook(set, strategy, reasoner, base_spec, cfg, &mut |_, loss| loss)
}

/// Like [`train`]; `hook(epoch, validation_loss)` returns the value early
/// stopping sees.
pub fn train_with_hook(
    set: TrainingSet<'_>,
    strategy: &StrategyConfig,
    reasoner: Option<&dyn SymbolicReasoner>,
    base_spec: &NetworkSpec,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(usize, f64) -> f64,
) -> Result<TrainedModel> {
    strategy.validate()?;
    cfg.validate()?;
    let k = set.activities.len();
    let spec = strategy.network_spec(base_spec);
    spec.validate()?;
    if spec.activities != k || spec.context_width != set.contexts.len() {
        return Err(StrategyError::VocabularyMismatch(format!(
            "network expects {} activities and {} context predicates, data has {k} and {}",
            spec.activities,
            spec.context_width,
            set.contexts.len()
        ))
        .into());
    }
    let mut cache = match (strategy.kind, reasoner) {
        (StrategyKind::Baseline, _) => None,
        (kind, None) => return Err(StrategyError::MissingKnowledge(kind).into()),
        (_, Some(r)) => {
            check_vocabularies(r, set.activities, set.contexts)?;
            Some(ReasonerCache::new(r))
        }
    };
    if set.train.is_empty() {
        return Err(StrategyError::EmptySplit("training").into());
    }
    if set.validation.is_empty() {
        return Err(StrategyError::EmptySplit("validation").into());
    }
    let train = prepare(set.train, strategy, &mut cache, k)?;
    let validation = prepare(set.validation, strategy, &mut cache, k)?;

    let mut warnings = Vec::new();
    let mut counts = vec![0usize; k];
    for p in &train {
        counts[p.label] += 1;
    }
    for (a, _) in counts.iter().enumerate().filter(|(_, &c)| c == 0) {
        let w = format!("activity {} has no training samples", set.activities.name(a));
        log::warn!("{w}");
        warnings.push(w);
    }

    let mut params = nn::build_network(&spec, cfg.seed)?;
    let mut best = params.clone();
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut grads = Parameters::zeros(&spec);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            let w = cfg.reduction.weight(batch.len());
            for &i in batch {
                let p = &train[i];
                let (probs, trace) = nn::forward(&params, &spec, &input_of(p), Mode::Train, &mut rng)?;
                let loss = losses::combined_loss(&probs, p.label, &p.consistent, &strategy.loss)?;
                if !loss.value.is_finite() {
                    return Err(StrategyError::NonFiniteLoss {
                        epoch,
                        sample: p.sample.id.clone(),
                        value: loss.value,
                    }
                    .into());
                }
                epoch_loss += loss.value;
                let d: Vec<f64> = loss.gradient.iter().map(|g| g * w).collect();
                nn::backward_into(&params, &spec, &trace, &d, BackwardOptions::default(), &mut grads)?;
            }
            adam.step_parameters(&mut params, &grads)?;
        }
        let computed = mean_loss(&params, &spec, &validation, &strategy.loss)?;
        let seen = hook(epoch, computed);
        let decision = stopper.observe(epoch, seen);
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            validation_loss: seen,
        });
        if decision.improved {
            best = params.clone();
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    let metadata = TrainingMetadata {
        epochs_run: history.len(),
        best_epoch: stopper.best_epoch(),
        best_validation_loss: stopper.best(),
        stopped_early,
        optimizer_steps: adam.steps(),
        train_samples: train.len(),
        validation_samples: validation.len(),
        seed: cfg.seed,
        history,
        warnings,
    };
    Ok(TrainedModel {
        strategy: *strategy,
        spec,
        params: best,
        activities: set.activities.clone(),
        contexts: set.contexts.clone(),
        metadata,
        layout: None,
    })
}

/// Separates the shuffle and dropout stream from initialization.
const SHUFFLE_STREAM: u64 = 0x5eed_0fd4_0a0b_0c0d;

fn mean_loss(params: &Parameters, spec: &NetworkSpec, samples: &[Prepared<'_>], cfg: &LossConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for p in samples {
        let (probs, _) = nn::forward(params, spec, &input_of(p), Mode::Infer, &mut rng)?;
        total += losses::combined_loss(&probs, p.label, &p.consistent, cfg)?.value;
    }
    Ok(total / samples.len() as f64)
}

/// Result of [`refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub distribution: ProbabilityDistribution,
    /// The consistent mass was zero and the input came back unchanged.
    pub fallback: bool,
}

/// Zeroes the inconsistent activities and renormalizes the rest.
pub fn refine(p: &ProbabilityDistribution, consistent: &ActivitySet) -> Refined {
    let mass: f64 = p.probs().iter().enumerate().filter(|(i, _)| consistent.contains(*i)).map(|(_, v)| v).sum();
    if mass <= 0.0 || consistent.universe() != p.len() {
        return Refined {
            distribution: p.clone(),
            fallback: true,
        };
    }
    let probs = p
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &v)| if consistent.contains(i) { v / mass } else { 0.0 })
        .collect();
    Refined {
        distribution: ProbabilityDistribution::from_softmax(probs),
        fallback: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub activity: usize,
    pub distribution: ProbabilityDistribution,
    /// The consistent set, when the reasoner ran.
    pub consistent: Option<ActivitySet>,
    pub fallback: bool,
}

/// Classifies one sample. Baseline and semantic-loss models never touch
/// `reasoner`, even when one is supplied.
pub fn predict(model: &TrainedModel, sample: &EncodedSample, reasoner: Option<&dyn SymbolicReasoner>) -> Result<Prediction> {
    let kind = model.kind();
    let reasoner = if kind.reasons_at_inference() {
        let r = reasoner.ok_or(StrategyError::MissingKnowledge(kind))?;
        if r.activities().len() != model.activities.len() || r.contexts().len() != model.contexts.len() {
            return Err(StrategyError::VocabularyMismatch("knowledge model does not fit the trained network".into()).into());
        }
        Some(r)
    } else {
        None
    };
    let consistent = reasoner.map(|r| r.consistent_activities(&sample.state));
    let infusion = match (kind, &consistent) {
        (StrategyKind::SymbolicFeatures, Some(c)) => Some(c.indicator()),
        _ => None,
    };
    let input = NetworkInput {
        phone: &sample.phone,
        watch: &sample.watch,
        context: &sample.context,
        infusion: infusion.as_deref(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut dist, _) = nn::forward(&model.params, &model.spec, &input, Mode::Infer, &mut rng)?;
    let mut fallback = false;
    if kind == StrategyKind::ContextRefinement {
        let r = refine(&dist, consistent.as_ref().expect("reasoner ran"));
        dist = r.distribution;
        fallback = r.fallback;
    }
    Ok(Prediction {
        activity: dist.argmax().0,
        distribution: dist,
        consistent,
        fallback,
    })
}

/// Wraps a reasoner and counts every call made through it.
pub struct CountingReasoner<'a> {
    inner: &'a dyn SymbolicReasoner,
    calls: AtomicUsize,
}

impl<'a> CountingReasoner<'a> {
    pub fn new(inner: &'a dyn SymbolicReasoner) -> Self {
        CountingReasoner {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
    }
}

impl SymbolicReasoner for CountingReasoner<'_> {
    fn activities(&self) -> &ActivityVocabulary {
        self.tick();
        self.inner.activities()
    }

    fn contexts(&self) -> &ContextVocabulary {
        self.tick();
        self.inner.contexts()
    }

    fn consistent_activities(&self, state: &ContextState) -> ActivitySet {
        self.tick();
        self.inner.consistent_activities(state)
    }

    fn consistency_vector(&self, state: &ContextState) -> Vec<f64> {
        self.tick();
        self.inner.consistency_vector(state)
    }
}
