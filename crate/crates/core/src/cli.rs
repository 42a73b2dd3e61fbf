//! Commands behind the `nesy-har` binary.
//!
//! Each command writes its human-readable output to the given writer and
//! reports failures as a [`Failure`] carrying the process exit code: 2 for
//! usage and configuration errors, 1 for failures at run time.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::context::DiscretizationConfig;
use crate::data::{
    audit_consistency, encode_users, generate_synthetic, load_dataset, split_validation, write_dataset,
    EncodedSample, InputLayout, SyntheticConfig, UserDataset,
};
use crate::eval::{self, ExperimentData, ExperimentReport, ExperimentSpec, StrategyEntry};
use crate::gradcheck;
use crate::knowledge::{KnowledgeModel, SymbolicReasoner};
use crate::losses::{LossConfig, SemanticLoss};
use crate::nn::NetworkSpec;
use crate::strategies::{self, StrategyConfig, StrategyKind, TrainConfig, TrainedModel, TrainingSet};
use crate::Error;

/// Environment variable holding the worker thread count for `run`.
pub const THREADS_ENV: &str = "NESY_HAR_THREADS";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

fn runtime(e: Error) -> Failure {
    Failure::runtime(e.to_string())
}

fn usage(e: Error) -> Failure {
    Failure::usage(e.to_string())
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::runtime(format!("writing output: {e}")))
}

/// Network architecture preset plus optional per-field overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Compact,
    Reference,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: Preset,
    pub filters: Option<Vec<usize>>,
    pub phone_kernels: Option<Vec<usize>>,
    pub watch_kernels: Option<Vec<usize>>,
    pub pool: Option<usize>,
    pub dense: Option<usize>,
    pub context_dense: Option<usize>,
    pub dropout: Option<f64>,
    pub hidden: Option<usize>,
}

impl NetworkConfig {
    /// Spec for the given input layout and vocabulary sizes, without the
    /// infusion input (strategies add it).
    pub fn build(&self, layout: &InputLayout, context_width: usize, activities: usize) -> NetworkSpec {
        let (pc, wc) = (layout.phone_channels.len(), layout.watch_channels.len());
        let mut spec = match self.preset {
            Preset::Compact => NetworkSpec::compact(pc, wc, layout.phone_samples(), context_width, activities),
            Preset::Reference => NetworkSpec::reference(pc, wc, layout.phone_samples(), context_width, activities),
        };
        spec.watch.window = layout.watch_samples();
        for b in [&mut spec.phone, &mut spec.watch] {
            if let Some(f) = &self.filters {
                b.filters = f.clone();
            }
            if let Some(p) = self.pool {
                b.pool = p;
            }
            if let Some(d) = self.dense {
                b.dense = d;
            }
        }
        if let Some(k) = &self.phone_kernels {
            spec.phone.kernels = k.clone();
        }
        if let Some(k) = &self.watch_kernels {
            spec.watch.kernels = k.clone();
        }
        if let Some(c) = self.context_dense {
            spec.context_dense = c;
        }
        if let Some(d) = self.dropout {
            spec.dropout = d;
        }
        if let Some(h) = self.hidden {
            spec.hidden = h;
        }
        spec
    }
}

/// One `[[strategies]]` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyToml {
    pub kind: StrategyKind,
    /// `All`, `-PP`, `01`, `-P1`, `0P` or `none`.
    #[serde(default)]
    pub semantic_type: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Integer alphas searched per cell on the validation split.
    #[serde(default)]
    pub alpha_grid: Option<Vec<u32>>,
}

impl StrategyToml {
    fn entry(&self) -> Result<StrategyEntry, String> {
        let semantic = match self.semantic_type.as_deref() {
            None => None,
            Some(s) if s.eq_ignore_ascii_case("none") => None,
            Some(s) => Some(s.parse::<SemanticLoss>().map_err(|e| e.to_string())?),
        };
        let loss = match semantic {
            Some(kind) => LossConfig::semantic(kind, self.alpha.unwrap_or(1.0)),
            None if self.alpha.is_some() => return Err("alpha given without a semantic_type".into()),
            None => LossConfig::cross_entropy_only(),
        };
        let entry = StrategyEntry {
            config: StrategyConfig { kind: self.kind, loss },
            alpha_grid: self.alpha_grid.clone(),
        };
        entry.config.validate().map_err(|e| e.to_string())?;
        if entry.alpha_grid.is_some() && self.alpha.is_some() {
            return Err("give either alpha or alpha_grid".into());
        }
        Ok(entry)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetToml {
    /// A directory written by `synth` or in the same layout.
    #[serde(default)]
    pub directory: Option<PathBuf>,
    /// Generate the data in memory instead.
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

/// Everything `run` needs, read from one TOML file. Relative paths are
/// resolved against the file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Knowledge used by every strategy other than the baseline.
    pub rules: Option<PathBuf>,
    /// Activity and context lists for baseline-only runs; defaults to `rules`.
    pub vocabulary: Option<PathBuf>,
    pub dataset: DatasetToml,
    pub strategies: Vec<StrategyEntry>,
    pub fractions: Vec<f64>,
    pub fold_size: usize,
    pub repetitions: usize,
    pub seeds: Vec<u64>,
    pub validation_fraction: f64,
    pub network: NetworkConfig,
    /// `seed` is replaced per cell by a seed derived from the repetition.
    pub train: TrainConfig,
    /// Overrides the dataset's own discretization when given.
    pub discretization: Option<DiscretizationConfig>,
    pub output_dir: PathBuf,
    /// Also train one model per strategy on all users and store it under
    /// `output_dir/models/`.
    pub save_checkpoints: bool,
}

const TOP_LEVEL: [&str; 14] = [
    "rules",
    "vocabulary",
    "dataset",
    "strategies",
    "fractions",
    "fold_size",
    "repetitions",
    "seeds",
    "validation_fraction",
    "network",
    "train",
    "discretization",
    "output_dir",
    "save_checkpoints",
];

fn field<T: for<'de> Deserialize<'de>>(table: &toml::Table, key: &str, problems: &mut Vec<String>) -> Option<T> {
    let value = table.get(key)?.clone();
    match value.try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("{key}: {}", e.message().trim()));
            None
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; every problem found is listed in the error.
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|problems| {
            Failure::usage(format!(
                "{}: {} problem(s)\n  {}",
                path.display(),
                problems.len(),
                problems.join("\n  ")
            ))
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, Vec<String>> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| vec![e.to_string().trim().to_string()])?;
        let mut problems: Vec<String> = table
            .keys()
            .filter(|k| !TOP_LEVEL.contains(&k.as_str()))
            .map(|k| format!("{k}: unknown field"))
            .collect();
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

        let rules: Option<PathBuf> = field(&table, "rules", &mut problems).map(resolve);
        let vocabulary: Option<PathBuf> = field(&table, "vocabulary", &mut problems).map(resolve);
        let dataset: Option<DatasetToml> = field(&table, "dataset", &mut problems);
        let raw_strategies: Option<Vec<StrategyToml>> = field(&table, "strategies", &mut problems);
        let fractions: Vec<f64> = field(&table, "fractions", &mut problems).unwrap_or_else(|| vec![1.0]);
        let fold_size: usize = field(&table, "fold_size", &mut problems).unwrap_or(1);
        let repetitions: usize = field(&table, "repetitions", &mut problems).unwrap_or(5);
        let seeds: Vec<u64> = field(&table, "seeds", &mut problems).unwrap_or_else(|| (1..=repetitions as u64).collect());
        let validation_fraction: f64 = field(&table, "validation_fraction", &mut problems).unwrap_or(0.1);
        let network: NetworkConfig = field(&table, "network", &mut problems).unwrap_or_default();
        let train: TrainConfig = field(&table, "train", &mut problems).unwrap_or_default();
        let discretization: Option<DiscretizationConfig> = field(&table, "discretization", &mut problems);
        let output_dir: Option<PathBuf> = field(&table, "output_dir", &mut problems).map(resolve);
        let save_checkpoints: bool = field(&table, "save_checkpoints", &mut problems).unwrap_or(false);

        let mut strategies = Vec::new();
        match &raw_strategies {
            None if !table.contains_key("strategies") => problems.push("strategies: missing".into()),
            None => {}
            Some(list) if list.is_empty() => problems.push("strategies: empty".into()),
            Some(list) => {
                for (i, s) in list.iter().enumerate() {
                    match s.entry() {
                        Ok(e) => strategies.push(e),
                        Err(e) => problems.push(format!("strategies[{i}]: {e}")),
                    }
                }
            }
        }
        let labels: BTreeSet<String> = strategies.iter().map(StrategyEntry::label).collect();
        if labels.len() != strategies.len() {
            problems.push("strategies: labels must be unique".into());
        }
        for e in &strategies {
            if e.config.kind != StrategyKind::Baseline && rules.is_none() {
                problems.push(format!("rules: required by {}", e.label()));
            }
            if let Some(grid) = &e.alpha_grid {
                if e.config.kind != StrategyKind::SemanticLoss {
                    problems.push(format!("strategies: alpha_grid only applies to semantic_loss, not {}", e.label()));
                } else if grid.is_empty() {
                    problems.push(format!("strategies: alpha_grid of {} is empty", e.label()));
                }
            }
        }
        for (name, p) in [("rules", &rules), ("vocabulary", &vocabulary)] {
            if let Some(p) = p {
                if !p.is_file() {
                    problems.push(format!("{name}: file {} not found", p.display()));
                }
            }
        }
        if rules.is_none() && vocabulary.is_none() {
            problems.push("vocabulary: needed when no rules file is given".into());
        }
        match &dataset {
            None if !table.contains_key("dataset") => problems.push("dataset: missing".into()),
            None => {}
            Some(DatasetToml {
                directory: Some(_),
                synthetic: Some(_),
            }) => problems.push("dataset: give either directory or synthetic, not both".into()),
            Some(DatasetToml {
                directory: None,
                synthetic: None,
            }) => problems.push("dataset: needs directory or synthetic".into()),
            Some(DatasetToml {
                directory: Some(d), ..
            }) => {
                if !resolve(d.clone()).join("dataset.json").is_file() {
                    problems.push(format!("dataset.directory: {} has no dataset.json", resolve(d.clone()).display()));
                }
            }
            Some(DatasetToml {
                synthetic: Some(s), ..
            }) => {
                if let Err(e) = s.validate() {
                    problems.push(format!("dataset.synthetic: {e}"));
                }
            }
        }
        if fractions.is_empty() {
            problems.push("fractions: empty".into());
        }
        for f in &fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                problems.push(format!("fractions: {f} is outside (0, 1]"));
            }
        }
        if fold_size == 0 {
            problems.push("fold_size: must be at least 1".into());
        }
        if repetitions == 0 {
            problems.push("repetitions: must be at least 1".into());
        }
        if seeds.len() < repetitions {
            problems.push(format!("seeds: {} seeds for {repetitions} repetitions", seeds.len()));
        }
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            problems.push(format!("validation_fraction: {validation_fraction} is outside (0, 1)"));
        }
        if let Err(e) = train.validate() {
            problems.push(format!("train: {e}"));
        }
        if let Some(Err(e)) = discretization.as_ref().map(DiscretizationConfig::validate) {
            problems.push(format!("discretization: {e}"));
        }
        if let Some(d) = network.dropout {
            if !(0.0..1.0).contains(&d) {
                problems.push(format!("network.dropout: {d} is outside [0, 1)"));
            }
        }
        if output_dir.is_none() {
            problems.push("output_dir: missing".into());
        }
        if !problems.is_empty() {
            return Err(problems);
        }
        let dataset = dataset.expect("checked");
        Ok(ExperimentConfig {
            rules,
            vocabulary,
            dataset: DatasetToml {
                directory: dataset.directory.map(resolve),
                synthetic: dataset.synthetic,
            },
            strategies,
            fractions,
            fold_size,
            repetitions,
            seeds,
            validation_fraction,
            network,
            train,
            discretization,
            output_dir: output_dir.expect("checked"),
            save_checkpoints,
        })
    }

    fn knowledge(&self) -> CliResult<KnowledgeModel> {
        let path = self.rules.as_ref().or(self.vocabulary.as_ref()).expect("validated");
        KnowledgeModel::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }
}

/// Encoded samples of a run with their layout.
pub struct PreparedData {
    pub knowledge: KnowledgeModel,
    pub layout: InputLayout,
    pub samples: Vec<EncodedSample>,
    pub warnings: Vec<String>,
}

/// Loads or generates the dataset of `cfg` and segments it into windows.
pub fn prepare_data(cfg: &ExperimentConfig) -> CliResult<PreparedData> {
    let knowledge = cfg.knowledge()?;
    let disc = cfg.discretization.clone().unwrap_or_default();
    let (users, mut layout): (Vec<UserDataset>, InputLayout) = match (&cfg.dataset.directory, &cfg.dataset.synthetic) {
        (Some(dir), _) => {
            let ds = load_dataset(dir).map_err(usage)?;
            (ds.users, ds.layout)
        }
        (None, Some(s)) => {
            let ds = generate_synthetic(s, &knowledge, &disc).map_err(|e| Failure::usage(format!("dataset.synthetic: {e}")))?;
            (ds.users, ds.layout)
        }
        (None, None) => unreachable!("validated"),
    };
    if cfg.dataset.directory.is_some() {
        if let Some(d) = &cfg.discretization {
            layout.discretization = d.clone();
        }
    }
    let (samples, warnings) =
        encode_users(&users, &layout, knowledge.activities(), knowledge.contexts(), false).map_err(|e| runtime(e.into()))?;
    Ok(PreparedData {
        knowledge,
        layout,
        samples,
        warnings,
    })
}

fn thread_count() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::usage(format!("{THREADS_ENV}={s} is not a positive integer"))),
        },
    }
}

/// Runs `f` on a pool sized by [`THREADS_ENV`] (all cores by default).
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::runtime(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Experiment spec of a validated config over prepared data.
pub fn experiment_spec(cfg: &ExperimentConfig, data: &PreparedData) -> ExperimentSpec {
    ExperimentSpec {
        strategies: cfg.strategies.clone(),
        fractions: cfg.fractions.clone(),
        repetitions: cfg.repetitions,
        seeds: cfg.seeds.clone(),
        fold_size: cfg.fold_size,
        validation_fraction: cfg.validation_fraction,
        network: cfg
            .network
            .build(&data.layout, data.knowledge.contexts().len(), data.knowledge.activities().len()),
        train: cfg.train,
    }
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect::<String>()
        .trim_end_matches('_')
        .to_string()
}

fn train_final(entry: &StrategyEntry, data: &PreparedData, spec: &ExperimentSpec, seed: u64) -> crate::Result<TrainedModel> {
    let (train, validation) = split_validation(data.samples.clone(), spec.validation_fraction, eval::mix_seed(seed, 0xf1a1));
    let set = TrainingSet {
        train: &train,
        validation: &validation,
        activities: data.knowledge.activities(),
        contexts: data.knowledge.contexts(),
    };
    let cfg = TrainConfig {
        seed: eval::mix_seed(seed, 0xc0de),
        ..spec.train
    };
    let reasoner: Option<&dyn SymbolicReasoner> = Some(&data.knowledge);
    let mut model = match &entry.alpha_grid {
        Some(grid) => {
            let search = eval::grid_search_alpha(set, &entry.config, grid, reasoner, &spec.network, &cfg)?;
            match search.model {
                Some(m) => m,
                None => {
                    let mut s = entry.config;
                    s.loss.alpha = f64::from(search.alpha);
                    strategies::train(set, &s, reasoner, &spec.network, &cfg)?
                }
            }
        }
        None if entry.config.kind == StrategyKind::ContextRefinement => {
            let mut m = strategies::train(set, &StrategyConfig::baseline(), reasoner, &spec.network, &cfg)?;
            m.strategy.kind = StrategyKind::ContextRefinement;
            m
        }
        None => strategies::train(set, &entry.config, reasoner, &spec.network, &cfg)?,
    };
    model.layout = Some(data.layout.clone());
    Ok(model)
}

/// `run`: the experiment grid, its report files and the console table.
pub fn cmd_run(config: &Path, out: &mut dyn Write) -> CliResult<ExperimentReport> {
    let cfg = ExperimentConfig::load(config)?;
    let data = prepare_data(&cfg)?;
    for w in &data.warnings {
        log::warn!("{w}");
    }
    let spec = experiment_spec(&cfg, &data);
    let users: BTreeSet<&str> = data.samples.iter().map(|s| s.user.as_str()).collect();
    spec.validate(users.len(), cfg.rules.is_some())
        .map_err(|e| Failure::usage(e.to_string()))?;
    let reasoner: Option<&dyn SymbolicReasoner> = cfg.rules.as_ref().map(|_| &data.knowledge as &dyn SymbolicReasoner);
    let input = ExperimentData {
        samples: &data.samples,
        activities: data.knowledge.activities(),
        contexts: data.knowledge.contexts(),
        reasoner,
    };
    let report = with_thread_pool(|| eval::run_experiment(input, &spec))?.map_err(runtime)?;
    eval::write_report(&cfg.output_dir, &report).map_err(runtime)?;
    if cfg.save_checkpoints {
        let dir = cfg.output_dir.join("models");
        std::fs::create_dir_all(&dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        for entry in &cfg.strategies {
            let model = train_final(entry, &data, &spec, cfg.seeds[0]).map_err(runtime)?;
            let path = dir.join(format!("{}.json", file_stem(&entry.label())));
            model.save(&path).map_err(runtime)?;
        }
    }
    emit(out, &eval::summary_table(&report))?;
    let failed: usize = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        emit(out, &format!("{failed} cell(s) failed; see cells.csv\n"))?;
    }
    emit(out, &format!("report written to {}\n", cfg.output_dir.display()))?;
    Ok(report)
}

/// `reason`: the consistent activities of one state and the binary vector.
pub fn cmd_reason(rules: &Path, state: &str, out: &mut dyn Write) -> CliResult {
    let km = KnowledgeModel::load(rules).map_err(|e| Failure::usage(format!("{}: {e}", rules.display())))?;
    let s = km
        .contexts()
        .parse_state(state)
        .map_err(|e| Failure::usage(format!("state `{state}`: {e}")))?;
    let set = km.consistent_activities(&s);
    let names: Vec<&str> = set.iter().map(|a| km.activities().name(a)).collect();
    let vector: Vec<String> = km.consistency_vector(&s).iter().map(|v| format!("{v}")).collect();
    emit(out, &format!("consistent: {}\nvector: {}\n", names.join(" "), vector.join(" ")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    #[serde(default)]
    generator: SyntheticConfig,
    #[serde(default)]
    discretization: DiscretizationConfig,
}

/// `synth`: writes a synthetic dataset directory. `config` is a TOML file
/// with optional `[generator]` and `[discretization]` tables.
pub fn cmd_synth(rules: &Path, config: Option<&Path>, dir: &Path, out: &mut dyn Write) -> CliResult {
    let km = KnowledgeModel::load(rules).map_err(|e| Failure::usage(format!("{}: {e}", rules.display())))?;
    let file: SynthFile = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => SynthFile {
            generator: SyntheticConfig::default(),
            discretization: DiscretizationConfig::default(),
        },
    };
    let ds = generate_synthetic(&file.generator, &km, &file.discretization).map_err(|e| Failure::usage(e.to_string()))?;
    write_dataset(dir, &ds.layout, &ds.users).map_err(runtime)?;
    let windows: usize = ds.users.len() * file.generator.windows_per_user;
    emit(
        out,
        &format!("wrote {} users, {windows} windows to {}\n", ds.users.len(), dir.display()),
    )
}

/// `audit`: how many labeled windows of a dataset the rules call consistent.
pub fn cmd_audit(dataset: &Path, rules: &Path, out: &mut dyn Write) -> CliResult<f64> {
    let km = KnowledgeModel::load(rules).map_err(|e| Failure::usage(format!("{}: {e}", rules.display())))?;
    let ds = load_dataset(dataset).map_err(usage)?;
    let (samples, warnings) =
        encode_users(&ds.users, &ds.layout, km.activities(), km.contexts(), false).map_err(|e| runtime(e.into()))?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let audit = audit_consistency(&samples, &km);
    let mut text = String::new();
    for (name, n, ok) in &audit.per_activity {
        let rate = if *n == 0 { 0.0 } else { *ok as f64 / *n as f64 * 100.0 };
        text.push_str(&format!("{name:<20} {ok:>6} / {n:<6} {rate:6.2}%\n"));
    }
    text.push_str(&format!(
        "{:<20} {:>6} / {:<6} {:6.2}%\n",
        "all",
        audit.consistent,
        audit.windows,
        audit.rate() * 100.0
    ));
    emit(out, &text)?;
    Ok(audit.rate())
}

/// `gradcheck`: finite-difference checks of the network and every loss.
pub fn cmd_gradcheck(seed: u64, trials: usize, out: &mut dyn Write) -> CliResult<gradcheck::GradcheckReport> {
    if trials == 0 {
        return Err(Failure::usage("trials must be at least 1"));
    }
    let report = gradcheck::run_gradcheck(seed, trials).map_err(runtime)?;
    let mut text = String::new();
    for r in &report.results {
        text.push_str(&format!(
            "{:<4} {:<32} max rel err {:.3e} (checked {}, skipped {})\n",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped
        ));
    }
    text.push_str(&format!(
        "{}: max relative error {:.3e} (tolerance {:.0e})\n",
        if report.passed() { "pass" } else { "fail" },
        report.max_rel_error(),
        gradcheck::NETWORK_TOLERANCE
    ));
    emit(out, &text)?;
    if !report.passed() {
        let worst: Vec<String> = report
            .failures()
            .map(|r| format!("{} at {} ({:.3e})", r.name, r.worst, r.max_rel_error))
            .collect();
        return Err(Failure::runtime(format!("gradient check failed: {}", worst.join("; "))));
    }
    Ok(report)
}

/// One JSON line of `classify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedWindow {
    pub id: String,
    pub user: String,
    pub activity: String,
    pub distribution: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistent: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// `classify`: JSON-lines predictions for every window of a dataset
/// directory. Rules must be given exactly when the model's strategy
/// reasons at inference.
pub fn cmd_classify(model: &Path, samples: &Path, rules: Option<&Path>, out: &mut dyn Write) -> CliResult<usize> {
    let m = TrainedModel::load(model).map_err(usage)?;
    let kind = m.kind();
    let knowledge = match (kind.reasons_at_inference(), rules) {
        (true, None) => return Err(Failure::usage(format!("a {kind} model needs --rules"))),
        (false, Some(_)) => {
            return Err(Failure::usage(format!(
                "a {kind} model classifies without knowledge; drop --rules"
            )))
        }
        (true, Some(p)) => Some(KnowledgeModel::load(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?),
        (false, None) => None,
    };
    if let Some(k) = &knowledge {
        if k.activities() != &m.activities || k.contexts() != &m.contexts {
            return Err(Failure::usage("rules do not match the model's vocabularies"));
        }
    }
    let layout = m
        .layout
        .clone()
        .ok_or_else(|| Failure::usage("checkpoint has no input layout"))?;
    let ds = load_dataset(samples).map_err(usage)?;
    if ds.layout.phone_channels != layout.phone_channels
        || ds.layout.watch_channels != layout.watch_channels
        || ds.layout.phone_rate != layout.phone_rate
        || ds.layout.watch_rate != layout.watch_rate
    {
        return Err(Failure::usage("dataset channels or rates differ from the model's"));
    }
    let (encoded, warnings) =
        encode_users(&ds.users, &layout, &m.activities, &m.contexts, true).map_err(|e| runtime(e.into()))?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let reasoner = knowledge.as_ref().map(|k| k as &dyn SymbolicReasoner);
    let mut text = String::new();
    for s in &encoded {
        let p = strategies::predict(&m, s, reasoner).map_err(runtime)?;
        let ran = p.consistent.is_some();
        let line = ClassifiedWindow {
            id: s.id.clone(),
            user: s.user.clone(),
            activity: m.activities.name(p.activity).to_string(),
            distribution: p.distribution.probs().to_vec(),
            consistent: p
                .consistent
                .as_ref()
                .map(|c| c.iter().map(|a| m.activities.name(a).to_string()).collect()),
            fallback: ran.then_some(p.fallback),
            label: s.label.map(|l| m.activities.name(l).to_string()),
        };
        text.push_str(&serde_json::to_string(&line).map_err(|e| Failure::runtime(e.to_string()))?);
        text.push('\n');
    }
    emit(out, &text)?;
    Ok(encoded.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, Vec<String>> {
        ExperimentConfig::parse(text, Path::new("."))
    }

    #[test]
    fn problems_are_listed_together() {
        let problems = parse(
            "repetitions = 3\nseeds = [1]\nfractions = [0.0]\nbogus = 1\n[[strategies]]\nkind = \"semantic_loss\"\nsemantic_type = \"All\"\n[[strategies]]\nkind = \"semantic_loss\"\nsemantic_type = \"XX\"\n",
        )
        .unwrap_err();
        let all = problems.join("\n");
        for needle in [
            "bogus: unknown field",
            "rules: required by semantic_loss[All]",
            "strategies[1]",
            "dataset: missing",
            "fractions: 0",
            "seeds: 1 seeds for 3 repetitions",
            "output_dir: missing",
        ] {
            assert!(all.contains(needle), "missing `{needle}` in\n{all}");
        }
    }

    #[test]
    fn nested_typos_are_caught() {
        let problems = parse("[train]\nmax_epoch = 3\n[network]\nfliters = [1]\n").unwrap_err();
        let all = problems.join("\n");
        assert!(all.contains("train:") && all.contains("max_epoch"), "{all}");
        assert!(all.contains("network:") && all.contains("fliters"), "{all}");
    }

    #[test]
    fn strategy_entries() {
        let e = |t: &str| toml::from_str::<StrategyToml>(t).unwrap().entry();
        assert_eq!(e("kind = \"baseline\"").unwrap().config, StrategyConfig::baseline());
        let sl = e("kind = \"semantic_loss\"\nsemantic_type = \"-P1\"\nalpha = 7.0").unwrap();
        assert_eq!(sl.config.loss, LossConfig::semantic(SemanticLoss::MinusProbOne, 7.0));
        assert!(e("kind = \"baseline\"\nalpha = 2.0").is_err());
        assert!(e("kind = \"semantic_loss\"").is_err());
        assert!(e("kind = \"semantic_loss\"\nsemantic_type = \"All\"\nalpha = -1.0").is_err());
        assert!(toml::from_str::<StrategyToml>("kind = \"magic\"").is_err());
    }

    #[test]
    fn network_overrides() {
        let layout = InputLayout {
            window_seconds: 4.0,
            phone_rate: 16.0,
            watch_rate: 12.0,
            phone_channels: vec!["a".into(); 3],
            watch_channels: vec!["b".into(); 2],
            discretization: DiscretizationConfig::default(),
        };
        let cfg = NetworkConfig {
            hidden: Some(12),
            watch_kernels: Some(vec![3, 2, 2]),
            ..Default::default()
        };
        let spec = cfg.build(&layout, 9, 4);
        assert_eq!((spec.phone.window, spec.watch.window), (64, 48));
        assert_eq!(spec.hidden, 12);
        assert_eq!(spec.watch.kernels, vec![3, 2, 2]);
        assert_eq!(spec.watch.channels, 2);
        spec.validate().unwrap();
    }

    #[test]
    fn stems_are_file_safe() {
        assert_eq!(file_stem("semantic_loss[-P1]"), "semantic_loss_-P1");
        assert_eq!(file_stem("baseline"), "baseline");
    }
}
