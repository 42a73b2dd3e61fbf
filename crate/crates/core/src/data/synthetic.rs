//! Synthetic context-aware recordings for desk-scale experiments.
//!
//! Every activity gets a fixed random inertial signature per channel (a
//! sinusoid, a second harmonic and an offset). Each user perturbs the
//! signatures, and each window adds a random phase plus Gaussian noise.
//! Activities come in annotated runs of a few windows. Per window the
//! context state is drawn uniformly from the states consistent with the
//! activity, or with probability `violation_rate` uniformly from all
//! states, and is written as raw context records that the discretization
//! maps back to exactly that state.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Annotation, DataError, EncodedSample, InputLayout, Stream, UserDataset};
use crate::context::{DiscretizationConfig, RawContextRecord};
use crate::knowledge::{ContextState, ContextVocabulary, KnowledgeModel, PredicateId, SymbolicReasoner};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub windows_per_user: usize,
    pub violation_rate: f64,
    /// Standard deviation of the additive sample noise.
    pub noise: f64,
    /// Relative spread of per-user gains, offsets and frequencies.
    pub user_variability: f64,
    pub seed: u64,
    pub window_seconds: f64,
    pub phone_rate: f64,
    pub watch_rate: f64,
    pub phone_channels: usize,
    pub watch_channels: usize,
    /// Annotated runs are between these many windows long.
    pub min_run: usize,
    pub max_run: usize,
    pub max_states: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 6,
            windows_per_user: 200,
            violation_rate: 0.05,
            noise: 1.0,
            user_variability: 0.2,
            seed: 0,
            window_seconds: 4.0,
            phone_rate: 16.0,
            watch_rate: 16.0,
            phone_channels: 3,
            watch_channels: 3,
            min_run: 1,
            max_run: 5,
            max_states: 1_000_000,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidGenerator(m));
        if !(0.0..=1.0).contains(&self.violation_rate) {
            return bad(format!("violation_rate {} outside [0, 1]", self.violation_rate));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.user_variability >= 0.0) {
            return bad("noise and user_variability must be non-negative".into());
        }
        if self.users == 0 || self.windows_per_user == 0 {
            return bad("need at least one user and one window".into());
        }
        if self.phone_channels == 0 || self.watch_channels == 0 {
            return bad("need at least one channel per device".into());
        }
        if self.min_run == 0 || self.min_run > self.max_run {
            return bad(format!("run length range {}..={} is empty", self.min_run, self.max_run));
        }
        self.layout(DiscretizationConfig::default()).validate()
    }

    fn layout(&self, discretization: DiscretizationConfig) -> InputLayout {
        let names = |prefix: &str, n: usize| (0..n).map(|c| format!("{prefix}{c}")).collect();
        InputLayout {
            window_seconds: self.window_seconds,
            phone_rate: self.phone_rate,
            watch_rate: self.watch_rate,
            phone_channels: names("acc", self.phone_channels),
            watch_channels: names("acc", self.watch_channels),
            discretization,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub users: Vec<UserDataset>,
    pub layout: InputLayout,
}

/// Every complete state: one value per dimension. Only exclusive
/// dimensions are supported.
pub fn enumerate_states(vocab: &ContextVocabulary, max_states: usize) -> Result<Vec<ContextState>, DataError> {
    let mut size: u128 = 1;
    for d in vocab.dimensions() {
        if !d.exclusive {
            return Err(DataError::InvalidGenerator(format!(
                "dimension `{}` is not exclusive; the generator draws one value per dimension",
                d.name
            )));
        }
        size = size.saturating_mul(d.values.len() as u128);
    }
    if size > max_states as u128 {
        return Err(DataError::StateSpaceTooLarge(size));
    }
    let mut states = vec![ContextState::new()];
    for d in 0..vocab.dimensions().len() {
        let ids: Vec<PredicateId> = vocab.predicates_of(d).collect();
        states = states
            .into_iter()
            .flat_map(|s| {
                ids.iter().map(move |&id| {
                    let mut t = s.clone();
                    t.insert(id);
                    t
                })
            })
            .collect();
    }
    Ok(states)
}

/// Per activity, the fraction of `states` it is consistent with.
pub fn chance_consistency(reasoner: &dyn SymbolicReasoner, states: &[ContextState]) -> Vec<f64> {
    let k = reasoner.activities().len();
    let mut hits = vec![0usize; k];
    for s in states {
        for a in reasoner.consistent_activities(s).iter() {
            hits[a] += 1;
        }
    }
    hits.into_iter().map(|h| h as f64 / states.len() as f64).collect()
}

struct Signature {
    offset: f64,
    amplitude: f64,
    frequency: f64,
    harmonic: f64,
}

struct UserShift {
    gain: f64,
    offset: f64,
    frequency: f64,
}

fn gauss(rng: &mut dyn RngCore) -> f64 {
    rng.sample(StandardNormal)
}

fn signatures(rng: &mut dyn RngCore, activities: usize, channels: usize, rate: f64) -> Vec<Vec<Signature>> {
    let max_f = (0.3 * rate).min(4.0);
    (0..activities)
        .map(|_| {
            (0..channels)
                .map(|_| Signature {
                    offset: rng.random_range(-1.0..1.0),
                    amplitude: rng.random_range(0.5..1.5),
                    frequency: rng.random_range(0.5..max_f),
                    harmonic: rng.random_range(0.0..0.5),
                })
                .collect()
        })
        .collect()
}

fn shifts(rng: &mut dyn RngCore, channels: usize, spread: f64) -> Vec<UserShift> {
    (0..channels)
        .map(|_| UserShift {
            gain: (1.0 + spread * gauss(rng)).max(0.1),
            offset: spread * gauss(rng),
            frequency: (1.0 + 0.5 * spread * gauss(rng)).max(0.2),
        })
        .collect()
}

/// Appends one window of samples for `activity` to `values`.
#[allow(clippy::too_many_arguments)]
fn synthesize(
    rng: &mut dyn RngCore,
    values: &mut [Vec<f64>],
    sig: &[Signature],
    user: &[UserShift],
    t0: f64,
    n: usize,
    rate: f64,
    noise: f64,
) {
    for (c, ch) in values.iter_mut().enumerate() {
        let (s, u) = (&sig[c], &user[c]);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let w = std::f64::consts::TAU * s.frequency * u.frequency;
        for i in 0..n {
            let t = t0 + i as f64 / rate;
            let x = s.offset + u.offset + u.gain * (s.amplitude * (w * t + phase).sin() + s.harmonic * (2.0 * w * t + phase).sin());
            ch.push(x + noise * gauss(rng));
        }
    }
}

/// Raw record whose aggregation reproduces `state`.
fn raw_record(
    rng: &mut dyn RngCore,
    state: &ContextState,
    vocab: &ContextVocabulary,
    cfg: &DiscretizationConfig,
    timestamp: f64,
) -> Result<RawContextRecord, DataError> {
    let mut rec = RawContextRecord {
        timestamp,
        ..Default::default()
    };
    for p in state.describe(vocab) {
        if p.dimension == cfg.speed.dimension {
            let bins = &cfg.speed;
            let i = bins.values.iter().position(|v| *v == p.value).ok_or_else(|| {
                DataError::InvalidGenerator(format!("speed value `{}` has no bin", p.value))
            })?;
            let lo = if i == 0 { 0.0 } else { bins.thresholds[i - 1] };
            let hi = match bins.thresholds.get(i) {
                Some(&t) => t,
                None => lo * 1.5 + 1.0,
            };
            rec.speed = Some(lo + (hi - lo) * rng.random_range(0.1..0.9));
        } else if p.dimension == cfg.height.dimension {
            let h = &cfg.height;
            let e = h.epsilon;
            rec.pressure_delta = Some(if p.value == h.ascending {
                -e * rng.random_range(2.0..4.0)
            } else if p.value == h.descending {
                e * rng.random_range(2.0..4.0)
            } else if p.value == h.level {
                e * rng.random_range(-0.5..0.5)
            } else {
                return Err(DataError::InvalidGenerator(format!("height value `{}` is not configured", p.value)));
            });
        } else if p.dimension == cfg.transport_dimension {
            rec.transport_route_nearby = Some(match p.value.as_str() {
                "true" => true,
                "false" => false,
                other => return Err(DataError::InvalidGenerator(format!("transport value `{other}`"))),
            });
        } else {
            rec.categorical.insert(p.dimension.clone(), p.value.clone());
        }
    }
    Ok(rec)
}

/// Generates `cfg.users` recordings labeled with the activities of
/// `knowledge`.
///
/// The returned layout carries `discretization` extended with a verbatim
/// field for every dimension that has no dedicated signal.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    knowledge: &KnowledgeModel,
    discretization: &DiscretizationConfig,
) -> Result<SyntheticDataset, DataError> {
    cfg.validate()?;
    discretization
        .validate()
        .map_err(|e| DataError::InvalidGenerator(e.to_string()))?;
    let vocab = knowledge.contexts();
    let acts = knowledge.activities();
    let states = enumerate_states(vocab, cfg.max_states)?;
    let mut consistent: Vec<Vec<usize>> = vec![Vec::new(); acts.len()];
    for (i, s) in states.iter().enumerate() {
        for a in knowledge.consistent_activities(s).iter() {
            consistent[a].push(i);
        }
    }
    if let Some(a) = consistent.iter().position(Vec::is_empty) {
        return Err(DataError::UnsatisfiableRule(acts.name(a).to_string()));
    }

    let mut disc = discretization.clone();
    let dedicated = [&disc.speed.dimension, &disc.height.dimension, &disc.transport_dimension]
        .map(|s| s.clone());
    let passthrough: BTreeMap<String, String> = vocab
        .dimensions()
        .iter()
        .filter(|d| !dedicated.contains(&d.name))
        .map(|d| (d.name.clone(), d.name.clone()))
        .collect();
    disc.categorical_fields.extend(passthrough);

    let layout = cfg.layout(disc);
    let (np, nw) = (layout.phone_samples(), layout.watch_samples());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phone_sig = signatures(&mut rng, acts.len(), cfg.phone_channels, cfg.phone_rate);
    let watch_sig = signatures(&mut rng, acts.len(), cfg.watch_channels, cfg.watch_rate);
    let width = format!("{}", cfg.users - 1).len();

    let mut users = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let mut rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let name = format!("user{u:0width$}");
        let phone_shift = shifts(&mut rng, cfg.phone_channels, cfg.user_variability);
        let watch_shift = shifts(&mut rng, cfg.watch_channels, cfg.user_variability);
        let mut phone = vec![Vec::new(); cfg.phone_channels];
        let mut watch = vec![Vec::new(); cfg.watch_channels];
        let mut context = Vec::new();
        let mut annotations = Vec::new();
        let z = cfg.window_seconds;
        let mut w = 0;
        while w < cfg.windows_per_user {
            let run = rng.random_range(cfg.min_run..=cfg.max_run).min(cfg.windows_per_user - w);
            let a = rng.random_range(0..acts.len());
            annotations.push(Annotation {
                user: name.clone(),
                activity: acts.name(a).to_string(),
                t_s: w as f64 * z,
                t_e: (w + run) as f64 * z,
            });
            for i in w..w + run {
                let t0 = i as f64 * z;
                synthesize(&mut rng, &mut phone, &phone_sig[a], &phone_shift, t0, np, cfg.phone_rate, cfg.noise);
                synthesize(&mut rng, &mut watch, &watch_sig[a], &watch_shift, t0, nw, cfg.watch_rate, cfg.noise);
                let state = if rng.random_bool(cfg.violation_rate) {
                    &states[rng.random_range(0..states.len())]
                } else {
                    &states[consistent[a][rng.random_range(0..consistent[a].len())]]
                };
                context.push(raw_record(&mut rng, state, vocab, &layout.discretization, t0 + z / 2.0)?);
            }
            w += run;
        }
        let stream = |rate: f64, channels: &[String], values: Vec<Vec<f64>>| Stream {
            rate,
            channels: channels.to_vec(),
            timestamps: (0..values[0].len()).map(|i| i as f64 / rate).collect(),
            values,
        };
        users.push(UserDataset {
            user: name,
            phone: stream(cfg.phone_rate, &layout.phone_channels, phone),
            watch: stream(cfg.watch_rate, &layout.watch_channels, watch),
            context,
            annotations,
        });
    }
    Ok(SyntheticDataset { users, layout })
}

/// Share of labeled samples whose label the reasoner finds consistent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyAudit {
    pub windows: usize,
    pub consistent: usize,
    /// `(activity, windows, consistent)` per activity.
    pub per_activity: Vec<(String, usize, usize)>,
}

impl ConsistencyAudit {
    pub fn rate(&self) -> f64 {
        if self.windows == 0 {
            return 1.0;
        }
        self.consistent as f64 / self.windows as f64
    }
}

pub fn audit_consistency(samples: &[EncodedSample], reasoner: &dyn SymbolicReasoner) -> ConsistencyAudit {
    let acts = reasoner.activities();
    let mut per: Vec<(usize, usize)> = vec![(0, 0); acts.len()];
    for s in samples {
        if let Some(l) = s.label {
            per[l].0 += 1;
            if reasoner.consistent_activities(&s.state).contains(l) {
                per[l].1 += 1;
            }
        }
    }
    ConsistencyAudit {
        windows: per.iter().map(|p| p.0).sum(),
        consistent: per.iter().map(|p| p.1).sum(),
        per_activity: per
            .into_iter()
            .enumerate()
            .map(|(a, (n, c))| (acts.name(a).to_string(), n, c))
            .collect(),
    }
}
