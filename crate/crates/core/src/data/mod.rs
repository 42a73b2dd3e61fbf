//! Recordings, windowing and encoding.
//!
//! A [`UserDataset`] holds one user's phone and watch inertial streams, raw
//! context records and activity annotations. [`segment`] cuts it into
//! non-overlapping windows of `z` seconds. Each window takes the label of the
//! annotation it overlaps most (ties go to the earlier annotation) and the
//! context state aggregated from the records inside it. [`encode`] turns a
//! window into the network's inputs.

mod extrasensory;
mod io;
mod synthetic;

pub use extrasensory::{
    map_and_clean_extrasensory, normalize_label, CleanedRecord, CleaningConfig, CleaningOutcome, CleaningReport,
    DropReason, ExtraSensoryRecord, EXTRASENSORY_TARGETS,
};
pub use io::{load_dataset, write_dataset, Dataset, DatasetManifest, DATASET_FORMAT, DATASET_VERSION};
pub use synthetic::{
    audit_consistency, chance_consistency, enumerate_states, generate_synthetic, ConsistencyAudit, SyntheticConfig,
    SyntheticDataset,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{aggregate_context, DiscretizationConfig, RawContextRecord};
use crate::knowledge::{ActivityVocabulary, ContextState, ContextVocabulary, PredicateId};
use crate::nn::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("unknown activity `{0}`")]
    UnknownActivity(String),
    #[error("annotation for {user} has t_s {t_s} >= t_e {t_e}")]
    InvalidAnnotation { user: String, t_s: f64, t_e: f64 },
    #[error("stream {stream}: {message}")]
    InvalidStream { stream: String, message: String },
    #[error("context vector of width {got} does not match vocabulary of {expected}")]
    ContextWidth { expected: usize, got: usize },
    #[error("context state is invalid for the vocabulary: {0}")]
    InvalidState(String),
    #[error("no state satisfies the rules of activity `{0}`")]
    UnsatisfiableRule(String),
    #[error("synthetic state space has {0} states, above the limit")]
    StateSpaceTooLarge(u128),
    #[error("invalid generator setting: {0}")]
    InvalidGenerator(String),
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("invalid dataset: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub user: String,
    pub activity: String,
    pub t_s: f64,
    pub t_e: f64,
}

/// Regularly sampled multichannel signal. Timestamps must increase; gaps
/// are allowed and leave the affected windows out.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub rate: f64,
    pub channels: Vec<String>,
    pub timestamps: Vec<f64>,
    /// One vector per channel, each as long as `timestamps`.
    pub values: Vec<Vec<f64>>,
}

impl Stream {
    pub fn validate(&self, name: &str) -> Result<(), DataError> {
        let fail = |message: String| DataError::InvalidStream {
            stream: name.into(),
            message,
        };
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(fail(format!("sampling rate {} must be positive", self.rate)));
        }
        if self.channels.is_empty() || self.channels.len() != self.values.len() {
            return Err(fail(format!(
                "{} channel names for {} value columns",
                self.channels.len(),
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| v.len() != self.timestamps.len()) {
            return Err(fail("every channel needs one value per timestamp".into()));
        }
        if self.timestamps.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(fail("timestamps must strictly increase".into()));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(fail("non-finite sample".into()));
        }
        Ok(())
    }

    /// Time just after the last sample.
    fn end(&self) -> f64 {
        self.timestamps.last().map_or(f64::NEG_INFINITY, |t| t + 1.0 / self.rate)
    }

    /// Channel-major slice of the `n` samples in `[t0, t0 + z)`, or `None`
    /// when the stream does not cover the interval without gaps.
    fn window(&self, t0: f64, z: f64, n: usize) -> Option<Tensor> {
        let eps = 0.25 / self.rate;
        let lo = self.timestamps.partition_point(|&t| t < t0 - eps);
        let hi = self.timestamps.partition_point(|&t| t < t0 + z - eps);
        if hi - lo != n {
            return None;
        }
        let step = 1.0 / self.rate;
        let spans_evenly = self.timestamps[lo..hi].windows(2).all(|w| (w[1] - w[0] - step).abs() < eps);
        if !spans_evenly {
            return None;
        }
        let data = self.values.iter().flat_map(|ch| ch[lo..hi].iter().copied()).collect();
        Some(Tensor::new(vec![self.channels.len(), n], data).expect("window shape"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserDataset {
    pub user: String,
    pub phone: Stream,
    pub watch: Stream,
    pub context: Vec<RawContextRecord>,
    pub annotations: Vec<Annotation>,
}

/// How recordings become windows. Stored in dataset manifests and
/// checkpoints so that classification windows match training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLayout {
    pub window_seconds: f64,
    pub phone_rate: f64,
    pub watch_rate: f64,
    pub phone_channels: Vec<String>,
    pub watch_channels: Vec<String>,
    #[serde(default)]
    pub discretization: DiscretizationConfig,
}

impl InputLayout {
    pub fn phone_samples(&self) -> usize {
        (self.window_seconds * self.phone_rate).round() as usize
    }

    pub fn watch_samples(&self) -> usize {
        (self.window_seconds * self.watch_rate).round() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| DataError::Format(m);
        if !(self.window_seconds > 0.0 && self.window_seconds.is_finite()) {
            return Err(fail(format!("window length {} s must be positive", self.window_seconds)));
        }
        for (name, rate) in [("phone", self.phone_rate), ("watch", self.watch_rate)] {
            let n = self.window_seconds * rate;
            if !(rate > 0.0) || (n - n.round()).abs() > 1e-6 || n.round() < 1.0 {
                return Err(fail(format!(
                    "{name}: {} s at {rate} Hz is not a whole number of samples",
                    self.window_seconds
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// `user/index` with the index on the user's window grid.
    pub id: String,
    pub user: String,
    pub t_s: f64,
    pub t_e: f64,
    pub phone: Tensor,
    pub watch: Tensor,
    pub state: ContextState,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub windows: Vec<Window>,
    pub warnings: Vec<String>,
}

/// Cuts one user's recording into labeled windows.
///
/// The grid starts where both inertial streams have begun and ends where
/// either stops. Windows a stream does not cover contiguously are dropped
/// with a warning; windows without annotation overlap are dropped unless
/// `keep_unlabeled` is set.
pub fn segment(
    ds: &UserDataset,
    layout: &InputLayout,
    activities: &ActivityVocabulary,
    contexts: &ContextVocabulary,
    keep_unlabeled: bool,
) -> Result<Segmentation, DataError> {
    layout.validate()?;
    ds.phone.validate(&format!("{}/phone", ds.user))?;
    ds.watch.validate(&format!("{}/watch", ds.user))?;
    if (ds.phone.rate - layout.phone_rate).abs() > 1e-9 || (ds.watch.rate - layout.watch_rate).abs() > 1e-9 {
        return Err(DataError::InvalidStream {
            stream: ds.user.clone(),
            message: "sampling rate differs from the dataset layout".into(),
        });
    }
    let mut labels = Vec::with_capacity(ds.annotations.len());
    for a in &ds.annotations {
        if !(a.t_s < a.t_e) {
            return Err(DataError::InvalidAnnotation {
                user: a.user.clone(),
                t_s: a.t_s,
                t_e: a.t_e,
            });
        }
        labels.push(activities.id(&a.activity).ok_or_else(|| DataError::UnknownActivity(a.activity.clone()))?);
    }

    let z = layout.window_seconds;
    let (np, nw) = (layout.phone_samples(), layout.watch_samples());
    let mut out = Segmentation {
        windows: Vec::new(),
        warnings: Vec::new(),
    };
    let (Some(&p0), Some(&w0)) = (ds.phone.timestamps.first(), ds.watch.timestamps.first()) else {
        return Ok(out);
    };
    let start = p0.max(w0);
    let end = ds.phone.end().min(ds.watch.end());
    let count = ((end - start) / z + 1e-9).floor().max(0.0) as usize;

    for i in 0..count {
        let t_s = start + i as f64 * z;
        let t_e = t_s + z;
        let id = format!("{}/{i:05}", ds.user);
        let (Some(phone), Some(watch)) = (ds.phone.window(t_s, z, np), ds.watch.window(t_s, z, nw)) else {
            let w = format!("window {id} [{t_s}, {t_e}) is not fully covered by both streams; dropped");
            log::warn!("{w}");
            out.warnings.push(w);
            continue;
        };
        let mut best: Option<(f64, f64, usize)> = None;
        for (a, &label) in ds.annotations.iter().zip(&labels) {
            let overlap = t_e.min(a.t_e) - t_s.max(a.t_s);
            if overlap <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((o, start, _)) => overlap > o + 1e-12 || ((overlap - o).abs() <= 1e-12 && a.t_s < start),
            };
            if better {
                best = Some((overlap, a.t_s, label));
            }
        }
        let label = best.map(|(_, _, l)| l);
        if label.is_none() && !keep_unlabeled {
            continue;
        }
        let records: Vec<RawContextRecord> = ds
            .context
            .iter()
            .filter(|r| r.timestamp >= t_s && r.timestamp < t_e)
            .cloned()
            .collect();
        let agg = aggregate_context(&records, &layout.discretization, contexts);
        out.warnings
            .extend(agg.warnings.into_iter().map(|w| format!("window {id}: {w}")));
        out.windows.push(Window {
            id,
            user: ds.user.clone(),
            t_s,
            t_e,
            phone,
            watch,
            state: agg.state,
            label,
        });
    }
    Ok(out)
}

/// Network-ready form of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub user: String,
    pub phone: Tensor,
    pub watch: Tensor,
    /// Multi-hot over the flattened context vocabulary.
    pub context: Vec<f64>,
    pub state: ContextState,
    pub label: Option<usize>,
}

/// Multi-hot vector with a 1 at each observed predicate.
pub fn encode_context(state: &ContextState, vocab: &ContextVocabulary) -> Result<Vec<f64>, DataError> {
    state.validate(vocab).map_err(|e| DataError::InvalidState(e.to_string()))?;
    let mut v = vec![0.0; vocab.len()];
    for id in state.iter() {
        v[id.0] = 1.0;
    }
    Ok(v)
}

/// Inverse of [`encode_context`].
pub fn decode_context(vector: &[f64], vocab: &ContextVocabulary) -> Result<ContextState, DataError> {
    if vector.len() != vocab.len() {
        return Err(DataError::ContextWidth {
            expected: vocab.len(),
            got: vector.len(),
        });
    }
    let mut state = ContextState::new();
    for (i, &x) in vector.iter().enumerate() {
        match x {
            1.0 => {
                state.insert(PredicateId(i));
            }
            0.0 => {}
            other => return Err(DataError::InvalidState(format!("entry {i} is {other}, expected 0 or 1"))),
        }
    }
    state.validate(vocab).map_err(|e| DataError::InvalidState(e.to_string()))?;
    Ok(state)
}

pub fn encode(w: &Window, vocab: &ContextVocabulary) -> Result<EncodedSample, DataError> {
    Ok(EncodedSample {
        id: w.id.clone(),
        user: w.user.clone(),
        phone: w.phone.clone(),
        watch: w.watch.clone(),
        context: encode_context(&w.state, vocab)?,
        state: w.state.clone(),
        label: w.label,
    })
}

/// Segments and encodes every user, concatenating the warnings.
pub fn encode_users(
    users: &[UserDataset],
    layout: &InputLayout,
    activities: &ActivityVocabulary,
    contexts: &ContextVocabulary,
    keep_unlabeled: bool,
) -> Result<(Vec<EncodedSample>, Vec<String>), DataError> {
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for u in users {
        let seg = segment(u, layout, activities, contexts, keep_unlabeled)?;
        warnings.extend(seg.warnings);
        for w in &seg.windows {
            samples.push(encode(w, contexts)?);
        }
    }
    Ok((samples, warnings))
}

/// Per-class stratified subsample: each class keeps `ceil(fraction * n)`
/// windows, at least one. Returns indices in their original order.
pub fn downsample_indices(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    if fraction == 1.0 {
        return Ok((0..labels.len()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut keep = Vec::new();
    for class in 0..k {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n = ((fraction * members.len() as f64).ceil() as usize).clamp(1, members.len());
        keep.extend_from_slice(&members[..n]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// [`downsample_indices`] over labeled samples.
pub fn downsample_training(samples: &[EncodedSample], fraction: f64, seed: u64) -> Result<Vec<EncodedSample>, DataError> {
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| DataError::Format(format!("sample {} has no label", s.id))))
        .collect::<Result<_, _>>()?;
    Ok(downsample_indices(&labels, fraction, seed)?
        .into_iter()
        .map(|i| samples[i].clone())
        .collect())
}

/// Random per-window split; the validation part gets `round(fraction * n)`
/// samples, at least one when `n >= 2`.
pub fn split_validation(
    samples: Vec<EncodedSample>,
    fraction: f64,
    seed: u64,
) -> (Vec<EncodedSample>, Vec<EncodedSample>) {
    let n = samples.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if n >= 2 {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut is_val = vec![false; n];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in samples.into_iter().zip(is_val) {
        if v {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}
