//! Cross-entropy, the five semantic losses and their combination.
//!
//! Every loss returns its value together with the gradient with respect to
//! the probability vector. The semantic losses that look at the most likely
//! activity treat the argmax selection as locally constant, so their
//! gradients are the piecewise derivatives of the selected branch.
//! Argmax ties go to the lowest index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::ActivitySet;

/// Added to the labelled probability inside the logarithm.
pub const CROSS_ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {k} activities")]
    InvalidLabel { label: usize, k: usize },
    #[error("alpha must be finite and non-negative, got {0}")]
    InvalidAlpha(f64),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("activity set covers {got} activities, distribution has {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("unknown semantic loss `{0}` (expected none, All, -PP, 01, -P1 or 0P)")]
    UnknownSemantic(String),
}

/// Per-activity probabilities emitted by the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityDistribution(Vec<f64>);

impl ProbabilityDistribution {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self, LossError> {
        if probs.is_empty() {
            return Err(LossError::InvalidDistribution("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(LossError::InvalidDistribution(format!("entry {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(LossError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(ProbabilityDistribution(probs))
    }

    /// Wraps a vector already known to be a distribution (softmax output).
    pub(crate) fn from_softmax(probs: Vec<f64>) -> Self {
        ProbabilityDistribution(probs)
    }

    pub fn uniform(k: usize) -> Self {
        ProbabilityDistribution(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most likely activity (lowest index on ties) and its probability.
    pub fn argmax(&self) -> (usize, f64) {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// The five semantic loss variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SemanticLoss {
    /// `1 - sum of consistent probabilities`.
    All,
    /// `1 - p^` when the top activity is consistent, `p^` otherwise.
    MinusProbProb,
    /// `0` when the top activity is consistent, `1` otherwise.
    ZeroOne,
    /// `1 - p^` when the top activity is consistent, `1` otherwise.
    MinusProbOne,
    /// `0` when the top activity is consistent, `p^` otherwise.
    ZeroProb,
}

impl SemanticLoss {
    pub const ALL: [SemanticLoss; 5] = [
        SemanticLoss::All,
        SemanticLoss::MinusProbProb,
        SemanticLoss::ZeroOne,
        SemanticLoss::MinusProbOne,
        SemanticLoss::ZeroProb,
    ];

    pub fn code(self) -> &'static str {
        match self {
            SemanticLoss::All => "All",
            SemanticLoss::MinusProbProb => "-PP",
            SemanticLoss::ZeroOne => "01",
            SemanticLoss::MinusProbOne => "-P1",
            SemanticLoss::ZeroProb => "0P",
        }
    }

    pub fn evaluate(self, p: &ProbabilityDistribution, consistent: &ActivitySet) -> LossValue {
        match self {
            SemanticLoss::All => semantic_all(p, consistent),
            SemanticLoss::MinusProbProb => semantic_minusprob_prob(p, consistent),
            SemanticLoss::ZeroOne => semantic_zero_one(p, consistent),
            SemanticLoss::MinusProbOne => semantic_minusprob_one(p, consistent),
            SemanticLoss::ZeroProb => semantic_zero_prob(p, consistent),
        }
    }
}

impl fmt::Display for SemanticLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for SemanticLoss {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SemanticLoss::ALL
            .into_iter()
            .find(|l| l.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| LossError::UnknownSemantic(s.to_string()))
    }
}

/// A loss value and its gradient with respect to the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl LossValue {
    fn zero_grad(value: f64, k: usize) -> Self {
        LossValue {
            value,
            gradient: vec![0.0; k],
        }
    }
}

pub fn cross_entropy(p: &ProbabilityDistribution, label: usize) -> Result<LossValue, LossError> {
    let k = p.len();
    if label >= k {
        return Err(LossError::InvalidLabel { label, k });
    }
    let shifted = p.probs()[label] + CROSS_ENTROPY_FLOOR;
    let mut out = LossValue::zero_grad(-shifted.ln(), k);
    out.gradient[label] = -1.0 / shifted;
    Ok(out)
}

pub fn semantic_all(p: &ProbabilityDistribution, consistent: &ActivitySet) -> LossValue {
    let mut out = LossValue::zero_grad(1.0, p.len());
    for (i, &pi) in p.probs().iter().enumerate() {
        if consistent.contains(i) {
            out.value -= pi;
            out.gradient[i] = -1.0;
        }
    }
    out
}

pub fn semantic_minusprob_prob(p: &ProbabilityDistribution, consistent: &ActivitySet) -> LossValue {
    let (top, p_top) = p.argmax();
    let mut out = LossValue::zero_grad(0.0, p.len());
    if consistent.contains(top) {
        out.value = 1.0 - p_top;
        out.gradient[top] = -1.0;
    } else {
        out.value = p_top;
        out.gradient[top] = 1.0;
    }
    out
}

pub fn semantic_zero_one(p: &ProbabilityDistribution, consistent: &ActivitySet) -> LossValue {
    let (top, _) = p.argmax();
    let value = if consistent.contains(top) { 0.0 } else { 1.0 };
    LossValue::zero_grad(value, p.len())
}

pub fn semantic_minusprob_one(p: &ProbabilityDistribution, consistent: &ActivitySet) -> LossValue {
    let (top, p_top) = p.argmax();
    let mut out = LossValue::zero_grad(1.0, p.len());
    if consistent.contains(top) {
        out.value = 1.0 - p_top;
        out.gradient[top] = -1.0;
    }
    out
}

pub fn semantic_zero_prob(p: &ProbabilityDistribution, consistent: &ActivitySet) -> LossValue {
    let (top, p_top) = p.argmax();
    let mut out = LossValue::zero_grad(0.0, p.len());
    if !consistent.contains(top) {
        out.value = p_top;
        out.gradient[top] = 1.0;
    }
    out
}

/// Training loss selection: cross-entropy plus `alpha` times a semantic term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(rename = "semantic_type", with = "semantic_serde", default)]
    pub semantic: Option<SemanticLoss>,
    #[serde(default)]
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::cross_entropy_only()
    }
}

impl LossConfig {
    pub fn cross_entropy_only() -> Self {
        LossConfig {
            semantic: None,
            alpha: 0.0,
        }
    }

    pub fn semantic(kind: SemanticLoss, alpha: f64) -> Self {
        LossConfig {
            semantic: Some(kind),
            alpha,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.semantic.is_some() && !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(LossError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

mod semantic_serde {
    use super::SemanticLoss;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<SemanticLoss>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(v.map_or("none", SemanticLoss::code))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SemanticLoss>, D::Error> {
        let s = String::deserialize(d)?;
        if s.eq_ignore_ascii_case("none") {
            return Ok(None);
        }
        s.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

pub fn combined_loss(
    p: &ProbabilityDistribution,
    label: usize,
    consistent: &ActivitySet,
    cfg: &LossConfig,
) -> Result<LossValue, LossError> {
    cfg.validate()?;
    let mut out = cross_entropy(p, label)?;
    if let Some(kind) = cfg.semantic {
        if consistent.universe() != p.len() {
            return Err(LossError::SizeMismatch {
                expected: p.len(),
                got: consistent.universe(),
            });
        }
        let sem = kind.evaluate(p, consistent);
        out.value += cfg.alpha * sem.value;
        for (g, s) in out.gradient.iter_mut().zip(&sem.gradient) {
            *g += cfg.alpha * s;
        }
    }
    Ok(out)
}

/// How per-sample losses are combined over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    /// Factor applied to each per-sample loss and gradient.
    pub fn weight(self, batch: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / batch.max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }

    pub fn reduce(self, values: &[f64]) -> f64 {
        let w = self.weight(values.len());
        values.iter().sum::<f64>() * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> ProbabilityDistribution {
        ProbabilityDistribution::new(v.to_vec()).unwrap()
    }

    fn set(k: usize, idx: &[usize]) -> ActivitySet {
        ActivitySet::from_indices(k, idx.iter().copied())
    }

    #[test]
    fn cross_entropy_values() {
        let one_hot = dist(&[0.0, 1.0, 0.0]);
        assert!(cross_entropy(&one_hot, 1).unwrap().value.abs() < 1e-11);
        let u = ProbabilityDistribution::uniform(4);
        assert!((cross_entropy(&u, 2).unwrap().value - 4f64.ln()).abs() < 1e-11);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
        assert_eq!(
            cross_entropy(&u, 4),
            Err(LossError::InvalidLabel { label: 4, k: 4 })
        );
        let g = cross_entropy(&u, 2).unwrap().gradient;
        assert_eq!(g[0], 0.0);
        assert!((g[2] + 1.0 / (0.25 + CROSS_ENTROPY_FLOOR)).abs() < 1e-12);
    }

    #[test]
    fn all_examples() {
        let p = dist(&[0.4, 0.3, 0.3]);
        assert!(semantic_all(&p, &ActivitySet::full(3)).value.abs() < 1e-15);
        assert_eq!(semantic_all(&p, &ActivitySet::empty(3)).value, 1.0);
        let v = semantic_all(&p, &set(3, &[0, 1]));
        assert!((v.value - 0.3).abs() < 1e-12);
        assert_eq!(v.gradient, vec![-1.0, -1.0, 0.0]);
    }

    #[test]
    fn argmax_based_examples() {
        let inconsistent = set(3, &[1, 2]);
        let consistent = set(3, &[0]);
        let p = dist(&[0.6, 0.3, 0.1]);
        assert!((semantic_minusprob_prob(&p, &inconsistent).value - 0.6).abs() < 1e-12);
        assert!((semantic_minusprob_prob(&p, &consistent).value - 0.4).abs() < 1e-12);
        assert_eq!(semantic_minusprob_prob(&dist(&[1.0, 0.0, 0.0]), &consistent).value, 0.0);

        assert_eq!(semantic_zero_one(&p, &consistent).value, 0.0);
        assert_eq!(semantic_zero_one(&p, &inconsistent).value, 1.0);
        assert_eq!(semantic_zero_one(&p, &inconsistent).gradient, vec![0.0; 3]);

        assert_eq!(semantic_minusprob_one(&dist(&[1.0, 0.0, 0.0]), &consistent).value, 0.0);
        assert_eq!(semantic_minusprob_one(&p, &inconsistent).value, 1.0);
        assert_eq!(semantic_minusprob_one(&p, &inconsistent).gradient, vec![0.0; 3]);
        let p55 = dist(&[0.55, 0.25, 0.2]);
        assert!((semantic_minusprob_one(&p55, &consistent).value - 0.45).abs() < 1e-12);
        assert_eq!(semantic_minusprob_one(&p55, &consistent).gradient, vec![-1.0, 0.0, 0.0]);

        assert_eq!(semantic_zero_prob(&p, &consistent).value, 0.0);
        let p9 = dist(&[0.9, 0.05, 0.05]);
        let zp = semantic_zero_prob(&p9, &inconsistent);
        assert!((zp.value - 0.9).abs() < 1e-12);
        assert_eq!(zp.gradient, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let p = dist(&[0.4, 0.4, 0.2]);
        assert_eq!(p.argmax().0, 0);
        // a_1 inconsistent, a_2 consistent: the tie resolves to a_1
        assert_eq!(semantic_zero_one(&p, &set(3, &[1])).value, 1.0);
    }

    #[test]
    fn combined_examples() {
        let p = dist(&[0.4, 0.3, 0.3]);
        let a = set(3, &[0, 1]);
        let all2 = combined_loss(&p, 0, &a, &LossConfig::semantic(SemanticLoss::All, 2.0)).unwrap();
        assert!((all2.value - (-(0.4f64 + CROSS_ENTROPY_FLOOR).ln() + 0.6)).abs() < 1e-12);
        assert!((all2.value - 1.5163).abs() < 1e-4);
        let zero = combined_loss(&p, 0, &a, &LossConfig::semantic(SemanticLoss::MinusProbOne, 0.0)).unwrap();
        assert_eq!(zero, cross_entropy(&p, 0).unwrap());
        let none = combined_loss(&p, 0, &a, &LossConfig::cross_entropy_only()).unwrap();
        assert_eq!(none, cross_entropy(&p, 0).unwrap());
        assert!(matches!(
            combined_loss(&p, 0, &a, &LossConfig::semantic(SemanticLoss::All, -1.0)),
            Err(LossError::InvalidAlpha(_))
        ));
        assert!(matches!(
            combined_loss(&p, 0, &ActivitySet::full(4), &LossConfig::semantic(SemanticLoss::All, 1.0)),
            Err(LossError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn config_serde_codes() {
        let cfg: LossConfig = toml::from_str("semantic_type = \"-P1\"\nalpha = 7.0").unwrap();
        assert_eq!(cfg, LossConfig::semantic(SemanticLoss::MinusProbOne, 7.0));
        let none: LossConfig = toml::from_str("semantic_type = \"none\"").unwrap();
        assert_eq!(none.semantic, None);
        assert!(toml::from_str::<LossConfig>("semantic_type = \"P2\"").is_err());
        for l in SemanticLoss::ALL {
            assert_eq!(l.code().parse::<SemanticLoss>().unwrap(), l);
        }
    }

    #[test]
    fn distribution_validation() {
        assert!(ProbabilityDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityDistribution::new(vec![]).is_err());
        assert!(ProbabilityDistribution::new(vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn reduction() {
        assert_eq!(Reduction::Mean.reduce(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(Reduction::Sum.reduce(&[1.0, 2.0, 3.0]), 6.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist_and_set() -> impl Strategy<Value = (ProbabilityDistribution, ActivitySet)> {
            (2usize..8).prop_flat_map(|k| {
                (
                    proptest::collection::vec(0.001f64..1.0, k),
                    proptest::collection::vec(any::<bool>(), k),
                )
                    .prop_map(|(raw, mask)| {
                        let s: f64 = raw.iter().sum();
                        (
                            ProbabilityDistribution::new(raw.iter().map(|r| r / s).collect()).unwrap(),
                            ActivitySet::from_mask(mask),
                        )
                    })
            })
        }

        proptest! {
            #[test]
            fn semantic_values_in_unit_interval((p, a) in dist_and_set()) {
                for l in SemanticLoss::ALL {
                    let v = l.evaluate(&p, &a).value;
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{l}: {v}");
                }
                let z = semantic_zero_one(&p, &a).value;
                prop_assert!(z == 0.0 || z == 1.0);
            }

            #[test]
            fn combined_strictly_increasing_in_alpha((p, a) in dist_and_set(), lo in 0.0f64..10.0, gap in 0.01f64..10.0) {
                let label = p.argmax().0;
                for l in SemanticLoss::ALL {
                    if l.evaluate(&p, &a).value <= 1e-9 { continue; }
                    let v1 = combined_loss(&p, label, &a, &LossConfig::semantic(l, lo)).unwrap().value;
                    let v2 = combined_loss(&p, label, &a, &LossConfig::semantic(l, lo + gap)).unwrap().value;
                    prop_assert!(v2 > v1);
                }
            }
        }
    }
}
