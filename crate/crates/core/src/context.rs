//! Context aggregation: raw per-window context signals to a [`ContextState`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::knowledge::{ContextPredicate, ContextState, ContextVocabulary, PredicateId};
use crate::Error;

/// One raw context observation. Absent signals are `None`, never sentinels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawContextRecord {
    pub timestamp: f64,
    /// Ground speed in m/s.
    pub speed: Option<f64>,
    /// Barometric pressure change over the window, hPa.
    pub pressure_delta: Option<f64>,
    pub semantic_place: Option<String>,
    pub transport_route_nearby: Option<bool>,
    pub weather: Option<String>,
    /// Named device/environment scalars (audio level, light level, ...).
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
    /// Provider strings that map one-to-one onto a dimension's values.
    #[serde(default)]
    pub categorical: BTreeMap<String, String>,
}

/// Threshold binning of a scalar signal into one exclusive dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarBins {
    pub dimension: String,
    /// Strictly increasing bin boundaries; a value `x` falls in bin `i` when
    /// `thresholds[i-1] <= x < thresholds[i]`.
    pub thresholds: Vec<f64>,
    /// One label per bin, `thresholds.len() + 1` of them.
    pub values: Vec<String>,
}

impl ScalarBins {
    pub fn bin(&self, x: f64) -> &str {
        let i = self.thresholds.iter().take_while(|&&t| x >= t).count();
        &self.values[i]
    }

    fn validate(&self, what: &str) -> Result<(), Error> {
        if self.values.len() != self.thresholds.len() + 1 {
            return Err(Error::Config(format!(
                "{what}: {} thresholds need {} values, got {}",
                self.thresholds.len(),
                self.thresholds.len() + 1,
                self.values.len()
            )));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) || self.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config(format!("{what}: thresholds must be finite and strictly increasing")));
        }
        Ok(())
    }
}

/// Signed height variation from the window's pressure change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightConfig {
    pub dimension: String,
    /// |delta| below this is no height variation, hPa.
    pub epsilon: f64,
    /// Labels for ascending (pressure falls), level, descending (pressure rises).
    pub ascending: String,
    pub level: String,
    pub descending: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub speed: ScalarBins,
    pub height: HeightConfig,
    /// Boolean dimension fed by `transport_route_nearby`, values `true`/`false`.
    pub transport_dimension: String,
    /// Provider place string to predicates (e.g. `public park` to
    /// `semantic_place=park` and `location_type=outdoor`).
    pub place_mapping: BTreeMap<String, Vec<ContextPredicate>>,
    pub weather_mapping: BTreeMap<String, Vec<ContextPredicate>>,
    /// Binnings for named scalars in [`RawContextRecord::scalars`].
    pub scalar_bins: BTreeMap<String, ScalarBins>,
    /// Categorical field name to the dimension it feeds verbatim.
    pub categorical_fields: BTreeMap<String, String>,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        let place = |pairs: &[(&str, &str, &str)]| {
            pairs
                .iter()
                .map(|(provider, place, location)| {
                    (
                        provider.to_string(),
                        vec![
                            ContextPredicate::new("semantic_place", *place),
                            ContextPredicate::new("location_type", *location),
                        ],
                    )
                })
                .collect::<BTreeMap<_, _>>()
        };
        let weather = ["sunny", "cloudy", "rainy", "foggy"]
            .iter()
            .map(|w| (w.to_string(), vec![ContextPredicate::new("weather", *w)]))
            .collect();
        DiscretizationConfig {
            speed: ScalarBins {
                dimension: "speed".into(),
                thresholds: vec![0.1, 2.0, 7.0],
                values: ["null", "low", "medium", "high"].map(String::from).to_vec(),
            },
            height: HeightConfig {
                dimension: "height_variation".into(),
                epsilon: 0.05,
                ascending: "positive".into(),
                level: "null".into(),
                descending: "negative".into(),
            },
            transport_dimension: "transport_route".into(),
            place_mapping: place(&[
                ("home", "home", "indoor"),
                ("office", "office", "indoor"),
                ("gym", "gym", "indoor"),
                ("bar", "bar", "indoor"),
                ("restaurant", "restaurant", "indoor"),
                ("shop", "shop", "indoor"),
                ("university", "university", "indoor"),
                ("public park", "park", "outdoor"),
                ("park", "park", "outdoor"),
                ("street", "street", "outdoor"),
                ("bus station", "station", "outdoor"),
            ]),
            weather_mapping: weather,
            scalar_bins: BTreeMap::new(),
            categorical_fields: BTreeMap::new(),
        }
    }
}

impl DiscretizationConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.speed.validate("speed")?;
        for (name, bins) in &self.scalar_bins {
            bins.validate(name)?;
        }
        if !(self.height.epsilon > 0.0 && self.height.epsilon.is_finite()) {
            return Err(Error::Config("height epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Result of [`aggregate_context`].
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedContext {
    pub state: ContextState,
    pub warnings: Vec<String>,
}

/// Derives the window's context state from its raw records.
///
/// Numeric signals use the window mean, categorical ones the most frequent
/// provider string (ties to the lexicographically smallest), booleans a
/// majority vote (ties to `true`). Every statistic is order-free. Unmapped
/// provider strings and predicates missing from `vocab` leave the dimension
/// unobserved and add a warning.
pub fn aggregate_context(
    records: &[RawContextRecord],
    cfg: &DiscretizationConfig,
    vocab: &ContextVocabulary,
) -> AggregatedContext {
    let mut agg = Aggregator {
        vocab,
        state: ContextState::new(),
        warnings: Vec::new(),
    };

    if let Some(mean) = mean(records.iter().filter_map(|r| r.speed)) {
        agg.add(&cfg.speed.dimension, cfg.speed.bin(mean));
    }
    if let Some(delta) = mean(records.iter().filter_map(|r| r.pressure_delta)) {
        let h = &cfg.height;
        let value = if delta < -h.epsilon {
            &h.ascending
        } else if delta > h.epsilon {
            &h.descending
        } else {
            &h.level
        };
        agg.add(&h.dimension, value);
    }
    let votes: Vec<bool> = records.iter().filter_map(|r| r.transport_route_nearby).collect();
    if !votes.is_empty() {
        let yes = votes.iter().filter(|&&v| v).count();
        let value = if 2 * yes >= votes.len() { "true" } else { "false" };
        agg.add(&cfg.transport_dimension, value);
    }
    if let Some(place) = mode(records.iter().filter_map(|r| r.semantic_place.as_deref())) {
        agg.add_mapped("semantic place", place, cfg.place_mapping.get(place));
    }
    if let Some(weather) = mode(records.iter().filter_map(|r| r.weather.as_deref())) {
        agg.add_mapped("weather", weather, cfg.weather_mapping.get(weather));
    }
    for (name, bins) in &cfg.scalar_bins {
        if let Some(m) = mean(records.iter().filter_map(|r| r.scalars.get(name).copied())) {
            agg.add(&bins.dimension, bins.bin(m));
        }
    }
    for (field, dimension) in &cfg.categorical_fields {
        if let Some(value) = mode(records.iter().filter_map(|r| r.categorical.get(field).map(String::as_str))) {
            agg.add(dimension, value);
        }
    }
    for w in &agg.warnings {
        log::warn!("{w}");
    }
    AggregatedContext {
        state: agg.state,
        warnings: agg.warnings,
    }
}

struct Aggregator<'a> {
    vocab: &'a ContextVocabulary,
    state: ContextState,
    warnings: Vec<String>,
}

impl Aggregator<'_> {
    fn add(&mut self, dimension: &str, value: &str) {
        let Some((d, dim)) = self.vocab.dimension(dimension) else {
            // dimension not modelled by this vocabulary
            return;
        };
        let Some(id) = self.vocab.lookup(dimension, value) else {
            self.warnings
                .push(format!("value `{value}` is not declared for dimension `{dimension}`; left unobserved"));
            return;
        };
        if dim.exclusive {
            let existing: Vec<PredicateId> = self.vocab.predicates_of(d).filter(|&p| self.state.contains(p)).collect();
            if let Some(&prev) = existing.first() {
                if prev != id {
                    self.warnings.push(format!(
                        "conflicting evidence for `{dimension}`: kept {}, ignored {value}",
                        self.vocab.predicate(prev).value
                    ));
                }
                return;
            }
        }
        self.state.insert(id);
    }

    fn add_mapped(&mut self, what: &str, provider: &str, mapping: Option<&Vec<ContextPredicate>>) {
        match mapping {
            Some(preds) => {
                for p in preds {
                    self.add(&p.dimension, &p.value);
                }
            }
            None => self
                .warnings
                .push(format!("unmapped {what} `{provider}`; dimension left unobserved")),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn mode<'a>(values: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    // BTreeMap iterates in key order, so the first maximum is the smallest key
    counts
        .into_iter()
        .fold(None, |best: Option<(&str, usize)>, (k, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((k, n)),
        })
        .map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{ContextVocabulary, Dimension};

    fn vocab() -> ContextVocabulary {
        let dim = |name: &str, exclusive, values: &[&str]| Dimension {
            name: name.into(),
            exclusive,
            values: values.iter().map(|s| s.to_string()).collect(),
        };
        ContextVocabulary::new(vec![
            dim("location_type", true, &["indoor", "outdoor"]),
            dim("semantic_place", true, &["home", "office", "park", "street"]),
            dim("speed", true, &["null", "low", "medium", "high"]),
            dim("transport_route", true, &["true", "false"]),
            dim("height_variation", true, &["negative", "null", "positive"]),
            dim("weather", true, &["sunny", "rainy"]),
        ])
        .unwrap()
    }

    fn rec(t: f64) -> RawContextRecord {
        RawContextRecord {
            timestamp: t,
            ..Default::default()
        }
    }

    fn names(state: &ContextState, v: &ContextVocabulary) -> Vec<String> {
        state.describe(v).iter().map(|p| p.to_string()).collect()
    }

    #[test]
    fn zero_speed_is_null() {
        let v = vocab();
        let r = RawContextRecord { speed: Some(0.0), ..rec(0.0) };
        let out = aggregate_context(&[r], &DiscretizationConfig::default(), &v);
        assert_eq!(names(&out.state, &v), vec!["speed=null"]);
    }

    #[test]
    fn speed_uses_window_mean() {
        let v = vocab();
        let cfg = DiscretizationConfig::default();
        let records: Vec<_> = [1.0, 3.0, 5.0]
            .iter()
            .map(|&s| RawContextRecord { speed: Some(s), ..rec(0.0) })
            .collect();
        // mean 3.0 lies in [2.0, 7.0)
        assert_eq!(names(&aggregate_context(&records, &cfg, &v).state, &v), vec!["speed=medium"]);
        assert_eq!(cfg.speed.bin(0.1), "low");
        assert_eq!(cfg.speed.bin(7.0), "high");
    }

    #[test]
    fn zero_pressure_delta_is_level() {
        let v = vocab();
        let r = RawContextRecord { pressure_delta: Some(0.0), ..rec(0.0) };
        let out = aggregate_context(&[r], &DiscretizationConfig::default(), &v);
        assert_eq!(names(&out.state, &v), vec!["height_variation=null"]);
        let up = RawContextRecord { pressure_delta: Some(-0.2), ..rec(0.0) };
        let out = aggregate_context(&[up], &DiscretizationConfig::default(), &v);
        assert_eq!(names(&out.state, &v), vec!["height_variation=positive"]);
    }

    #[test]
    fn park_maps_to_outdoor() {
        let v = vocab();
        let r = RawContextRecord {
            semantic_place: Some("public park".into()),
            ..rec(0.0)
        };
        let out = aggregate_context(&[r], &DiscretizationConfig::default(), &v);
        let mut got = names(&out.state, &v);
        got.sort();
        assert_eq!(got, vec!["location_type=outdoor", "semantic_place=park"]);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn unmapped_string_warns_and_skips() {
        let v = vocab();
        let r = RawContextRecord {
            semantic_place: Some("volcano".into()),
            weather: Some("hail".into()),
            speed: Some(1.0),
            ..rec(0.0)
        };
        let out = aggregate_context(&[r], &DiscretizationConfig::default(), &v);
        assert_eq!(names(&out.state, &v), vec!["speed=low"]);
        assert_eq!(out.warnings.len(), 2);
    }

    #[test]
    fn transport_majority_ties_to_true() {
        let v = vocab();
        let cfg = DiscretizationConfig::default();
        let recs = vec![
            RawContextRecord { transport_route_nearby: Some(true), ..rec(0.0) },
            RawContextRecord { transport_route_nearby: Some(false), ..rec(1.0) },
        ];
        assert_eq!(names(&aggregate_context(&recs, &cfg, &v).state, &v), vec!["transport_route=true"]);
    }

    #[test]
    fn categorical_passthrough_and_scalar_bins() {
        let v = vocab();
        let mut cfg = DiscretizationConfig::default();
        cfg.categorical_fields.insert("loc".into(), "location_type".into());
        cfg.scalar_bins.insert(
            "lux".into(),
            ScalarBins {
                dimension: "weather".into(),
                thresholds: vec![100.0],
                values: vec!["rainy".into(), "sunny".into()],
            },
        );
        let mut r = rec(0.0);
        r.categorical.insert("loc".into(), "indoor".into());
        r.scalars.insert("lux".into(), 500.0);
        let mut got = names(&aggregate_context(&[r], &cfg, &v).state, &v);
        got.sort();
        assert_eq!(got, vec!["location_type=indoor", "weather=sunny"]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DiscretizationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.speed.thresholds = vec![0.1, 0.1, 7.0];
        assert!(cfg.validate().is_err());
        let mut cfg = DiscretizationConfig::default();
        cfg.height.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn conflicting_exclusive_evidence_keeps_first_source() {
        let v = vocab();
        let mut cfg = DiscretizationConfig::default();
        cfg.categorical_fields.insert("loc".into(), "location_type".into());
        let mut r = RawContextRecord {
            semantic_place: Some("home".into()),
            ..rec(0.0)
        };
        r.categorical.insert("loc".into(), "outdoor".into());
        let out = aggregate_context(&[r], &cfg, &v);
        out.state.validate(&v).unwrap();
        assert!(out.state.contains(v.lookup("location_type", "indoor").unwrap()));
        assert_eq!(out.warnings.len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn record() -> impl Strategy<Value = RawContextRecord> {
            (
                proptest::option::of(0.0f64..12.0),
                proptest::option::of(-0.3f64..0.3),
                proptest::option::of(prop_oneof![Just("home"), Just("public park"), Just("street"), Just("mars")]),
                proptest::option::of(any::<bool>()),
                proptest::option::of(prop_oneof![Just("sunny"), Just("rainy")]),
            )
                .prop_map(|(speed, dp, place, route, weather)| RawContextRecord {
                    timestamp: 0.0,
                    speed,
                    pressure_delta: dp,
                    semantic_place: place.map(String::from),
                    transport_route_nearby: route,
                    weather: weather.map(String::from),
                    ..Default::default()
                })
        }

        proptest! {
            #[test]
            fn respects_exclusivity_and_order(records in proptest::collection::vec(record(), 0..8), seed in any::<u64>()) {
                let v = vocab();
                let cfg = DiscretizationConfig::default();
                let a = aggregate_context(&records, &cfg, &v);
                prop_assert!(a.state.validate(&v).is_ok());
                let mut shuffled = records.clone();
                // deterministic rotation + reverse as a reordering
                let n = shuffled.len().max(1);
                shuffled.rotate_left((seed as usize) % n);
                shuffled.reverse();
                let b = aggregate_context(&shuffled, &cfg, &v);
                prop_assert_eq!(a.state, b.state);
            }

            #[test]
            fn removing_speed_removes_only_speed(records in proptest::collection::vec(record(), 1..8)) {
                let v = vocab();
                let cfg = DiscretizationConfig::default();
                let full = aggregate_context(&records, &cfg, &v).state;
                let stripped: Vec<_> = records.iter().cloned().map(|mut r| { r.speed = None; r }).collect();
                let less = aggregate_context(&stripped, &cfg, &v).state;
                let (d, _) = v.dimension("speed").unwrap();
                let expected = ContextState::from_ids(full.iter().filter(|&p| v.dimension_of(p) != d));
                prop_assert_eq!(less, expected);
            }
        }
    }
}
