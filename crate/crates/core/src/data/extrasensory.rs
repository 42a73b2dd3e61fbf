//! ExtraSensory label mapping and cleaning.
//!
//! Records keep their original multi-label sets. Mapping merges them into
//! seven target activities; cleaning drops records by explicit rules and
//! counts each drop. Surviving payloads are handed back untouched.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub const EXTRASENSORY_TARGETS: [&str; 7] = [
    "bicycling",
    "lying_down",
    "moving_by_car",
    "on_transport",
    "sitting",
    "standing",
    "walking",
];

const STATIC_TARGETS: [&str; 3] = ["lying_down", "sitting", "standing"];

/// One labeled ExtraSensory minute. `payload` carries whatever sensor data
/// the caller attached; cleaning never looks inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraSensoryRecord<P> {
    pub user: String,
    pub timestamp: f64,
    /// Original labels, any spelling (`label:FIX_walking`, `SITTING`, ...).
    pub labels: BTreeSet<String>,
    /// GPS speed in m/s, when available.
    pub speed: Option<f64>,
    pub has_phone_accelerometer: bool,
    pub has_phone_gyroscope: bool,
    pub has_watch_accelerometer: bool,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningConfig {
    /// Speeds above this contradict a static activity, m/s.
    pub static_speed_threshold: f64,
    /// Drop records that carry no phone-position label at all.
    pub require_phone_position: bool,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            static_speed_threshold: 0.0,
            require_phone_position: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Phone in a bag or on a table (only pocket and hand are kept).
    PhonePosition,
    MissingSensor,
    CarAtHome,
    SpeedWithStaticActivity,
    NoTarget,
    AmbiguousTarget,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
    pub per_target: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanedRecord<P> {
    pub target: &'static str,
    pub record: ExtraSensoryRecord<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleaningOutcome<P> {
    pub kept: Vec<CleanedRecord<P>>,
    pub report: CleaningReport,
}

/// Lowercases, strips the `label:` prefix and folds known aliases.
pub fn normalize_label(raw: &str) -> String {
    let s = raw.trim();
    let s = s.strip_prefix("label:").unwrap_or(s).to_ascii_lowercase();
    match s.as_str() {
        "fix_walking" => "walking".into(),
        "fix_running" => "running".into(),
        "fix_restaurant" => "at_restaurant".into(),
        "or_standing" => "standing".into(),
        "drive_-_i_m_the_driver" | "drive_-_im_the_driver" => "car_driver".into(),
        "drive_-_i_m_a_passenger" | "drive_-_im_a_passenger" => "car_passenger".into(),
        _ => s,
    }
}

/// Target activity of a normalized label set, or the reason there is none.
fn map_labels(labels: &BTreeSet<String>) -> Result<&'static str, DropReason> {
    let has = |l: &str| labels.contains(l);
    let mut targets = BTreeSet::new();
    let in_car = has("in_a_car") || has("car_driver") || has("car_passenger");
    let posture = has("sitting") || has("standing");
    if has("walking") || has("strolling") {
        targets.insert("walking");
    }
    if in_car {
        targets.insert("moving_by_car");
    } else if posture && has("on_a_bus") {
        targets.insert("on_transport");
    } else {
        if has("sitting") {
            targets.insert("sitting");
        }
        if has("standing") {
            targets.insert("standing");
        }
    }
    if has("bicycling") {
        targets.insert("bicycling");
    }
    if has("lying_down") {
        targets.insert("lying_down");
    }
    match targets.len() {
        0 => Err(DropReason::NoTarget),
        1 => Ok(targets.into_iter().next().expect("one target")),
        _ => Err(DropReason::AmbiguousTarget),
    }
}

/// Maps labels onto [`EXTRASENSORY_TARGETS`] and applies the cleaning rules
/// in a fixed order; a dropped record is counted under its first failing rule.
pub fn map_and_clean_extrasensory<P>(records: Vec<ExtraSensoryRecord<P>>, cfg: &CleaningConfig) -> CleaningOutcome<P> {
    let mut report = CleaningReport {
        input: records.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for record in records {
        let labels: BTreeSet<String> = record.labels.iter().map(|l| normalize_label(l)).collect();
        let has = |l: &str| labels.contains(l);
        let verdict = (|| {
            let good_position = has("phone_in_pocket") || has("phone_in_hand");
            let bad_position = has("phone_in_bag") || has("phone_on_table");
            if bad_position && !good_position || cfg.require_phone_position && !good_position {
                return Err(DropReason::PhonePosition);
            }
            if !(record.has_phone_accelerometer && record.has_phone_gyroscope && record.has_watch_accelerometer) {
                return Err(DropReason::MissingSensor);
            }
            if (has("in_a_car") || has("car_driver") || has("car_passenger")) && has("at_home") {
                return Err(DropReason::CarAtHome);
            }
            let target = map_labels(&labels)?;
            if STATIC_TARGETS.contains(&target) && record.speed.is_some_and(|v| v > cfg.static_speed_threshold) {
                return Err(DropReason::SpeedWithStaticActivity);
            }
            Ok(target)
        })();
        match verdict {
            Ok(target) => {
                *report.per_target.entry(target.to_string()).or_default() += 1;
                kept.push(CleanedRecord { target, record });
            }
            Err(reason) => *report.dropped.entry(reason).or_default() += 1,
        }
    }
    report.kept = kept.len();
    CleaningOutcome { kept, report }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(labels: &[&str]) -> ExtraSensoryRecord<Vec<f64>> {
        ExtraSensoryRecord {
            user: "u".into(),
            timestamp: 0.0,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            speed: None,
            has_phone_accelerometer: true,
            has_phone_gyroscope: true,
            has_watch_accelerometer: true,
            payload: vec![1.0, 2.0],
        }
    }

    fn target(labels: &[&str]) -> Option<&'static str> {
        let out = map_and_clean_extrasensory(vec![rec(labels)], &CleaningConfig::default());
        out.kept.first().map(|r| r.target)
    }

    #[test]
    fn published_mappings() {
        assert_eq!(target(&["label:SITTING", "label:ON_A_BUS"]), Some("on_transport"));
        assert_eq!(target(&["STANDING", "ON_A_BUS"]), Some("on_transport"));
        assert_eq!(target(&["label:STROLLING"]), Some("walking"));
        assert_eq!(target(&["label:FIX_walking", "strolling"]), Some("walking"));
        assert_eq!(target(&["in_a_car", "sitting"]), Some("moving_by_car"));
        assert_eq!(target(&["label:DRIVE_-_I_M_THE_DRIVER"]), Some("moving_by_car"));
        assert_eq!(target(&["bicycling", "phone_in_pocket"]), Some("bicycling"));
    }

    #[test]
    fn drop_rules() {
        let cfg = CleaningConfig::default();
        let reason = |r: ExtraSensoryRecord<Vec<f64>>| {
            let out = map_and_clean_extrasensory(vec![r], &cfg);
            assert!(out.kept.is_empty());
            *out.report.dropped.keys().next().unwrap()
        };
        assert_eq!(reason(rec(&["in_a_car", "at_home"])), DropReason::CarAtHome);
        assert_eq!(reason(rec(&["sitting", "phone_on_table"])), DropReason::PhonePosition);
        assert_eq!(reason(rec(&["sitting", "walking"])), DropReason::AmbiguousTarget);
        assert_eq!(reason(rec(&["at_home"])), DropReason::NoTarget);
        let mut moving = rec(&["lying_down"]);
        moving.speed = Some(1.2);
        assert_eq!(reason(moving), DropReason::SpeedWithStaticActivity);
        let mut deaf = rec(&["walking"]);
        deaf.has_watch_accelerometer = false;
        assert_eq!(reason(deaf), DropReason::MissingSensor);
        // a bus passenger is moving legitimately
        let mut bus = rec(&["sitting", "on_a_bus"]);
        bus.speed = Some(8.0);
        assert_eq!(map_and_clean_extrasensory(vec![bus], &cfg).kept.len(), 1);
    }

    #[test]
    fn report_counts() {
        let out = map_and_clean_extrasensory(
            vec![rec(&["walking"]), rec(&["in_a_car", "at_home"]), rec(&["sitting"]), rec(&[])],
            &CleaningConfig::default(),
        );
        assert_eq!(out.report.input, 4);
        assert_eq!(out.report.kept, 2);
        assert_eq!(out.report.dropped.values().sum::<usize>(), 2);
        assert_eq!(out.report.per_target["walking"], 1);
    }

    const LABELS: [&str; 14] = [
        "walking", "strolling", "sitting", "standing", "lying_down", "bicycling", "in_a_car", "car_driver",
        "on_a_bus", "at_home", "phone_in_pocket", "phone_in_bag", "phone_on_table", "phone_in_hand",
    ];

    proptest! {
        #[test]
        fn surviving_payloads_are_untouched(
            picks in prop::collection::vec(prop::collection::vec(0usize..14, 0..5), 1..40),
            speeds in prop::collection::vec(prop::option::of(0.0f64..10.0), 40),
        ) {
            let records: Vec<_> = picks.iter().zip(&speeds).enumerate().map(|(i, (p, s))| {
                let mut r = rec(&p.iter().map(|&j| LABELS[j]).collect::<Vec<_>>());
                r.payload = vec![i as f64, i as f64 * 0.5];
                r.speed = *s;
                r
            }).collect();
            let out = map_and_clean_extrasensory(records.clone(), &CleaningConfig::default());
            prop_assert_eq!(out.report.kept + out.report.dropped.values().sum::<usize>(), records.len());
            for kept in &out.kept {
                let i = kept.record.payload[0] as usize;
                prop_assert_eq!(&kept.record, &records[i]);
                prop_assert!(EXTRASENSORY_TARGETS.contains(&kept.target));
            }
        }
    }
}
