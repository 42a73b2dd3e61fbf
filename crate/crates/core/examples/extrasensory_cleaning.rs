//! Map raw ExtraSensory label sets onto the seven target activities and
//! count what the cleaning rules drop.
//!
//! cargo run --example extrasensory_cleaning

use nesy_har::data::{map_and_clean_extrasensory, CleaningConfig, ExtraSensoryRecord};

fn record(labels: &[&str], speed: Option<f64>) -> ExtraSensoryRecord<()> {
    ExtraSensoryRecord {
        user: "u1".into(),
        timestamp: 0.0,
        labels: labels.iter().map(|s| s.to_string()).collect(),
        speed,
        has_phone_accelerometer: true,
        has_phone_gyroscope: true,
        has_watch_accelerometer: true,
        payload: (),
    }
}

fn main() {
    let records = vec![
        record(&["label:SITTING", "label:ON_A_BUS", "label:PHONE_IN_POCKET"], Some(8.0)),
        record(&["label:FIX_walking", "label:PHONE_IN_HAND"], Some(1.3)),
        record(&["label:IN_A_CAR", "label:AT_HOME"], None),
        record(&["label:SITTING", "label:PHONE_ON_TABLE"], None),
        record(&["label:STANDING"], Some(3.0)),
        record(&["label:LYING_DOWN", "label:SLEEPING"], Some(0.0)),
        record(&["label:COOKING"], None),
    ];
    let out = map_and_clean_extrasensory(records, &CleaningConfig::default());
    for r in &out.kept {
        println!("{:?} -> {}", r.record.labels, r.target);
    }
    println!("kept {} of {}", out.report.kept, out.report.input);
    for (reason, n) in &out.report.dropped {
        println!("  dropped {n} for {reason:?}");
    }
}
