//! Cut a hand-built recording into windows and derive each window's
//! context state.
//!
//! cargo run --example windowing

use nesy_har::context::RawContextRecord;
use nesy_har::data::{segment, Annotation, InputLayout, Stream, UserDataset};
use nesy_har::knowledge::{KnowledgeModel, SymbolicReasoner};

fn stream(rate: f64, seconds: f64, phase: f64) -> Stream {
    let n = (rate * seconds) as usize;
    let timestamps: Vec<f64> = (0..n).map(|i| i as f64 / rate).collect();
    let values = (0..3)
        .map(|c| timestamps.iter().map(|t| (t * (2.0 + c as f64) + phase).sin()).collect())
        .collect();
    Stream {
        rate,
        channels: vec!["x".into(), "y".into(), "z".into()],
        timestamps,
        values,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let km = KnowledgeModel::load(concat!(env!("CARGO_MANIFEST_DIR"), "/rules/synthetic.rules"))?;
    let layout = InputLayout {
        window_seconds: 4.0,
        phone_rate: 16.0,
        watch_rate: 16.0,
        phone_channels: vec!["x".into(), "y".into(), "z".into()],
        watch_channels: vec!["x".into(), "y".into(), "z".into()],
        discretization: Default::default(),
    };
    let context = (0..20)
        .map(|i| RawContextRecord {
            timestamp: i as f64,
            speed: Some(if i < 8 { 0.0 } else { 1.2 }),
            pressure_delta: Some(0.0),
            semantic_place: Some(if i < 8 { "home" } else { "street" }.into()),
            transport_route_nearby: Some(false),
            ..Default::default()
        })
        .collect();
    let user = UserDataset {
        user: "demo".into(),
        phone: stream(16.0, 20.0, 0.0),
        watch: stream(16.0, 20.0, 1.0),
        context,
        annotations: vec![
            Annotation { user: "demo".into(), activity: "brushing_teeth".into(), t_s: 0.0, t_e: 8.0 },
            Annotation { user: "demo".into(), activity: "walking".into(), t_s: 8.0, t_e: 18.0 },
        ],
    };

    let seg = segment(&user, &layout, km.activities(), km.contexts(), true)?;
    for w in &seg.windows {
        let label = w.label.map_or("-", |l| km.activities().name(l));
        let state: Vec<String> = w.state.describe(km.contexts()).iter().map(ToString::to_string).collect();
        println!("{} [{:>4}, {:>4}) {label:<15} phone {:?}  {{{}}}", w.id, w.t_s, w.t_e, w.phone.shape(), state.join(", "));
    }
    for warning in &seg.warnings {
        println!("warning: {warning}");
    }
    Ok(())
}
