#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use nesy_har::context::DiscretizationConfig;
use nesy_har::data::{encode_users, generate_synthetic, EncodedSample, SyntheticConfig};
use nesy_har::knowledge::{KnowledgeModel, SymbolicReasoner};
use nesy_har::nn::NetworkSpec;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn synthetic_rules() -> KnowledgeModel {
    KnowledgeModel::load(crate_dir().join("rules/synthetic.rules")).unwrap()
}

pub fn domino_rules() -> KnowledgeModel {
    KnowledgeModel::load(crate_dir().join("rules/domino.rules")).unwrap()
}

/// Encoded synthetic windows for `users` users.
pub fn synthetic_samples(km: &KnowledgeModel, users: usize, windows: usize, seed: u64) -> Vec<EncodedSample> {
    let cfg = SyntheticConfig {
        users,
        windows_per_user: windows,
        seed,
        ..Default::default()
    };
    let ds = generate_synthetic(&cfg, km, &DiscretizationConfig::default()).unwrap();
    let (samples, warnings) = encode_users(&ds.users, &ds.layout, km.activities(), km.contexts(), false).unwrap();
    assert!(warnings.is_empty(), "{warnings:?}");
    samples
}

pub fn compact_spec(km: &KnowledgeModel) -> NetworkSpec {
    let d = SyntheticConfig::default();
    let window = (d.window_seconds * d.phone_rate) as usize;
    NetworkSpec::compact(d.phone_channels, d.watch_channels, window, km.contexts().len(), km.activities().len())
}

/// Prints one verdict line past the test harness's output capture.
pub fn verdict(criterion: u8, name: &str, passed: bool, detail: &str) {
    let line = format!(
        "criterion {criterion} [{name}]: {} {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

/// Collects named checks and reports the criterion once.
pub struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    pub fn new() -> Self {
        Checks {
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    pub fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    pub fn finish(self, criterion: u8, name: &str) {
        let passed = self.failures.is_empty();
        let detail = if passed {
            self.notes.join("; ")
        } else {
            self.failures.join("; ")
        };
        verdict(criterion, name, passed, &detail);
        assert!(passed, "criterion {criterion} failed: {detail}");
    }
}
