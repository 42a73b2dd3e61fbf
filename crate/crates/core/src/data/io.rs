//! On-disk dataset layout.
//!
//! ```text
//! <root>/dataset.json          manifest: format, version, layout, users
//! <root>/annotations.csv       user,activity,t_s,t_e
//! <root>/<user>/phone.csv      timestamp,<channel>,...
//! <root>/<user>/watch.csv      timestamp,<channel>,...
//! <root>/<user>/context.csv    timestamp,speed,pressure_delta,semantic_place,
//!                              transport_route_nearby,weather,
//!                              scalar:<name>...,categorical:<name>...
//! ```
//!
//! Empty context cells mean the signal was not recorded. Numbers are written
//! in shortest round-trip form, so re-writing a loaded dataset is
//! byte-identical.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Annotation, DataError, InputLayout, Stream, UserDataset};
use crate::context::RawContextRecord;
use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "nesy-har-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub layout: InputLayout,
    pub users: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: InputLayout,
    pub users: Vec<UserDataset>,
}

const CONTEXT_FIXED: [&str; 6] = [
    "timestamp",
    "speed",
    "pressure_delta",
    "semantic_place",
    "transport_route_nearby",
    "weather",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    DataError::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    }
    .into()
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

fn write_stream(path: &Path, s: &Stream) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(s.channels.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, t) in s.timestamps.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(s.values.iter().map(|ch| ch[i].to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_context(path: &Path, records: &[RawContextRecord]) -> Result<()> {
    let scalars: BTreeSet<&String> = records.iter().flat_map(|r| r.scalars.keys()).collect();
    let cats: BTreeSet<&String> = records.iter().flat_map(|r| r.categorical.keys()).collect();
    let mut w = writer(path)?;
    let mut header: Vec<String> = CONTEXT_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(scalars.iter().map(|s| format!("scalar:{s}")));
    header.extend(cats.iter().map(|s| format!("categorical:{s}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in records {
        let mut row = vec![
            r.timestamp.to_string(),
            opt(&r.speed),
            opt(&r.pressure_delta),
            opt(&r.semantic_place),
            opt(&r.transport_route_nearby),
            opt(&r.weather),
        ];
        row.extend(scalars.iter().map(|s| opt(&r.scalars.get(*s))));
        row.extend(cats.iter().map(|s| opt(&r.categorical.get(*s))));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `users` under `root`, creating directories as needed.
pub fn write_dataset(root: impl AsRef<Path>, layout: &InputLayout, users: &[UserDataset]) -> Result<()> {
    let root = root.as_ref();
    layout.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        layout: layout.clone(),
        users: users.iter().map(|u| u.user.clone()).collect(),
    };
    let path = root.join("dataset.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let path = root.join("annotations.csv");
    let mut w = writer(&path)?;
    w.write_record(["user", "activity", "t_s", "t_e"])
        .map_err(|e| csv_error(&path, e))?;
    for u in users {
        for a in &u.annotations {
            w.write_record([a.user.clone(), a.activity.clone(), a.t_s.to_string(), a.t_e.to_string()])
                .map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    for u in users {
        if u.user.is_empty() || u.user.contains(['/', '\\']) || u.user.starts_with('.') {
            return Err(DataError::Format(format!("user id `{}` is not usable as a directory name", u.user)).into());
        }
        let dir = root.join(&u.user);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_stream(&dir.join("phone.csv"), &u.phone)?;
        write_stream(&dir.join("watch.csv"), &u.watch)?;
        write_context(&dir.join("context.csv"), &u.context)?;
    }
    Ok(())
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    if !path.exists() {
        return Err(DataError::Format(format!("missing file {}", path.display())).into());
    }
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn parse_f64(path: &Path, line: usize, field: &str, text: &str) -> Result<f64> {
    text.trim().parse::<f64>().map_err(|_| {
        DataError::Parse {
            path: path.display().to_string(),
            line,
            message: format!("{field}: `{text}` is not a number"),
        }
        .into()
    })
}

fn parse_opt<T>(text: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if text.trim().is_empty() {
        Ok(None)
    } else {
        f(text.trim()).map(Some)
    }
}

fn read_stream(path: &Path, rate: f64, channels: &[String]) -> Result<Stream> {
    let mut r = reader(path)?;
    let header: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("timestamp") || header[1..] != *channels {
        return Err(DataError::Format(format!(
            "{}: header {header:?} does not match channels {channels:?}",
            path.display()
        ))
        .into());
    }
    let mut s = Stream {
        rate,
        channels: channels.to_vec(),
        timestamps: Vec::new(),
        values: vec![Vec::new(); channels.len()],
    };
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        s.timestamps.push(parse_f64(path, line, "timestamp", &rec[0])?);
        for (c, ch) in s.values.iter_mut().enumerate() {
            ch.push(parse_f64(path, line, &channels[c], rec.get(c + 1).unwrap_or(""))?);
        }
    }
    s.validate(&path.display().to_string())?;
    Ok(s)
}

fn read_context(path: &Path) -> Result<Vec<RawContextRecord>> {
    let mut r = reader(path)?;
    let header: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    if header.len() < CONTEXT_FIXED.len() || header[..CONTEXT_FIXED.len()] != CONTEXT_FIXED {
        return Err(DataError::Format(format!("{}: unexpected header {header:?}", path.display())).into());
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let num = |j: usize| parse_opt(&rec[j], |t| parse_f64(path, line, &header[j], t));
        let text = |j: usize| parse_opt(&rec[j], |t| Ok(t.to_string()));
        let mut r = RawContextRecord {
            timestamp: parse_f64(path, line, "timestamp", &rec[0])?,
            speed: num(1)?,
            pressure_delta: num(2)?,
            semantic_place: text(3)?,
            transport_route_nearby: parse_opt(&rec[4], |t| match t {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(DataError::Parse {
                    path: path.display().to_string(),
                    line,
                    message: format!("transport_route_nearby: `{other}` is not a boolean"),
                }
                .into()),
            })?,
            weather: text(5)?,
            ..Default::default()
        };
        for (j, h) in header.iter().enumerate().skip(CONTEXT_FIXED.len()) {
            if let Some(name) = h.strip_prefix("scalar:") {
                if let Some(v) = num(j)? {
                    r.scalars.insert(name.to_string(), v);
                }
            } else if let Some(name) = h.strip_prefix("categorical:") {
                if let Some(v) = text(j)? {
                    r.categorical.insert(name.to_string(), v);
                }
            } else {
                return Err(DataError::Format(format!("{}: unknown column `{h}`", path.display())).into());
            }
        }
        out.push(r);
    }
    Ok(out)
}

fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if value.get("format").and_then(|v| v.as_str()) != Some(DATASET_FORMAT) {
        return Err(DataError::Format(format!("{} is not a {DATASET_FORMAT} manifest", path.display())).into());
    }
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(u64::from(DATASET_VERSION)) {
        return Err(DataError::Format(format!("unsupported dataset version {version:?}")).into());
    }
    serde_json::from_value(value).map_err(|source| Error::Json { path, source })
}

/// Reads a dataset written by [`write_dataset`] (or by hand in the same layout).
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    manifest.layout.validate()?;
    let path = root.join("annotations.csv");
    let mut r = reader(&path)?;
    let mut annotations: Vec<Annotation> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        let line = i + 2;
        if rec.len() != 4 {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line,
                message: format!("expected 4 fields, got {}", rec.len()),
            }
            .into());
        }
        annotations.push(Annotation {
            user: rec[0].to_string(),
            activity: rec[1].to_string(),
            t_s: parse_f64(&path, line, "t_s", &rec[2])?,
            t_e: parse_f64(&path, line, "t_e", &rec[3])?,
        });
    }
    if let Some(a) = annotations.iter().find(|a| !manifest.users.contains(&a.user)) {
        return Err(DataError::Format(format!("annotation for undeclared user `{}`", a.user)).into());
    }
    let layout = &manifest.layout;
    let mut users = Vec::new();
    for u in &manifest.users {
        let dir: PathBuf = root.join(u);
        users.push(UserDataset {
            user: u.clone(),
            phone: read_stream(&dir.join("phone.csv"), layout.phone_rate, &layout.phone_channels)?,
            watch: read_stream(&dir.join("watch.csv"), layout.watch_rate, &layout.watch_channels)?,
            context: read_context(&dir.join("context.csv"))?,
            annotations: annotations.iter().filter(|a| &a.user == u).cloned().collect(),
        });
    }
    Ok(Dataset {
        layout: manifest.layout,
        users,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::context::DiscretizationConfig;
    use crate::knowledge::KnowledgeModel;

    const RULES: &str = "[activities]\nsitting\nwalking\n[contexts]\nspeed exclusive: null, low, medium, high\nlocation_type exclusive: indoor, outdoor\n[rules]\nwalking: speed=low\n";

    fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn round_trip_is_exact() {
        let k = KnowledgeModel::parse(RULES).unwrap();
        let cfg = SyntheticConfig {
            users: 2,
            windows_per_user: 6,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, &k, &DiscretizationConfig::default()).unwrap();
        let a = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &ds.layout, &ds.users).unwrap();
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded.users, ds.users);
        assert_eq!(loaded.layout, ds.layout);
        let b = tempfile::tempdir().unwrap();
        write_dataset(b.path(), &loaded.layout, &loaded.users).unwrap();
        assert_eq!(files(a.path()), files(b.path()));
    }

    #[test]
    fn missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
        fs::write(dir.path().join("dataset.json"), "{\"format\":\"other\"}").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(DataError::Format(_)))));
    }
}
