//! Run manifest written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

use acla::model::hex_digest;

use crate::Failure;

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub struct Manifest {
    command: String,
    started: u64,
    seed: Option<u64>,
    config: String,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
    extra: Map<String, Value>,
}

/// SHA-256 of a file, or of the per-file digests of a directory's
/// regular files in name order.
pub fn digest_path(path: &Path) -> Result<String, Failure> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut acc = String::new();
        for p in names {
            acc.push_str(&hex_digest(&fs::read(&p)?));
            acc.push('\n');
        }
        Ok(hex_digest(acc.as_bytes()))
    } else {
        Ok(hex_digest(&fs::read(path)?))
    }
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            started: now(),
            seed,
            config: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn config(&mut self, canonical: String) {
        self.config = canonical;
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let d = digest_path(path)?;
        self.inputs.push((path.display().to_string(), d));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn extra(&mut self, key: &str, v: Value) {
        self.extra.insert(key.to_string(), v);
    }

    pub fn write(mut self, path: &Path) -> Result<(), Failure> {
        let inputs: Vec<Value> = self.inputs.iter().map(|(p, d)| json!({"path": p, "sha256": d})).collect();
        let mut m = Map::new();
        m.insert("command".into(), json!(self.command));
        m.insert("config".into(), json!(self.config));
        m.insert("seed".into(), json!(self.seed));
        m.insert("inputs".into(), Value::Array(inputs));
        m.insert("outputs".into(), json!(self.outputs));
        m.insert("tool_version".into(), json!(env!("CARGO_PKG_VERSION")));
        m.insert("started_unix_s".into(), json!(self.started));
        m.insert("finished_unix_s".into(), json!(now()));
        m.append(&mut self.extra);
        let text = serde_json::to_string_pretty(&Value::Object(m)).map_err(|e| Failure::Data(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// `<stem>.manifest.json` beside a file output, `manifest.json` inside a
/// directory output.
pub fn path_for(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        return out.join("manifest.json");
    }
    let stem = out.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.manifest.json"))
}
