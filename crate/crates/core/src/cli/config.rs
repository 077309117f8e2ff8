// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat dotted-key configuration: defaults, then a JSON file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::evalsuite::sha256_file;
use crate::taskgen::{read_json, write_json};

pub type Flat = BTreeMap<String, Value>;

/// Nested objects become dotted keys; arrays and scalars are leaves.
pub fn flatten(v: &Value) -> Flat {
    fn go(prefix: &str, v: &Value, out: &mut Flat) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&key, x, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Flat::new();
    go("", v, &mut out);
    out
}

pub fn unflatten(flat: &Flat) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let mut parts: Vec<&str> = k.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut cur = &mut root;
        for p in parts {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefix keys are objects");
        }
        cur.insert(last.to_string(), v.clone());
    }
    Value::Object(root)
}

/// Flag name for a key: dots and underscores become dashes.
pub fn flag_name(key: &str) -> String {
    format!("--{}", key.replace(['.', '_'], "-"))
}

/// Overlay `layers` on the flattened `defaults`, rejecting unknown keys, and
/// deserialize the result. Returns the typed value and its flat form.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, layers: &[(&str, Flat)]) -> Result<(T, Flat)> {
    let mut flat = flatten(&serde_json::to_value(defaults)?);
    for (origin, layer) in layers {
        for (k, v) in layer {
            if !flat.contains_key(k) {
                let known: Vec<&str> = flat.keys().map(String::as_str).collect();
                return Err(Error::Config(format!("unknown key `{k}` in {origin}; known keys: {}", known.join(", "))));
            }
            flat.insert(k.clone(), v.clone());
        }
    }
    let typed = serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    Ok((typed, flat))
}

/// A config file: one JSON object whose keys may be dotted or nested.
pub fn read_config_file(path: &Path) -> Result<Flat> {
    let v: Value = read_json(path)?;
    if !v.is_object() {
        return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
    }
    Ok(flatten(&v))
}

/// Record of one artifact-producing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Flat,
    /// Input path to SHA-256 of its bytes (checkpoints hash their manifest).
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Flat) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_clock_secs: 0.0,
        }
    }

    /// Hash a file, or a directory's `manifest.json`, or every `*.jsonl`
    /// and `*.json` directly inside a dataset directory.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        if path.is_file() {
            self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        } else if path.join("manifest.json").is_file() {
            let m = path.join("manifest.json");
            self.inputs.insert(m.display().to_string(), sha256_file(&m)?);
        } else if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl" || x == "json"))
                .filter(|p| !p.ends_with("run_manifest.json"))
                .collect();
            files.sort();
            for f in files {
                self.inputs.insert(f.display().to_string(), sha256_file(&f)?);
            }
        } else {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        Ok(())
    }

    pub fn finish(mut self, out: &Path, started: std::time::Instant) -> Result<()> {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        self.outputs.sort();
        write_json(&out.join("run_manifest.json"), &self)
    }
}
