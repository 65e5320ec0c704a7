//! Output formatting and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// What a subcommand produced.
pub struct Output {
    pub json: Value,
    /// Table form for `--format csv`; falls back to flattened JSON.
    pub csv: Option<String>,
    /// Files or directories written by the subcommand itself.
    pub artifacts: Vec<PathBuf>,
    pub exit_code: i32,
}

impl Output {
    pub fn json(v: impl Serialize) -> Result<Self> {
        Ok(Self {
            json: serde_json::to_value(v)?,
            csv: None,
            artifacts: Vec::new(),
            exit_code: 0,
        })
    }

    pub fn with_csv(mut self, csv: String) -> Self {
        self.csv = Some(csv);
        self
    }

    pub fn with_artifact(mut self, p: &Path) -> Self {
        self.artifacts.push(p.to_path_buf());
        self
    }

    pub fn render(&self, format: Format) -> Result<String> {
        Ok(match format {
            Format::Json => serde_json::to_string_pretty(&self.json)? + "\n",
            Format::Csv => match &self.csv {
                Some(c) => c.clone(),
                None => flatten_csv(&self.json),
            },
        })
    }
}

/// `key,value` rows for every leaf, with dotted paths and array indices.
pub fn flatten_csv(v: &Value) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => {
                for (k, x) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            Value::Array(items) => {
                for (i, x) in items.iter().enumerate() {
                    walk(&format!("{prefix}.{i}"), x, out);
                }
            }
            Value::String(s) => out.push((prefix.to_string(), s.clone())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut rows = Vec::new();
    walk("", v, &mut rows);
    let mut s = String::from("key,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{},{}\n", csv_field(&k), csv_field(&v)));
    }
    s
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub schema_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub parameters: Value,
    pub seed: u64,
    pub workers: usize,
    pub format: Format,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub exit_code: i32,
    pub wall_time_secs: f64,
}

/// Where a run's manifest goes: next to the report, inside an output
/// directory, or `None` for stderr.
pub fn manifest_path(out: Option<&Path>, explicit: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.to_path_buf());
    }
    let out = out?;
    if out.is_dir() {
        return Some(out.join("run.json"));
    }
    let mut name = out.file_name()?.to_os_string();
    name.push(".run.json");
    Some(out.with_file_name(name))
}
