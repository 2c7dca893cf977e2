use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

/// Record of one run. Provenance goes in comments; the remaining lines are
/// the resolved flags, so the file can be passed back with `--config`.
pub struct RunManifest {
    pub subcommand: &'static str,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub args: Value,
}

impl RunManifest {
    pub fn new<A: Serialize>(
        subcommand: &'static str,
        config: Option<PathBuf>,
        seed: u64,
        args: &A,
    ) -> Self {
        Self {
            subcommand,
            config,
            seed,
            args: serde_json::to_value(args).expect("arguments serialize"),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("# subcommand = {}\n", self.subcommand);
        let config = self
            .config
            .as_ref()
            .map_or("none".to_string(), |p| p.display().to_string());
        s += &format!("# config = {config}\n");
        s += &format!("# version = polyglot {}\n", env!("CARGO_PKG_VERSION"));
        s += &format!("seed = {}\n", self.seed);
        if let Value::Object(map) = &self.args {
            for (k, v) in map {
                if let Some(v) = scalar(v) {
                    s += &format!("{k} = {v}\n");
                }
            }
        }
        s
    }

    /// Writes `<subcommand>.manifest` into `dir`.
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{}.manifest", self.subcommand));
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Array(items) if items.is_empty() => None,
        Value::Array(items) => Some(
            items
                .iter()
                .filter_map(scalar)
                .collect::<Vec<_>>()
                .join(","),
        ),
        other => Some(other.to_string()),
    }
}
