//! Run directories: `config.json`, `metrics.jsonl`, `summary.json`,
//! `timing.json` and whatever checkpoints or tables the command writes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::{CliError, CliResult};

pub struct RunDir {
    pub path: PathBuf,
    stage: String,
    config_hash: String,
    run_id: String,
    metrics: BufWriter<File>,
}

impl RunDir {
    /// Creates `<out>/<stage>`, replacing any previous run there.
    pub fn create(out: &Path, stage: &str, cfg: &RunConfig) -> CliResult<Self> {
        let path = out.join(stage);
        if path.exists() {
            std::fs::remove_dir_all(&path)?;
        }
        std::fs::create_dir_all(&path)?;
        std::fs::write(path.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
        let metrics = BufWriter::new(File::create(path.join("metrics.jsonl"))?);
        Ok(Self {
            path,
            stage: stage.to_string(),
            config_hash: cfg.hash(),
            run_id: cfg.run_id.clone(),
            metrics,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Appends one JSON line to `metrics.jsonl`.
    pub fn log(&mut self, record: &impl Serialize) -> CliResult<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn stamp(&self, body: Value) -> Value {
        let mut doc = json!({
            "stage": self.stage,
            "run_id": self.run_id,
            "config_hash": self.config_hash,
        });
        if let (Value::Object(dst), Value::Object(src)) = (&mut doc, body) {
            dst.extend(src);
        }
        doc
    }

    /// Writes `summary.json`. Its content must depend only on the config and
    /// the inputs; wall-clock figures go to [`RunDir::timing`].
    pub fn summary(&mut self, body: Value) -> CliResult<()> {
        self.metrics.flush()?;
        let doc = self.stamp(body);
        std::fs::write(self.file("summary.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }

    /// Writes `timing.json` with a machine annotation.
    pub fn timing(&self, body: Value) -> CliResult<()> {
        let mut doc = self.stamp(body);
        doc["machine"] = machine();
        std::fs::write(self.file("timing.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        std::fs::write(self.file(name), serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    pub fn write_csv<R: Serialize>(&self, name: &str, rows: &[R]) -> CliResult<()> {
        let mut w = csv::Writer::from_path(self.file(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn machine() -> Value {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    json!({
        "cpu": cpu,
        "threads": std::thread::available_parallelism().map_or(1, |n| n.get()),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
    })
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)[..8]))
}

/// Errors unless `path` exists.
pub fn require(path: PathBuf, producer: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::missing(path, producer))
    }
}
