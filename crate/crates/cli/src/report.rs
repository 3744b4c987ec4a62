//! JSON-lines reports. Every report starts with a provenance record.

use std::io::Write;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::ExperimentConfig;

pub const REPORT_SCHEMA: &str = "srcl-report/1";

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub schema: &'static str,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: &'static str,
}

impl Provenance {
    pub fn new(command: &str, cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            schema: REPORT_SCHEMA,
            command: command.into(),
            config_hash: cfg.hash(),
            seed,
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

/// Serialize `payload` as one JSON object tagged with `record`.
pub fn record_line<T: Serialize>(record: &str, payload: &T) -> String {
    let mut obj = Map::new();
    obj.insert("record".into(), Value::String(record.into()));
    match serde_json::to_value(payload).expect("report payload serializes") {
        Value::Object(fields) => obj.extend(fields),
        other => {
            obj.insert("value".into(), other);
        }
    }
    Value::Object(obj).to_string()
}

/// Accumulates report lines in memory; the caller decides where they go.
#[derive(Debug, Default, Clone)]
pub struct Report {
    lines: Vec<String>,
}

impl Report {
    pub fn new(provenance: &Provenance) -> Self {
        Self {
            lines: vec![record_line("provenance", provenance)],
        }
    }

    pub fn push<T: Serialize>(&mut self, record: &str, payload: &T) -> &str {
        self.lines.push(record_line(record, payload));
        self.lines.last().unwrap()
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for l in &self.lines {
            writeln!(out, "{l}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }
}
