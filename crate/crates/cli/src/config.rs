//! Experiment configuration files.
//!
//! A config is a TOML document with a `schema` version, an `output_dir`, and
//! the sections `[world]`, `[train]`, `[regulator]`, `[verify]` and `[eval]`.
//! Every section is optional and falls back to defaults; unknown keys are
//! rejected. Values can be overridden with `section.key=value` strings.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use srcl_core::trainer::TrainConfig;
use srcl_core::{RegulatorConfig, WorldSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "SRCL_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Monte Carlo batches per bound cell.
    pub n_batches: usize,
    pub bsc: Vec<f64>,
    pub mi_bound_batch_sizes: Vec<usize>,
    pub dependent_bsc: f64,
    pub dependent_rates: Vec<f64>,
    pub dependent_batch_sizes: Vec<usize>,
    /// Add the deterministic cell with dependence 0.9, whose premise fails.
    pub dependent_inapplicable_cell: bool,
    pub jensen_dep_rates: Vec<f64>,
    pub jensen_samples: usize,
    pub controllability_dep_rates: Vec<f64>,
    pub controllability_negatives: Vec<usize>,
    pub controllability_samples: usize,
    pub residual_tolerance: f64,
    pub gradcheck_instances: usize,
    pub gradcheck_temperatures: Vec<f64>,
    pub gradcheck_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_batches: 100_000,
            bsc: vec![0.6, 0.8, 0.95],
            mi_bound_batch_sizes: vec![2, 8, 32, 128],
            dependent_bsc: 0.8,
            dependent_rates: vec![0.1, 0.3, 0.5],
            dependent_batch_sizes: vec![8, 32],
            dependent_inapplicable_cell: true,
            jensen_dep_rates: vec![0.0, 0.1, 0.3, 0.5, 0.9, 1.0],
            jensen_samples: 100_000,
            controllability_dep_rates: vec![0.0, 0.3, 0.5, 1.0],
            controllability_negatives: vec![2, 4],
            controllability_samples: 10_000,
            residual_tolerance: 0.05,
            gradcheck_instances: 100,
            gradcheck_temperatures: vec![0.05, 0.1, 0.5, 1.0],
            gradcheck_tolerance: 1e-4,
        }
    }
}

impl VerifyConfig {
    fn validate(&self) -> Result<(), String> {
        if self.n_batches == 0 {
            return Err("n_batches must be positive".into());
        }
        if let Some(p) = self.bsc.iter().chain([&self.dependent_bsc]).find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(format!("bsc agreement {p} outside (0, 1)"));
        }
        if let Some(n) = self.mi_bound_batch_sizes.iter().chain(&self.dependent_batch_sizes).find(|n| **n < 2) {
            return Err(format!("batch size {n} < 2 in mi_bound_batch_sizes/dependent_batch_sizes"));
        }
        let rates = self
            .dependent_rates
            .iter()
            .chain(&self.jensen_dep_rates)
            .chain(&self.controllability_dep_rates);
        if let Some(r) = rates.clone().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(format!("dependence rate {r} outside [0, 1] in dep_rates"));
        }
        if let Some(k) = self.controllability_negatives.iter().find(|k| !(2..=10).contains(*k)) {
            return Err(format!("controllability_negatives entry {k} outside 2..=10"));
        }
        if let Some(t) = self.gradcheck_temperatures.iter().find(|t| !(**t > 0.0)) {
            return Err(format!("gradcheck_temperatures entry {t} must be positive"));
        }
        if !(self.gradcheck_tolerance > 0.0) || !(self.residual_tolerance > 0.0) {
            return Err("gradcheck_tolerance and residual_tolerance must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out pairs (distinct concepts) used for retrieval.
    pub val_size: usize,
    pub thresholds: Vec<f64>,
    pub histogram_batches: usize,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            val_size: 256,
            thresholds: (0..8).map(|i| i as f64 / 10.0).collect(),
            histogram_batches: 100,
            histogram_bins: 40,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<(), String> {
        if self.val_size < 2 {
            return Err("val_size must be at least 2".into());
        }
        if self.thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err("thresholds must be ascending".into());
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(format!("threshold {t} outside [0, 1] in thresholds"));
        }
        if self.histogram_bins == 0 {
            return Err("histogram_bins must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub output_dir: String,
    pub world: WorldSpec,
    pub train: TrainConfig,
    pub regulator: RegulatorConfig,
    pub verify: VerifyConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            output_dir: "out".into(),
            world: WorldSpec::default(),
            train: TrainConfig::default(),
            regulator: RegulatorConfig::default(),
            verify: VerifyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("override `{arg}`: {message}")]
    Override { arg: String, message: String },
    #[error("{0}")]
    Io(String),
}

/// 1-based line of `byte` in `text`.
fn line_at(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

/// Best line to blame for a semantic error in `section`: the line of a key
/// named in `message`, else the section header, else line 1.
fn blame_line(text: &str, section: Option<&str>, message: &str) -> usize {
    let mut current: Option<String> = None;
    let mut header = None;
    let mut key_hit = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            let name = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            let top = name.split('.').next().unwrap_or("").to_string();
            if section == Some(top.as_str()) && header.is_none() {
                header = Some(idx + 1);
            }
            current = Some(top);
            continue;
        }
        let in_section = match section {
            Some(s) => current.as_deref() == Some(s),
            None => current.is_none(),
        };
        if !in_section {
            continue;
        }
        if let Some((key, _)) = line.split_once('=') {
            let key = key.trim();
            if !key.is_empty() && message.contains(key) && key_hit.is_none() {
                key_hit = Some(idx + 1);
            }
        }
    }
    key_hit.or(header).unwrap_or(1)
}

impl ExperimentConfig {
    /// Parse, apply overrides, and validate.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_at(text, s.start)).unwrap_or(1);
            ConfigError::Invalid {
                line,
                message: e.message().trim().to_string(),
            }
        })?;
        for arg in overrides {
            cfg = cfg.with_override(arg)?;
        }
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    fn with_override(&self, arg: &str) -> Result<Self, ConfigError> {
        let fail = |message: String| ConfigError::Override {
            arg: arg.to_string(),
            message,
        };
        let (path, raw) = arg
            .split_once('=')
            .ok_or_else(|| fail("expected section.key=value".into()))?;
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut doc = toml::Table::try_from(self).map_err(|e| fail(e.to_string()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        let (last, parents) = keys.split_last().unwrap();
        let mut table = &mut doc;
        for k in parents {
            table = table
                .get_mut(*k)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| fail(format!("no section `{k}`")))?;
        }
        table.insert(last.to_string(), value);
        doc.try_into().map_err(|e: toml::de::Error| fail(e.message().trim().to_string()))
    }

    fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let invalid = |section: Option<&str>, message: String| ConfigError::Invalid {
            line: blame_line(text, section, &message),
            message: match section {
                Some(s) => format!("[{s}] {message}"),
                None => message,
            },
        };
        if self.schema != SCHEMA_VERSION {
            return Err(invalid(
                None,
                format!("schema = {} is not supported (expected {SCHEMA_VERSION})", self.schema),
            ));
        }
        self.world
            .validate()
            .map_err(|e| invalid(Some("world"), e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| invalid(Some("train"), e.to_string()))?;
        self.regulator
            .validate()
            .map_err(|e| invalid(Some("regulator"), e.to_string()))?;
        self.verify
            .validate()
            .map_err(|m| invalid(Some("verify"), m))?;
        self.eval.validate().map_err(|m| invalid(Some("eval"), m))?;
        Ok(())
    }

    /// Canonical TOML rendering; parsing it yields an equal config.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form with the output directory cleared, so
    /// where a run writes does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        Sha256::digest(c.to_canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> std::path::PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => d.into(),
            _ => self.output_dir.clone().into(),
        }
    }
}
