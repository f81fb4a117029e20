//! Verification report: metadata, checks, fitted constants and per-stage sections.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const TOOL: &str = "qlab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub dim: usize,
    pub halfwidth: f64,
    pub resolution: usize,
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    /// `config` or `QLAB_SEED`.
    pub source: String,
    pub functions: u64,
    pub weights: u64,
    pub pairs: u64,
    pub covering: u64,
}

impl Seeds {
    pub fn derive(master: u64, source: &str) -> Self {
        Self {
            master,
            source: source.to_string(),
            functions: mix(master, 1),
            weights: mix(master, 2),
            pairs: mix(master, 3),
            covering: mix(master, 4),
        }
    }
}

/// splitmix64 step on `seed + tag`.
fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub scenario: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub grid: GridInfo,
    pub threads: usize,
    /// Parallel reductions are collected and summed in index order.
    pub summation: String,
    pub stages: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub stage: String,
    pub name: String,
    pub severity: Severity,
    pub passed: bool,
    pub value: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub hard_failures: usize,
    pub soft_failures: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: Metadata,
    pub flags: Vec<String>,
    pub checks: Vec<Check>,
    /// Fitted constants, keyed `stage.quantity`; these are what `qlab diff` compares.
    pub constants: BTreeMap<String, f64>,
    pub stages: BTreeMap<String, Value>,
    pub artifacts: Vec<String>,
    pub outcome: Outcome,
}

impl Report {
    pub fn new(metadata: Metadata) -> Self {
        Self {
            metadata,
            flags: Vec::new(),
            checks: Vec::new(),
            constants: BTreeMap::new(),
            stages: BTreeMap::new(),
            artifacts: Vec::new(),
            outcome: Outcome::default(),
        }
    }

    pub fn check(&mut self, stage: &str, name: &str, severity: Severity, passed: bool, value: Option<f64>, detail: impl Into<String>) {
        self.checks.push(Check {
            stage: stage.into(),
            name: name.into(),
            severity,
            passed,
            value: value.filter(|v| v.is_finite()),
            detail: detail.into(),
        });
    }

    pub fn hard(&mut self, stage: &str, name: &str, passed: bool, value: Option<f64>, detail: impl Into<String>) {
        self.check(stage, name, Severity::Hard, passed, value, detail);
    }

    pub fn constant(&mut self, key: impl Into<String>, v: f64) {
        self.constants.insert(key.into(), v);
    }

    pub fn flag(&mut self, f: impl Into<String>) {
        let f = f.into();
        if !self.flags.contains(&f) {
            self.flags.push(f);
        }
    }

    pub fn finish(&mut self) {
        let hard = self.checks.iter().filter(|c| c.severity == Severity::Hard && !c.passed).count();
        let soft = self.checks.iter().filter(|c| c.severity == Severity::Soft && !c.passed).count();
        self.outcome = Outcome { hard_failures: hard, soft_failures: soft, passed: hard == 0 };
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Reads `report.json`, or `DIR/report.json` when given a directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: not a qlab report: {e}", file.display())))
    }
}
