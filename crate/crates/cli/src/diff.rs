//! Report comparison: fitted constants within a relative band, check status changes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::report::Report;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantDelta {
    pub key: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `|a - b| / max(|a|, |b|)`.
    pub relative: Option<f64>,
    pub within_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusChange {
    pub check: String,
    pub a: Option<bool>,
    pub b: Option<bool>,
}

impl StatusChange {
    fn is_regression(&self) -> bool {
        matches!((self.a, self.b), (Some(true), Some(false)) | (Some(_), None))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diff {
    pub band: f64,
    pub constants: Vec<ConstantDelta>,
    pub checks: Vec<StatusChange>,
    /// Metadata fields that differ (grid, seeds, version...).
    pub metadata: Vec<String>,
}

fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn diff_reports(a: &Report, b: &Report, band: f64) -> Diff {
    let keys: BTreeSet<&String> = a.constants.keys().chain(b.constants.keys()).collect();
    let constants = keys
        .into_iter()
        .filter_map(|k| {
            let (x, y) = (a.constants.get(k).copied(), b.constants.get(k).copied());
            if x.map(f64::to_bits) == y.map(f64::to_bits) {
                return None;
            }
            let rel = match (x, y) {
                (Some(x), Some(y)) => Some(relative(x, y)),
                _ => None,
            };
            let within_band = rel.is_some_and(|r| r <= band);
            Some(ConstantDelta { key: k.clone(), a: x, b: y, relative: rel, within_band })
        })
        .collect();

    let status = |r: &Report| -> BTreeMap<String, bool> {
        r.checks.iter().map(|c| (format!("{}/{}", c.stage, c.name), c.passed)).collect()
    };
    let (sa, sb) = (status(a), status(b));
    let names: BTreeSet<&String> = sa.keys().chain(sb.keys()).collect();
    let checks = names
        .into_iter()
        .filter_map(|n| {
            let (x, y) = (sa.get(n).copied(), sb.get(n).copied());
            (x != y).then(|| StatusChange { check: n.clone(), a: x, b: y })
        })
        .collect();

    let mut metadata = Vec::new();
    let (ma, mb) = (&a.metadata, &b.metadata);
    if ma.grid != mb.grid {
        metadata.push(format!("grid: m={} h={} -> m={} h={}", ma.grid.resolution, ma.grid.spacing, mb.grid.resolution, mb.grid.spacing));
    }
    if ma.seeds != mb.seeds {
        metadata.push(format!("seed: {} -> {}", ma.seeds.master, mb.seeds.master));
    }
    if ma.config_hash != mb.config_hash {
        metadata.push(format!("config: {} -> {}", short(&ma.config_hash), short(&mb.config_hash)));
    }
    if ma.version != mb.version {
        metadata.push(format!("version: {} -> {}", ma.version, mb.version));
    }
    Diff { band, constants, checks, metadata }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

impl Diff {
    /// No constant or check differs.
    pub fn is_empty(&self) -> bool {
        self.constants.is_empty() && self.checks.is_empty()
    }

    pub fn regressions(&self) -> usize {
        self.constants.iter().filter(|c| !c.within_band).count() + self.checks.iter().filter(|c| c.is_regression()).count()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for m in &self.metadata {
            let _ = writeln!(s, "  {m}");
        }
        if self.is_empty() {
            s.push_str("no differences\n");
            return s;
        }
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
        for c in &self.constants {
            let mark = if c.within_band { "ok " } else { "REG" };
            let rel = c.relative.map_or("missing".to_string(), |r| format!("{:.2}%", 100.0 * r));
            let _ = writeln!(s, "{mark} {:<44} {:>14} {:>14} {rel}", c.key, fmt(c.a), fmt(c.b));
        }
        let st = |v: Option<bool>| match v {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "-",
        };
        for c in &self.checks {
            let mark = if c.is_regression() { "REG" } else { "ok " };
            let _ = writeln!(s, "{mark} check {:<38} {} -> {}", c.check, st(c.a), st(c.b));
        }
        let _ = writeln!(s, "{} regression(s), band {:.0}%", self.regressions(), 100.0 * self.band);
        s
    }
}
