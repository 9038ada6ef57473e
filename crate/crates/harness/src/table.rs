//! Aggregated result tables with their ordering checks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::runs::{write_json, RunResult};
use crate::stats;

/// One table group: the runs of one row over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub runs: usize,
    pub ok: usize,
    /// Mean test accuracy (%) over successful runs.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Reference accuracy for the row, when there is one.
    pub reference: Option<f64>,
    pub mean_abs_cos: Option<f64>,
    /// Mean over runs of the per-run median `|cos|`.
    pub median_abs_cos: Option<f64>,
    pub digests: Vec<String>,
}

impl GroupSummary {
    pub fn new(label: impl Into<String>, rows: &[&RunResult], reference: Option<f64>) -> Self {
        let ok: Vec<&&RunResult> = rows.iter().filter(|r| r.ok()).collect();
        let acc: Vec<f64> = ok.iter().filter_map(|r| r.test_accuracy).collect();
        let cos: Vec<f64> = ok.iter().filter_map(|r| r.mean_abs_cos).collect();
        let med: Vec<f64> = ok.iter().filter_map(|r| r.median_abs_cos).collect();
        GroupSummary {
            label: label.into(),
            runs: rows.len(),
            ok: ok.len(),
            mean: stats::mean(&acc),
            std: stats::std_dev(&acc),
            reference,
            mean_abs_cos: stats::mean(&cos),
            median_abs_cos: stats::mean(&med),
            digests: rows.iter().map(|r| r.digest.clone()).collect(),
        }
    }

    /// Mean accuracy, but only if every run of the group succeeded.
    pub fn complete_mean(&self) -> Option<f64> {
        (self.ok == self.runs && self.runs > 0).then_some(self.mean).flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` when an input run failed and the check could not be evaluated.
    pub passed: Option<bool>,
    /// Reported-only checks never fail the table.
    pub asserted: bool,
    pub detail: String,
}

impl Check {
    pub fn asserted(name: impl Into<String>, passed: Option<bool>, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            asserted: true,
            detail: detail.into(),
        }
    }

    pub fn reported(name: impl Into<String>, passed: Option<bool>, detail: impl Into<String>) -> Self {
        Check {
            asserted: false,
            ..Check::asserted(name, passed, detail)
        }
    }

    pub fn failed(&self) -> bool {
        self.asserted && self.passed != Some(true)
    }

    fn tag(&self) -> &'static str {
        match (self.passed, self.asserted) {
            (Some(true), _) => "PASS",
            (Some(false), true) => "FAIL",
            (Some(false), false) => "NOTE",
            (None, _) => "N/A ",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// File stem under `<out>/tables/`.
    pub name: String,
    pub title: String,
    pub rows: Vec<RunResult>,
    pub groups: Vec<GroupSummary>,
    pub checks: Vec<Check>,
    /// Extra machine-readable data, e.g. pooled histograms.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl ResultTable {
    pub fn new(name: impl Into<String>, title: impl Into<String>, rows: Vec<RunResult>) -> Self {
        ResultTable {
            name: name.into(),
            title: title.into(),
            rows,
            groups: Vec::new(),
            checks: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn group(&self, label: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.label == label)
    }

    /// True when every run succeeded and no asserted check failed.
    pub fn success(&self) -> bool {
        self.rows.iter().all(|r| r.ok()) && !self.checks.iter().any(Check::failed)
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let header = ["group", "runs", "ok", "mean %", "std", "ref %", "mean|cos|", "med|cos|"];
        let mut cells: Vec<[String; 8]> = vec![header.map(String::from)];
        for g in &self.groups {
            cells.push([
                g.label.clone(),
                g.runs.to_string(),
                g.ok.to_string(),
                fmt(g.mean, 2),
                fmt(g.std, 2),
                fmt(g.reference, 2),
                fmt(g.mean_abs_cos, 4),
                fmt(g.median_abs_cos, 4),
            ]);
        }
        let widths: Vec<usize> = (0..8)
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();

        let mut out = String::new();
        writeln!(out, "{}", self.title).unwrap();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
        }
        let failed: Vec<&RunResult> = self.rows.iter().filter(|r| !r.ok()).collect();
        if !failed.is_empty() {
            writeln!(out, "\nfailed runs:").unwrap();
            for r in failed {
                writeln!(
                    out,
                    "  {} {} seed {}: {}",
                    &r.digest[..12],
                    r.variant,
                    r.seed,
                    r.error.as_deref().unwrap_or("unknown error")
                )
                .unwrap();
            }
        }
        if !self.checks.is_empty() {
            writeln!(out, "\nchecks:").unwrap();
            for c in &self.checks {
                let note = if c.asserted { "" } else { " (reported only)" };
                writeln!(out, "  {}  {}{}: {}", c.tag(), c.name, note, c.detail).unwrap();
            }
        }
        out
    }

    /// Writes `<dir>/<name>.json` and `<dir>/<name>.txt`; returns the JSON path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let json = dir.join(format!("{}.json", self.name));
        write_json(&json, self)?;
        fs::write(dir.join(format!("{}.txt", self.name)), self.to_text())?;
        Ok(json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runs::RunStatus;
    use thin_core::config::{DatasetName, Variant};

    fn row(acc: Option<f64>) -> RunResult {
        RunResult {
            digest: "0123456789abcdef".into(),
            dataset: DatasetName::MnistR,
            variant: Variant::Thin,
            gating: None,
            lambda: 0.005,
            seed: 1,
            status: if acc.is_some() {
                RunStatus::Ok
            } else {
                RunStatus::Failed
            },
            error: acc.is_none().then(|| "diverged".into()),
            test_accuracy: acc,
            best_val_accuracy: None,
            trainable_params: None,
            head_params: None,
            steps: None,
            best_step: None,
            mean_abs_cos: None,
            median_abs_cos: None,
            gate_entropy: None,
            cos_histogram: None,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn groups_aggregate_successful_runs() {
        let rows = [row(Some(97.0)), row(Some(99.0)), row(None)];
        let g = GroupSummary::new("thin", &rows.iter().collect::<Vec<_>>(), Some(98.26));
        assert_eq!((g.runs, g.ok), (3, 2));
        assert_eq!(g.mean, Some(98.0));
        assert!((g.std.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(g.complete_mean(), None);
    }

    #[test]
    fn failures_and_checks_decide_success() {
        let mut t = ResultTable::new("t", "T", vec![row(Some(97.0))]);
        t.checks.push(Check::reported("anomaly", Some(false), "x"));
        assert!(t.success());
        t.checks.push(Check::asserted("order", None, "missing"));
        assert!(!t.success());
        let text = t.to_text();
        assert!(text.contains("NOTE  anomaly (reported only)"));
        assert!(text.contains("N/A   order"));
        let t = ResultTable::new("t", "T", vec![row(None)]);
        assert!(!t.success());
        assert!(t.to_text().contains("diverged"));
    }
}
