//! Metric-by-metric comparison of a run directory against a golden one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::run::{read_manifest, read_metrics, RunError};

/// Allowed deviation. With `factor` set, the ratio actual/golden must lie
/// in `[1/factor, factor]`; otherwise `|actual - golden| <= abs + rel·|golden|`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub factor: Option<f64>,
}

impl Tolerance {
    pub fn accepts(&self, golden: f64, actual: f64) -> bool {
        match self.factor {
            Some(f) => {
                if golden == 0.0 {
                    return actual == 0.0;
                }
                let r = actual / golden;
                r >= 1.0 / f && r <= f
            }
            None => (actual - golden).abs() <= self.abs + self.rel * golden.abs(),
        }
    }

    fn describe(&self) -> String {
        match self.factor {
            Some(f) => format!("x{f}"),
            None if self.rel == 0.0 => format!("±{}", self.abs),
            None if self.abs == 0.0 => format!("±{}%", self.rel * 100.0),
            None => format!("±({} + {}%)", self.abs, self.rel * 100.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub default: Tolerance,
    pub metrics: BTreeMap<String, Tolerance>,
}

impl Tolerances {
    pub fn for_metric(&self, name: &str) -> Tolerance {
        self.metrics.get(name).copied().unwrap_or(self.default)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub golden: f64,
    pub actual: Option<f64>,
    pub tolerance: Tolerance,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoldenReport {
    pub rows: Vec<Comparison>,
    pub problems: Vec<String>,
}

impl GoldenReport {
    pub fn passed(&self) -> bool {
        self.problems.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> Vec<String> {
        self.rows.iter().filter(|r| !r.pass).map(|r| r.metric.clone()).collect()
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<36}{:>14}{:>14}{:>14}  status\n", "metric", "golden", "actual", "allowed");
        for r in &self.rows {
            let actual = r.actual.map_or("missing".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(
                s,
                "{:<36}{:>14.6}{:>14}{:>14}  {}",
                r.metric,
                r.golden,
                actual,
                r.tolerance.describe(),
                if r.pass { "ok" } else { "FAIL" }
            );
        }
        for p in &self.problems {
            let _ = writeln!(s, "problem: {p}");
        }
        let _ = writeln!(
            s,
            "{} of {} metrics within tolerance",
            self.rows.iter().filter(|r| r.pass).count(),
            self.rows.len()
        );
        s
    }
}

/// Compare `run_dir` against `golden_dir`. Tolerances come from
/// `tolerances` or, failing that, `golden_dir/tolerances.json`.
pub fn compare(run_dir: &Path, golden_dir: &Path, tolerances: Option<&Path>) -> Result<GoldenReport, RunError> {
    let run_manifest = read_manifest(run_dir)?;
    let golden_manifest = read_manifest(golden_dir)?;
    let tol_path = tolerances
        .map(Path::to_path_buf)
        .unwrap_or_else(|| golden_dir.join("tolerances.json"));
    let tol: Tolerances = if tol_path.exists() {
        let text = std::fs::read_to_string(&tol_path).map_err(|e| RunError::Io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| RunError::Validation(vec![format!("{}: {e}", tol_path.display())]))?
    } else {
        Tolerances::default()
    };
    let golden = read_metrics(golden_dir)?;
    let actual = read_metrics(run_dir)?;

    let mut report = GoldenReport::default();
    if run_manifest.scenario != golden_manifest.scenario {
        report.problems.push(format!(
            "scenario mismatch: run is {}, golden is {}",
            run_manifest.scenario, golden_manifest.scenario
        ));
    }
    for (name, &g) in &golden {
        let t = tol.for_metric(name);
        let a = actual.get(name).copied();
        report.rows.push(Comparison {
            metric: name.clone(),
            golden: g,
            actual: a,
            tolerance: t,
            pass: a.is_some_and(|a| t.accepts(g, a)),
        });
    }
    Ok(report)
}

/// Markdown table of the run's metrics next to the measured reference values.
pub fn reference_report(metrics: &BTreeMap<String, f64>) -> String {
    use crate::scenario::{KEY_TABLE, LINK_TABLE, SOURCE_TABLE};
    let mut s = String::from("# Run report\n");
    let get = |k: String| metrics.get(&k).map_or("-".to_string(), |v| format!("{v:.4}"));
    let keys: Vec<&str> = LINK_TABLE.iter().map(|l| l.0).collect();
    if keys.iter().any(|k| metrics.contains_key(&format!("tau_c.{k}"))) {
        s.push_str("\n## Source\n\n| edge | tau_c ps | ref | bandwidth MHz | ref | PGR | ref |\n|---|---|---|---|---|---|---|\n");
        for (k, t) in keys.iter().zip(SOURCE_TABLE.iter()) {
            let _ = writeln!(
                s,
                "| {k} | {} | {} | {} | {} | {} | {} |",
                get(format!("tau_c.{k}")), t.2, get(format!("bandwidth.{k}")), t.3, get(format!("pgr.{k}")), t.4
            );
        }
    }
    if keys.iter().any(|k| metrics.contains_key(&format!("visibility_raw.{k}"))) {
        s.push_str("\n## Fringes\n\n| edge | raw V | ref | net V | ref |\n|---|---|---|---|---|\n");
        for (k, l) in keys.iter().zip(LINK_TABLE.iter()) {
            let _ = writeln!(
                s,
                "| {k} | {} | {} | {} | {} |",
                get(format!("visibility_raw.{k}")), l.6, get(format!("visibility_net.{k}")), l.8
            );
        }
    }
    if keys.iter().any(|k| metrics.contains_key(&format!("skr.{k}"))) {
        s.push_str("\n## Key distribution\n\n| edge | sifted | ref | QBER | ref | SKR | ref |\n|---|---|---|---|---|---|---|\n");
        for (k, q) in keys.iter().zip(KEY_TABLE.iter()) {
            let _ = writeln!(
                s,
                "| {k} | {} | {} | {} | {} | {} | {} |",
                get(format!("sifted.{k}")), q.1, get(format!("qber.{k}")), q.3, get(format!("skr.{k}")), q.4
            );
        }
    }
    s.push_str("\n## All metrics\n\n| metric | value |\n|---|---|\n");
    for (k, v) in metrics {
        let _ = writeln!(s, "| {k} | {v} |");
    }
    s
}
