//! Stage orchestration and the run directory layout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scenario::{Scenario, Stage};
use crate::stages::{self, StageOutput};

#[derive(Debug)]
pub enum RunError {
    /// Every problem found in the configuration.
    Validation(Vec<String>),
    Stage { stage: Stage, message: String },
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 1,
            RunError::Stage { .. } | RunError::Io(_) => 2,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Validation(problems) => {
                writeln!(f, "invalid configuration ({} problems):", problems.len())?;
                for p in problems {
                    writeln!(f, "  - {p}")?;
                }
                Ok(())
            }
            RunError::Stage { stage, message } => write!(f, "stage {} failed: {message}", stage.name()),
            RunError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub seed: u64,
    pub config_sha256: String,
    pub version: String,
    pub stages: Vec<Stage>,
    /// SHA-256 of every artifact, by relative path.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub metrics: BTreeMap<String, f64>,
    pub summary: Vec<String>,
    pub out_dir: PathBuf,
}

/// Execute `stages` in order and collect their outputs in memory.
pub fn execute(scn: &Scenario, stages: &[Stage]) -> Result<StageOutput, RunError> {
    let problems = scn.validate();
    if !problems.is_empty() {
        return Err(RunError::Validation(problems));
    }
    let plan = scn.plan().map_err(|e| RunError::Validation(vec![e.to_string()]))?;
    let mut out = StageOutput::default();
    for &stage in stages {
        let r = match stage {
            Stage::Plan => stages::plan_stage(scn, &plan),
            Stage::Simulate => stages::simulate_stage(scn, &plan),
            Stage::Characterize => stages::characterize_stage(scn, &plan),
            Stage::Sweep => stages::sweep_stage(scn, &plan),
            Stage::Fringe => stages::fringe_stage(scn, &plan),
            Stage::Qkd => stages::qkd_stage(scn, &plan),
            Stage::Stabilize => stages::stabilize_stage(scn, &plan),
        };
        let part = r.map_err(|e| RunError::Stage {
            stage,
            message: e.to_string(),
        })?;
        out.summary.push(format!("== {} ==", stage.name()));
        out.files.extend(part.files);
        out.metrics.extend(part.metrics);
        out.summary.extend(part.summary);
    }
    Ok(out)
}

/// Execute and write every artifact plus `metrics.json`, `summary.txt`,
/// `config.json` and `manifest.json` under `out_dir`.
pub fn run_scenario(scn: &Scenario, stages: &[Stage], out_dir: &Path) -> Result<RunReport, RunError> {
    let out = execute(scn, stages)?;
    let io = |e: std::io::Error| RunError::Io(e.to_string());
    std::fs::create_dir_all(out_dir).map_err(io)?;

    // Non-finite values (an infinite CAR, say) have no JSON form.
    let metrics: BTreeMap<String, f64> = out
        .metrics
        .iter()
        .filter(|(_, v)| v.is_finite())
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let config = scn.to_json() + "\n";
    let mut files = out.files;
    files.push(("metrics.json".into(), (serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n").into()));
    files.push(("summary.txt".into(), (out.summary.join("\n") + "\n").into()));
    files.push(("config.json".into(), config.clone().into()));

    let mut hashes = BTreeMap::new();
    for (name, body) in &files {
        std::fs::write(out_dir.join(name), body).map_err(io)?;
        hashes.insert(name.clone(), sha256_hex(body));
    }
    let manifest = Manifest {
        scenario: scn.name.clone(),
        seed: scn.seed,
        config_sha256: sha256_hex(config.as_bytes()),
        version: env!("CARGO_PKG_VERSION").to_string(),
        stages: stages.to_vec(),
        files: hashes,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )
    .map_err(io)?;
    Ok(RunReport {
        metrics: out.metrics,
        summary: out.summary,
        out_dir: out_dir.to_path_buf(),
    })
}

pub fn read_metrics(dir: &Path) -> Result<BTreeMap<String, f64>, RunError> {
    let text = std::fs::read_to_string(dir.join("metrics.json"))
        .map_err(|e| RunError::Io(format!("{}: {e}", dir.join("metrics.json").display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Io(format!("metrics.json: {e}")))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, RunError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| RunError::Io(format!("{}: {e}", dir.join("manifest.json").display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Io(format!("manifest.json: {e}")))
}
