use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qnet_cli::golden;
use qnet_cli::run::{self, RunError};
use qnet_cli::scenario::{Scenario, Stage, PRESETS};
use qnet_core::analysis::{build_histogram, cc_ac_car, fit_correlation, FitModel};
use qnet_core::detection_sim::TimeTagStream;

#[derive(Parser)]
#[command(name = "qnet", version, about = "Entanglement-distribution network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario (ignored when --config is given).
    #[arg(long)]
    preset: Option<String>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated stages to run instead of the subcommand's default.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Channel and delay assignment.
    Plan(Common),
    /// Whole-network time-tag simulation.
    Simulate(Common),
    /// Characterization, power sweep and fringe stages, or analysis of a saved tag file.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Binary time-tag file to analyze instead of simulating.
        #[arg(long)]
        tags: Option<PathBuf>,
        /// Detector ids `a,b` of the histogram (delays b - a).
        #[arg(long, value_delimiter = ',', num_args = 2)]
        detectors: Vec<u32>,
    },
    /// BBM92 key distribution sessions.
    Qkd(Common),
    /// Pump-follow and interferometer phase locks.
    Stabilize(Common),
    /// Every stage listed in the scenario.
    Run(Common),
    /// Summarize a run directory against the measured reference tables.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a run directory with a golden one.
    Compare {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        golden: PathBuf,
        #[arg(long)]
        tolerances: Option<PathBuf>,
    },
    /// Print a preset as JSON.
    Preset { name: String },
}

fn load(common: &Common) -> Result<Scenario, RunError> {
    let mut scn = match (&common.config, &common.preset) {
        (Some(path), _) => Scenario::load(path).map_err(|e| RunError::Validation(vec![e.to_string()]))?,
        (None, Some(name)) => Scenario::preset(name).ok_or_else(|| {
            RunError::Validation(vec![format!("unknown preset {name}; available: {}", PRESETS.join(", "))])
        })?,
        (None, None) => return Err(RunError::Validation(vec!["either --config or --preset is required".into()])),
    };
    if let Some(seed) = common.seed {
        scn.seed = seed;
    }
    Ok(scn)
}

fn stages_for(common: &Common, scn: &Scenario, default: &[Stage]) -> Result<Vec<Stage>, RunError> {
    if common.stages.is_empty() {
        return Ok(default.to_vec());
    }
    let mut bad = Vec::new();
    let stages: Vec<Stage> = common
        .stages
        .iter()
        .filter_map(|s| {
            let st = Stage::parse(s);
            if st.is_none() {
                bad.push(format!("unknown stage {s}"));
            }
            st
        })
        .collect();
    if !bad.is_empty() {
        return Err(RunError::Validation(bad));
    }
    let _ = scn;
    Ok(stages)
}

fn run_with(common: &Common, default: impl Fn(&Scenario) -> Vec<Stage>) -> Result<(), RunError> {
    let scn = load(common)?;
    let stages = stages_for(common, &scn, &default(&scn))?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&scn.name));
    let report = run::run_scenario(&scn, &stages, &out)?;
    for line in &report.summary {
        println!("{line}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn analyze_tags(path: &Path, detectors: &[u32], common: &Common) -> Result<(), RunError> {
    let scn = match (&common.config, &common.preset) {
        (None, None) => Scenario::default(),
        _ => load(common)?,
    };
    let [a, b] = detectors else {
        return Err(RunError::Validation(vec!["--detectors a,b is required with --tags".into()]));
    };
    let file = std::fs::File::open(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    let stream = TimeTagStream::read_binary(std::io::BufReader::new(file), scn.duration_s, scn.detector.resolution_ps)
        .map_err(|e| RunError::Io(e.to_string()))?;
    let h = build_histogram(
        &stream.bins_of(*a),
        &stream.bins_of(*b),
        stream.resolution_ps,
        scn.histogram.bin_width_ps,
        scn.histogram.span_ns,
    );
    let runtime = |e: qnet_core::Error| RunError::Stage {
        stage: Stage::Characterize,
        message: e.to_string(),
    };
    let car = cc_ac_car(&h, scn.histogram.window_ns, 0.0, 1).map_err(runtime)?;
    println!("detectors {a},{b}: CC {} AC {:.3} CAR {:.2}", car.cc, car.ac, car.car);
    match fit_correlation(&h, FitModel::ExponentialGaussian) {
        Ok(fit) => println!(
            "fit: center {:.1} ps, tau_c {:.1} ps, sigma {:.1} ps",
            fit.params.center_ps,
            fit.tau_c_ps(),
            fit.sigma_ps()
        ),
        Err(e) => println!("fit: {e}"),
    }
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out).map_err(|e| RunError::Io(e.to_string()))?;
        std::fs::write(out.join(format!("hist_{a}_{b}.csv")), h.to_csv()).map_err(|e| RunError::Io(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode, RunError> {
    match cli.command {
        Command::Plan(c) => run_with(&c, |_| vec![Stage::Plan])?,
        Command::Simulate(c) => run_with(&c, |_| vec![Stage::Simulate])?,
        Command::Analyze { common, tags, detectors } => match tags {
            Some(path) => analyze_tags(&path, &detectors, &common)?,
            None => run_with(&common, |s| {
                let picked: Vec<Stage> = s
                    .stages
                    .iter()
                    .copied()
                    .filter(|st| matches!(st, Stage::Characterize | Stage::Sweep | Stage::Fringe))
                    .collect();
                if picked.is_empty() {
                    vec![Stage::Characterize]
                } else {
                    picked
                }
            })?,
        },
        Command::Qkd(c) => run_with(&c, |_| vec![Stage::Qkd])?,
        Command::Stabilize(c) => run_with(&c, |_| vec![Stage::Stabilize])?,
        Command::Run(c) => run_with(&c, |s| s.stages.clone())?,
        Command::Report { out } => {
            let metrics = run::read_metrics(&out)?;
            let text = golden::reference_report(&metrics);
            std::fs::write(out.join("report.md"), &text).map_err(|e| RunError::Io(e.to_string()))?;
            print!("{text}");
        }
        Command::Compare { run, golden, tolerances } => {
            let report = golden::compare(&run, &golden, tolerances.as_deref())?;
            print!("{}", report.table());
            if !report.passed() {
                eprintln!("golden mismatch: {}", report.failures().join(", "));
                return Ok(ExitCode::from(3));
            }
        }
        Command::Preset { name } => match Scenario::preset(&name) {
            Some(s) => println!("{}", s.to_json()),
            None => {
                return Err(RunError::Validation(vec![format!(
                    "unknown preset {name}; available: {}",
                    PRESETS.join(", ")
                )]))
            }
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprint!("{e}");
            if !matches!(e, RunError::Validation(_)) {
                eprintln!();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
