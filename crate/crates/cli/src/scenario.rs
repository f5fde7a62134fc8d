//! Scenario configuration, shipped presets and the measured reference tables.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use qnet_core::control::{DriftModel, LoopTiming, PidGains};
use qnet_core::detection_sim::DetectorSpec;
use qnet_core::franson::InterferometerConfig;
use qnet_core::planner::{self, EdgeAssignment, NetworkPlan};
use qnet_core::spectral_grid::{Channel, ResonatorSpec};
use qnet_core::{Error, Result};

/// Per channel-pair source characterization:
/// (signal, idler, τc ps, bandwidth MHz, PGR s⁻¹mW⁻², PGR per MHz, loss dB, jitter ps).
pub const SOURCE_TABLE: [(i32, i32, f64, f64, f64, f64, f64, f64); 6] = [
    (37, 33, 250.8, 634.7, 7.22e3, 11.4, -10.29, 138.3),
    (38, 32, 234.4, 678.9, 8.70e3, 12.8, -11.22, 133.9),
    (39, 31, 245.0, 649.7, 7.27e3, 11.2, -10.82, 136.4),
    (40, 30, 254.6, 625.2, 9.55e3, 15.3, -11.00, 127.0),
    (41, 29, 242.2, 657.1, 7.92e3, 12.1, -11.12, 139.8),
    (42, 28, 244.6, 650.7, 9.51e3, 14.6, -11.85, 128.1),
];

/// Per user-pair link measurements with the analyzers in place:
/// (edge key, signal, idler, detected brightness, signal loss dB, idler loss dB,
/// raw V, raw V err, net V, net V err).
pub const LINK_TABLE: [(&str, i32, i32, f64, f64, f64, f64, f64, f64, f64); 6] = [
    ("alice_bob", 37, 33, 0.78e-2, -14.29, -13.20, 0.9270, 0.0070, 0.9953, 0.0017),
    ("alice_chloe", 38, 32, 0.58e-2, -14.90, -13.12, 0.9050, 0.0090, 0.9767, 0.0044),
    ("alice_dave", 39, 31, 0.40e-2, -15.27, -15.30, 0.8556, 0.0137, 0.9670, 0.0065),
    ("bob_chloe", 40, 30, 0.46e-2, -14.03, -14.01, 0.9189, 0.0094, 0.9983, 0.0013),
    ("bob_dave", 41, 29, 0.47e-2, -13.86, -14.67, 0.9125, 0.0097, 0.9893, 0.0032),
    ("chloe_dave", 42, 28, 0.44e-2, -14.29, -14.56, 0.8948, 0.0110, 0.9687, 0.0059),
];

/// 2000 s key-distribution results per user pair:
/// (edge key, total sifted bits, visibility, QBER, SKR bit/s).
pub const KEY_TABLE: [(&str, f64, f64, f64, f64); 6] = [
    ("alice_bob", 7.28e5, 0.9389, 0.0306, 206.0),
    ("alice_chloe", 8.12e5, 0.9485, 0.0257, 252.0),
    ("alice_dave", 7.13e5, 0.9465, 0.0267, 217.0),
    ("bob_chloe", 7.60e5, 0.9504, 0.0248, 240.0),
    ("bob_dave", 7.22e5, 0.9382, 0.0309, 203.0),
    ("chloe_dave", 6.18e5, 0.9418, 0.0291, 180.0),
];

pub const PRESETS: [&str; 5] = [
    "paper_4user",
    "power_sweep_fig2b",
    "fringes_fig4",
    "qkd_tableS3",
    "stabilize_figS8",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Plan,
    Simulate,
    Characterize,
    Sweep,
    Fringe,
    Qkd,
    Stabilize,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Stage> {
        Some(match s.trim() {
            "plan" => Stage::Plan,
            "simulate" => Stage::Simulate,
            "characterize" => Stage::Characterize,
            "sweep" => Stage::Sweep,
            "fringe" => Stage::Fringe,
            "qkd" => Stage::Qkd,
            "stabilize" => Stage::Stabilize,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Plan => "plan",
            Stage::Simulate => "simulate",
            Stage::Characterize => "characterize",
            Stage::Sweep => "sweep",
            Stage::Fringe => "fringe",
            Stage::Qkd => "qkd",
            Stage::Stabilize => "stabilize",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzerMode {
    /// No interferometers: detectors sit directly on the demultiplexer.
    Direct,
    /// One monitored output per Franson interferometer.
    SinglePort,
    /// Both interferometer outputs detected.
    DualPort,
    /// Passive basis choice between Z and X two-port interferometers.
    Bbm92,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkInputs {
    pub users: usize,
    pub user_labels: Option<Vec<String>>,
    pub pump_channel: i32,
    pub available_channels: Vec<i32>,
    /// Channels within this many grid slots of the pump are not used.
    pub exclusion_radius: i32,
    pub delay_step_ns: f64,
    pub identification_window_ns: f64,
}

impl Default for NetworkInputs {
    fn default() -> Self {
        NetworkInputs {
            users: 4,
            user_labels: None,
            pump_channel: 35,
            available_channels: (28..=42).filter(|c| *c != 35).collect(),
            exclusion_radius: 1,
            delay_step_ns: 10.0,
            identification_window_ns: 2.5,
        }
    }
}

/// Per-edge source parameters that differ from the defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeSource {
    pub pgr_per_mw2: Option<f64>,
    pub coherence_time_ps: Option<f64>,
    /// Measured two-detector timing jitter (Gaussian σ of the coincidence peak).
    pub jitter_ps: Option<f64>,
    /// Intrinsic two-photon visibility of the analyzers on this edge.
    pub visibility: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSettings {
    pub pgr_per_mw2: f64,
    pub pump_power_mw: f64,
    pub coherence_time_ps: f64,
    pub pump_coherence_time_us: f64,
    /// Keyed by edge key (`alice_bob`).
    pub edges: BTreeMap<String, EdgeSource>,
}

impl Default for SourceSettings {
    fn default() -> Self {
        let edges = SOURCE_TABLE
            .iter()
            .zip(LINK_TABLE.iter())
            .map(|(s, l)| {
                (
                    l.0.to_string(),
                    EdgeSource {
                        pgr_per_mw2: Some(s.4),
                        coherence_time_ps: Some(s.2),
                        jitter_ps: Some(s.7),
                        visibility: Some(l.6),
                    },
                )
            })
            .collect();
        SourceSettings {
            pgr_per_mw2: 8.3e3,
            pump_power_mw: 1.0,
            coherence_time_ps: 250.8,
            pump_coherence_time_us: 2.7,
            edges,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSettings {
    /// Uncorrelated photons per channel per mW of pump, referred to the chip
    /// output (before channel loss).
    pub background_per_mw: f64,
    /// Constant uncorrelated photon rate per channel at the chip output,
    /// e.g. residual pump leakage.
    pub residual_rate: f64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings {
            background_per_mw: 0.0,
            residual_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzerSettings {
    pub mode: AnalyzerMode,
    pub interferometer: InterferometerConfig,
    /// Fixed phase offset per user label.
    pub phase_offsets: BTreeMap<String, f64>,
    /// Intrinsic visibility for edges without an override.
    pub default_visibility: f64,
}

impl Default for AnalyzerSettings {
    fn default() -> Self {
        AnalyzerSettings {
            mode: AnalyzerMode::SinglePort,
            interferometer: InterferometerConfig::default(),
            phase_offsets: BTreeMap::new(),
            default_visibility: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSettings {
    pub bin_width_ps: f64,
    pub span_ns: f64,
    pub window_ns: f64,
}

impl Default for HistogramSettings {
    fn default() -> Self {
        HistogramSettings {
            bin_width_ps: 156.25,
            span_ns: 50.0,
            window_ns: 2.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSweep {
    pub powers_mw: Vec<f64>,
    /// Each point runs until about this many coincidences are expected.
    pub target_coincidences: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

impl Default for PowerSweep {
    fn default() -> Self {
        PowerSweep {
            powers_mw: vec![0.05, 0.64, 1.5, 3.0, 5.0],
            target_coincidences: 1e4,
            min_duration_s: 10.0,
            max_duration_s: 15_000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSweepSettings {
    pub start_rad: f64,
    pub stop_rad: f64,
    pub steps: usize,
    pub seconds_per_point: f64,
}

impl Default for PhaseSweepSettings {
    fn default() -> Self {
        PhaseSweepSettings {
            start_rad: 0.0,
            stop_rad: 11.0 * PI / 6.0,
            steps: 12,
            seconds_per_point: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QkdSettings {
    pub duration_s: f64,
    pub window_s: f64,
    pub f_ec: f64,
    /// Run the four interferometer phase locks under drift during the session.
    pub phase_locked: bool,
}

impl Default for QkdSettings {
    fn default() -> Self {
        QkdSettings {
            duration_s: 2000.0,
            window_s: 10.0,
            f_ec: 1.2,
            phase_locked: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSettings {
    pub pump_drift: DriftModel,
    pub pump_gains: PidGains,
    pub initial_detuning_mhz: f64,
    pub phase_drift: DriftModel,
    pub phase_gains: PidGains,
    pub timing: LoopTiming,
}

impl Default for ControlSettings {
    fn default() -> Self {
        ControlSettings {
            pump_drift: DriftModel::resonance_default(),
            pump_gains: PidGains::pump_default(),
            initial_detuning_mhz: 0.0,
            phase_drift: DriftModel::phase_default(),
            phase_gains: PidGains::phase_default(),
            timing: LoopTiming {
                duration_s: 3.0 * 3600.0,
                ..LoopTiming::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub stages: Vec<Stage>,
    /// Restrict per-edge stages to these edge keys (all edges when empty).
    pub edges: Vec<String>,
    pub duration_s: f64,
    pub resonator: ResonatorSpec,
    pub network: NetworkInputs,
    pub source: SourceSettings,
    /// Chip-to-detector loss per channel index (negative dB).
    pub channel_loss_db: BTreeMap<i32, f64>,
    pub detector: DetectorSpec,
    pub noise: NoiseSettings,
    pub analyzer: AnalyzerSettings,
    pub histogram: HistogramSettings,
    pub power_sweep: PowerSweep,
    pub phase_sweep: PhaseSweepSettings,
    pub qkd: QkdSettings,
    pub control: ControlSettings,
}

/// Loss per channel with the interferometers and full network in place.
pub fn link_losses() -> BTreeMap<i32, f64> {
    LINK_TABLE
        .iter()
        .flat_map(|l| [(l.1, l.4), (l.2, l.5)])
        .collect()
}

/// Per-arm loss seen directly at the demultiplexer outputs.
pub fn characterization_losses() -> BTreeMap<i32, f64> {
    SOURCE_TABLE
        .iter()
        .flat_map(|s| [(s.0, s.6), (s.1, s.6)])
        .collect()
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "custom".into(),
            seed: 1,
            stages: vec![Stage::Plan],
            edges: Vec::new(),
            duration_s: 10.0,
            resonator: ResonatorSpec::default(),
            network: NetworkInputs::default(),
            source: SourceSettings::default(),
            channel_loss_db: link_losses(),
            detector: DetectorSpec::default(),
            noise: NoiseSettings::default(),
            analyzer: AnalyzerSettings::default(),
            histogram: HistogramSettings::default(),
            power_sweep: PowerSweep::default(),
            phase_sweep: PhaseSweepSettings::default(),
            qkd: QkdSettings::default(),
            control: ControlSettings::default(),
        }
    }
}

impl Scenario {
    pub fn preset(name: &str) -> Option<Scenario> {
        let base = Scenario {
            name: name.to_string(),
            ..Scenario::default()
        };
        Some(match name {
            // Full four-user network behind single-port analyzers at the
            // Fig. 3 operating point.
            "paper_4user" => Scenario {
                stages: vec![Stage::Plan, Stage::Simulate, Stage::Characterize],
                duration_s: 10.0,
                source: SourceSettings {
                    pump_power_mw: 8.0,
                    ..SourceSettings::default()
                },
                noise: NoiseSettings {
                    background_per_mw: 3.2e5,
                    ..NoiseSettings::default()
                },
                ..base
            },
            // Coincidences and CAR against pump power for CH37/CH33 straight
            // from the demultiplexer. The pump-proportional background is
            // set so that the low-power CAR peak lands near 137.
            "power_sweep_fig2b" => Scenario {
                stages: vec![Stage::Sweep],
                edges: vec!["alice_bob".into()],
                channel_loss_db: characterization_losses(),
                noise: NoiseSettings {
                    background_per_mw: 1.38e5,
                    ..NoiseSettings::default()
                },
                analyzer: AnalyzerSettings {
                    mode: AnalyzerMode::Direct,
                    ..AnalyzerSettings::default()
                },
                histogram: HistogramSettings {
                    span_ns: 200.0,
                    ..HistogramSettings::default()
                },
                ..base
            },
            // Phase sweeps for all six pairs. The analyzers carry the
            // accidental-free visibility and the background is calibrated
            // so the raw fringes match the measured ones.
            "fringes_fig4" => Scenario {
                stages: vec![Stage::Fringe],
                source: SourceSettings {
                    pump_power_mw: 8.0,
                    edges: edges_with_visibility(|i| LINK_TABLE[i].8),
                    ..SourceSettings::default()
                },
                noise: NoiseSettings {
                    background_per_mw: 3.2e5,
                    ..NoiseSettings::default()
                },
                ..base
            },
            // 2000 s BBM92 sessions on all six pairs with the measured link
            // losses and raw visibilities.
            "qkd_tableS3" => Scenario {
                stages: vec![Stage::Qkd],
                source: SourceSettings {
                    pump_power_mw: 12.0,
                    ..SourceSettings::default()
                },
                analyzer: AnalyzerSettings {
                    mode: AnalyzerMode::Bbm92,
                    interferometer: InterferometerConfig {
                        ports: 2,
                        ..InterferometerConfig::default()
                    },
                    ..AnalyzerSettings::default()
                },
                ..base
            },
            "stabilize_figS8" => Scenario {
                stages: vec![Stage::Stabilize],
                ..base
            },
            _ => return None,
        })
    }

    pub fn from_json(text: &str) -> Result<Scenario> {
        serde_json::from_str(text).map_err(|e| Error::Configuration(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", path.display())))?;
        Scenario::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn pump(&self) -> Result<Channel> {
        Channel::new(self.network.pump_channel)
    }

    pub fn plan(&self) -> Result<NetworkPlan> {
        let pump = self.pump()?;
        let available = self
            .network
            .available_channels
            .iter()
            .map(|&c| Channel::new(c))
            .collect::<Result<Vec<_>>>()?;
        let exclusions = planner::default_exclusions(pump, self.network.exclusion_radius);
        let users = match &self.network.user_labels {
            Some(labels) => {
                if labels.len() != self.network.users {
                    return Err(Error::Configuration(format!(
                        "{} user labels for {} users",
                        labels.len(),
                        self.network.users
                    )));
                }
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| planner::UserId::new(i, l.clone()))
                    .collect()
            }
            None => planner::default_users(self.network.users),
        };
        planner::plan_network_with_users(users, pump, &available, &exclusions)
    }

    pub fn selected_edges<'a>(&self, plan: &'a NetworkPlan) -> Vec<(usize, &'a EdgeAssignment)> {
        plan.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| self.edges.is_empty() || self.edges.contains(&e.key()))
            .collect()
    }

    pub fn edge_source(&self, edge: &EdgeAssignment) -> EdgeSource {
        self.source.edges.get(&edge.key()).cloned().unwrap_or_default()
    }

    pub fn pgr(&self, edge: &EdgeAssignment) -> f64 {
        self.edge_source(edge).pgr_per_mw2.unwrap_or(self.source.pgr_per_mw2)
    }

    pub fn jitter(&self, edge: &EdgeAssignment) -> f64 {
        self.edge_source(edge)
            .jitter_ps
            .unwrap_or(self.detector.jitter_sigma_ps)
    }

    pub fn coherence_time(&self, edge: &EdgeAssignment) -> f64 {
        self.edge_source(edge)
            .coherence_time_ps
            .unwrap_or(self.source.coherence_time_ps)
    }

    pub fn visibility(&self, edge: &EdgeAssignment) -> f64 {
        self.edge_source(edge)
            .visibility
            .unwrap_or(self.analyzer.default_visibility)
    }

    pub fn loss_db(&self, channel: Channel) -> f64 {
        self.channel_loss_db.get(&channel.index()).copied().unwrap_or(0.0)
    }

    pub fn phase_offset(&self, user: &str) -> f64 {
        self.analyzer.phase_offsets.get(user).copied().unwrap_or(0.0)
    }

    /// Every problem with the configuration, one message each.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        push(self.resonator.validate());
        push(self.detector.validate());
        if !(self.duration_s > 0.0) {
            problems.push(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if !(self.source.pump_power_mw >= 0.0) {
            problems.push("source.pump_power_mw must be non-negative".into());
        }
        if self.analyzer.mode != AnalyzerMode::Direct {
            let tau_max = self
                .source
                .edges
                .values()
                .filter_map(|e| e.coherence_time_ps)
                .fold(self.source.coherence_time_ps, f64::max);
            if let Err(e) = self
                .analyzer
                .interferometer
                .validate(tau_max, self.source.pump_coherence_time_us)
            {
                problems.push(e.to_string());
            }
            let needs_two = matches!(self.analyzer.mode, AnalyzerMode::DualPort | AnalyzerMode::Bbm92);
            if needs_two && self.analyzer.interferometer.ports != 2 {
                problems.push("two-port analyzer modes need interferometer.ports = 2".into());
            }
        }
        if !(0.0..=1.0).contains(&self.analyzer.default_visibility) {
            problems.push("analyzer.default_visibility outside [0, 1]".into());
        }
        for (key, e) in &self.source.edges {
            if let Some(v) = e.visibility {
                if !(0.0..=1.0).contains(&v) {
                    problems.push(format!("source.edges.{key}.visibility = {v} outside [0, 1]"));
                }
            }
            if let Some(p) = e.pgr_per_mw2 {
                if !(p >= 0.0) {
                    problems.push(format!("source.edges.{key}.pgr_per_mw2 must be non-negative"));
                }
            }
        }
        for (c, l) in &self.channel_loss_db {
            if !(*l <= 0.0) {
                problems.push(format!("channel_loss_db.{c} = {l} must be <= 0"));
            }
        }
        let h = &self.histogram;
        if !(h.bin_width_ps > 0.0 && h.window_ns > 0.0 && h.span_ns >= 3.0 * h.window_ns) {
            problems.push("histogram span must cover at least 3 windows".into());
        }
        if self.stages.contains(&Stage::Fringe) {
            let s = &self.phase_sweep;
            if s.steps < 5 || (s.stop_rad - s.start_rad).abs() < PI {
                problems.push("phase_sweep needs >= 5 steps spanning >= pi".into());
            }
        }
        if self.stages.contains(&Stage::Sweep) && self.power_sweep.powers_mw.len() < 2 {
            problems.push("power_sweep needs at least two powers".into());
        }
        match self.plan() {
            Ok(plan) => {
                let known: Vec<String> = plan.edges.iter().map(|e| e.key()).collect();
                for e in self.edges.iter().chain(self.source.edges.keys()) {
                    if !known.contains(e) {
                        problems.push(format!("edge {e} is not part of the plan"));
                    }
                }
                let used: Vec<i32> = plan
                    .edges
                    .iter()
                    .flat_map(|e| e.channels())
                    .map(|c| c.index())
                    .collect();
                for c in self.channel_loss_db.keys() {
                    if !used.contains(c) {
                        problems.push(format!("channel_loss_db references unused channel {c}"));
                    }
                }
                match planner::assign_delays(
                    &plan,
                    self.network.delay_step_ns,
                    self.network.identification_window_ns,
                ) {
                    Ok(schedule) => problems.extend(planner::verify_plan(&plan, &schedule)),
                    Err(e) => problems.push(e.to_string()),
                }
            }
            Err(e) => problems.push(e.to_string()),
        }
        problems
    }
}

fn edges_with_visibility(v: impl Fn(usize) -> f64) -> BTreeMap<String, EdgeSource> {
    let mut edges = SourceSettings::default().edges;
    for (i, l) in LINK_TABLE.iter().enumerate() {
        if let Some(e) = edges.get_mut(l.0) {
            e.visibility = Some(v(i));
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let s = Scenario::preset(name).unwrap();
            assert!(s.validate().is_empty(), "{name}: {:?}", s.validate());
            let back = Scenario::from_json(&s.to_json()).unwrap();
            assert_eq!(back, s);
        }
        assert!(Scenario::preset("nope").is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Scenario::from_json(r#"{"seed": 3, "bogus": 1}"#).is_err());
        assert!(Scenario::from_json(r#"{"source": {"pump_power": 3}}"#).is_err());
        let s = Scenario::from_json(r#"{"seed": 3}"#).unwrap();
        assert_eq!(s.seed, 3);
    }

    #[test]
    fn validation_collects_every_problem() {
        let mut s = Scenario::default();
        s.duration_s = 0.0;
        s.channel_loss_db.insert(37, 2.0);
        s.edges = vec!["alice_zed".into()];
        let p = s.validate();
        assert!(p.len() >= 3, "{p:?}");
    }

    #[test]
    fn tables_are_consistent_with_the_plan() {
        let plan = Scenario::default().plan().unwrap();
        for (e, (s, l)) in plan.edges.iter().zip(SOURCE_TABLE.iter().zip(LINK_TABLE.iter())) {
            assert_eq!(e.key(), l.0);
            assert_eq!((e.signal_channel.index(), e.idler_channel.index()), (s.0, s.1));
            assert_eq!((l.1, l.2), (s.0, s.1));
        }
        for (k, l) in KEY_TABLE.iter().zip(LINK_TABLE.iter()) {
            assert_eq!(k.0, l.0);
        }
    }
}
