//! The individual pipeline stages. Each returns its artifacts and metrics;
//! writing them to disk is left to the caller.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;

use qnet_core::analysis::{
    bandwidth_from_tau, cc_ac_car, fit_correlation, fit_fringe, rate_summary, CarResult, FitModel, Histogram,
    HistogramAccumulator,
};
use qnet_core::control::{phase_error_qber, phase_lock, pump_follow, LockStatus, LoopTiming};
use qnet_core::detection_sim::{DetectorInfo, DetectorSpec, TimeTag, TimeTagStream};
use qnet_core::franson::{phase_sweep, singles_rate_check};
use qnet_core::planner::{self, DelaySchedule, EdgeAssignment, NetworkPlan};
use qnet_core::qkd::{QkdSessionReport, SessionAccumulator};
use qnet_core::rng::substream_seed;
use qnet_core::source_sim::SourceConfig;
use qnet_core::spectral_grid::Channel;
use qnet_core::{Error, Result};

use crate::pipeline::{self, BasisMatcher, Link, NoiseSource, Setup};
use crate::scenario::{AnalyzerMode, Scenario};

#[derive(Clone, Debug, Default)]
pub struct StageOutput {
    /// Relative path and contents.
    pub files: Vec<(String, Vec<u8>)>,
    pub metrics: BTreeMap<String, f64>,
    /// Human-readable summary lines.
    pub summary: Vec<String>,
}

impl StageOutput {
    fn file(&mut self, name: impl Into<String>, body: impl Into<Vec<u8>>) {
        self.files.push((name.into(), body.into()));
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    fn absorb(&mut self, other: StageOutput) {
        self.files.extend(other.files);
        self.metrics.extend(other.metrics);
        self.summary.extend(other.summary);
    }
}

fn noise_id(channel: Channel) -> u64 {
    (channel.index() + 1000) as u64
}

/// Key used in metric names for a pump power: `p0.64`.
pub fn power_key(p: f64) -> String {
    format!("p{p}")
}

/// Everything needed to simulate one edge in isolation.
struct EdgeSim<'a> {
    scn: &'a Scenario,
    index: usize,
    edge: &'a EdgeAssignment,
}

impl<'a> EdgeSim<'a> {
    fn analyzer_loss_db(&self, mode: AnalyzerMode) -> f64 {
        if mode == AnalyzerMode::Direct {
            0.0
        } else {
            self.scn.analyzer.interferometer.insertion_loss_db
        }
    }

    fn eta(&self, channel: Channel, mode: AnalyzerMode) -> f64 {
        pipeline::transmission(self.scn.loss_db(channel), self.analyzer_loss_db(mode))
    }

    fn source(&self, power_mw: f64) -> SourceConfig {
        SourceConfig {
            pgr_per_mw2: self.scn.pgr(self.edge),
            pump_power_mw: power_mw,
            coherence_time_ps: self.scn.coherence_time(self.edge),
            pump_coherence_time_us: self.scn.source.pump_coherence_time_us,
            duration_s: 10.0,
            seed: 0,
        }
    }

    fn link(&self, power_mw: f64, mode: AnalyzerMode, slots: (usize, usize), delays_ps: (f64, f64)) -> Link {
        Link {
            edge_id: self.index,
            source: self.source(power_mw),
            slot_a: slots.0,
            slot_b: slots.1,
            eta_a: self.eta(self.edge.signal_channel, mode),
            eta_b: self.eta(self.edge.idler_channel, mode),
            delay_a_ps: delays_ps.0,
            delay_b_ps: delays_ps.1,
            visibility: self.scn.visibility(self.edge),
        }
    }

    fn noise(&self, power_mw: f64, mode: AnalyzerMode, slots: (usize, usize), delays_ps: (f64, f64)) -> Vec<NoiseSource> {
        let n = &self.scn.noise;
        let at_chip = n.background_per_mw * power_mw + n.residual_rate;
        if at_chip <= 0.0 {
            return Vec::new();
        }
        [
            (self.edge.signal_channel, slots.0, delays_ps.0),
            (self.edge.idler_channel, slots.1, delays_ps.1),
        ]
        .into_iter()
        .map(|(c, slot, delay_ps)| NoiseSource {
            channel_id: noise_id(c),
            slot,
            rate_per_s: at_chip * self.eta(c, mode),
            delay_ps,
        })
        .collect()
    }

    fn detector(&self) -> DetectorSpec {
        DetectorSpec {
            jitter_sigma_ps: self.scn.jitter(self.edge),
            ..self.scn.detector.clone()
        }
    }

    /// Two-slot setup for this edge alone.
    fn setup(&self, mode: AnalyzerMode, power_mw: f64, duration_s: f64, seed: u64, phases: [f64; 2]) -> Setup {
        let slots = (0, 1);
        let offsets = vec![
            self.scn.phase_offset(&self.edge.user_a.label),
            self.scn.phase_offset(&self.edge.user_b.label),
        ];
        Setup {
            mode,
            interferometer: self.scn.analyzer.interferometer.clone(),
            phases: phases.to_vec(),
            offsets,
            locks: None,
            detectors: vec![self.detector(); 2],
            duration_s,
            seed,
            links: vec![self.link(power_mw, mode, slots, (0.0, 0.0))],
            noise: self.noise(power_mw, mode, slots, (0.0, 0.0)),
        }
    }

    fn key(&self) -> String {
        self.edge.key()
    }
}

/// Coincidence histogram and singles of slots 0 and 1 (first detector each).
struct PairCounts {
    histogram: Histogram,
    singles: [u64; 2],
    duration_s: f64,
}

fn run_pair(setup: &Setup, scn: &Scenario) -> Result<PairCounts> {
    let res = setup.detectors[0].resolution_ps;
    let mut acc = HistogramAccumulator::new(res, scn.histogram.bin_width_ps, scn.histogram.span_ns);
    let da = setup.detector_id(0, 0);
    let db = setup.detector_id(1, 0);
    let mut singles = [0u64; 2];
    pipeline::run(setup, |_, tags| {
        singles[0] += tags[da].len() as u64;
        singles[1] += tags[db].len() as u64;
        acc.push(&tags[da], &tags[db]);
        Ok(())
    })?;
    Ok(PairCounts {
        histogram: acc.finish(),
        singles,
        duration_s: setup.duration_s,
    })
}

fn edges_of(scn: &Scenario, plan: &NetworkPlan) -> Result<Vec<(usize, EdgeAssignment)>> {
    let e: Vec<(usize, EdgeAssignment)> = scn
        .selected_edges(plan)
        .into_iter()
        .map(|(i, e)| (i, e.clone()))
        .collect();
    if e.is_empty() {
        return Err(Error::Configuration("no edges selected".into()));
    }
    Ok(e)
}

fn par_edges<F>(scn: &Scenario, plan: &NetworkPlan, f: F) -> Result<StageOutput>
where
    F: Fn(&EdgeSim) -> Result<StageOutput> + Sync,
{
    let edges = edges_of(scn, plan)?;
    let parts: Vec<Result<StageOutput>> = edges
        .par_iter()
        .map(|(index, edge)| {
            f(&EdgeSim {
                scn,
                index: *index,
                edge,
            })
            .map_err(|e| Error::Configuration(format!("edge {}: {e}", edge.key())))
        })
        .collect();
    let mut out = StageOutput::default();
    for p in parts {
        out.absorb(p?);
    }
    Ok(out)
}

pub fn schedule(scn: &Scenario, plan: &NetworkPlan) -> Result<DelaySchedule> {
    planner::assign_delays(plan, scn.network.delay_step_ns, scn.network.identification_window_ns)
}

pub fn plan_stage(scn: &Scenario, plan: &NetworkPlan) -> Result<StageOutput> {
    let sched = schedule(scn, plan)?;
    let problems = planner::verify_plan(plan, &sched);
    if !problems.is_empty() {
        return Err(Error::Inconsistent(problems.join("; ")));
    }
    let mut out = StageOutput::default();
    let mut csv = String::from(
        "edge,user_a,user_b,signal,idler,signal_thz,idler_thz,signal_nm,idler_nm,signal_delay_ns,idler_delay_ns\n",
    );
    out.summary.push(format!("{:<14}{:>8}{:>8}{:>12}{:>12}", "edge", "signal", "idler", "delay_s_ns", "delay_i_ns"));
    for e in &plan.edges {
        let (s, i) = (e.signal_channel, e.idler_channel);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:.1},{:.1},{:.3},{:.3},{},{}",
            e.key(),
            e.user_a.label,
            e.user_b.label,
            s,
            i,
            s.center_frequency_thz(),
            i.center_frequency_thz(),
            s.center_wavelength_nm(),
            i.center_wavelength_nm(),
            sched.delay_ns(s),
            sched.delay_ns(i)
        );
        out.summary.push(format!(
            "{:<14}{:>8}{:>8}{:>12}{:>12}",
            e.name(),
            s.to_string(),
            i.to_string(),
            sched.delay_ns(s),
            sched.delay_ns(i)
        ));
    }
    out.file("plan.csv", csv);
    let json = serde_json::json!({ "plan": plan, "delays": sched });
    out.file("plan.json", serde_json::to_string_pretty(&json).expect("plan serializes") + "\n");
    out.metric("plan.edges", plan.edges.len() as f64);
    out.metric("plan.users", plan.users.len() as f64);
    Ok(out)
}

/// All selected edges at once into shared per-user detectors, separated by
/// their fiber delays.
pub fn simulate_stage(scn: &Scenario, plan: &NetworkPlan) -> Result<StageOutput> {
    let sched = schedule(scn, plan)?;
    let edges = edges_of(scn, plan)?;
    let mode = scn.analyzer.mode;
    let power = scn.source.pump_power_mw;
    let n_users = plan.users.len();
    let mut links = Vec::new();
    let mut noise = Vec::new();
    for (index, edge) in &edges {
        let sim = EdgeSim { scn, index: *index, edge };
        let slots = (edge.user_a.index, edge.user_b.index);
        let delays = (
            sched.delay_ns(edge.signal_channel) * 1e3,
            sched.delay_ns(edge.idler_channel) * 1e3,
        );
        links.push(sim.link(power, mode, slots, delays));
        noise.extend(sim.noise(power, mode, slots, delays));
    }
    let setup = Setup {
        mode,
        interferometer: scn.analyzer.interferometer.clone(),
        phases: vec![scn.analyzer.interferometer.phase_rad; n_users],
        offsets: plan.users.iter().map(|u| scn.phase_offset(&u.label)).collect(),
        locks: None,
        detectors: vec![scn.detector.clone(); n_users],
        duration_s: scn.duration_s,
        seed: substream_seed(scn.seed, "simulate", &[]),
        links,
        noise,
    };
    let res = scn.detector.resolution_ps;
    let max_offset = sched.delay_by_channel.values().fold(0.0f64, |m, d| m.max(d.abs()));
    let span_ns = 2.0 * max_offset + scn.histogram.span_ns;
    let user_pairs: Vec<(usize, usize)> = (0..n_users)
        .flat_map(|a| (a + 1..n_users).map(move |b| (a, b)))
        .collect();
    let mut accs: Vec<HistogramAccumulator> = user_pairs
        .iter()
        .map(|_| HistogramAccumulator::new(res, scn.histogram.bin_width_ps, span_ns))
        .collect();
    let first_det = |u: usize| setup.detector_id(u, 0);
    let mut tags: Vec<TimeTag> = Vec::new();
    pipeline::run(&setup, |_, chunk| {
        for (acc, &(a, b)) in accs.iter_mut().zip(&user_pairs) {
            acc.push(&chunk[first_det(a)], &chunk[first_det(b)]);
        }
        for (d, bins) in chunk.iter().enumerate() {
            tags.extend(bins.iter().map(|&bin| TimeTag { detector: d as u32, bin }));
        }
        Ok(())
    })?;
    tags.sort_unstable_by_key(|t| (t.bin, t.detector));
    let mut stream = TimeTagStream::empty(scn.duration_s, res);
    stream.tags = tags;
    for u in &plan.users {
        for local in 0..mode.detectors_per_slot() {
            stream.detector_map.insert(
                setup.detector_id(u.index, local) as u32,
                DetectorInfo {
                    user: u.label.clone(),
                    channels: plan.channels_of(u.index),
                    port: local as u8,
                },
            );
        }
    }

    let mut out = StageOutput::default();
    let mut bin = Vec::new();
    stream.write_binary(&mut bin).map_err(|e| Error::Configuration(e.to_string()))?;
    out.file("tags.bin", bin);
    out.file(
        "tags_detectors.json",
        serde_json::to_string_pretty(&stream.detector_map).expect("map serializes") + "\n",
    );
    for u in &plan.users {
        let n = stream.count(first_det(u.index) as u32) as f64;
        out.metric(format!("simulate.singles.{}", u.label.to_lowercase()), n / scn.duration_s);
    }
    let delta = scn.analyzer.interferometer.delta_t_ps();
    let hists: Vec<Histogram> = accs.into_iter().map(HistogramAccumulator::finish).collect();
    for ((a, b), h) in user_pairs.iter().zip(&hists) {
        out.file(
            format!("hist_{}_{}.csv", plan.users[*a].label.to_lowercase(), plan.users[*b].label.to_lowercase()),
            h.to_csv(),
        );
    }
    for (_, edge) in &edges {
        let (ua, ub) = (edge.user_a.index, edge.user_b.index);
        let k = user_pairs.iter().position(|&p| p == (ua.min(ub), ua.max(ub))).expect("pair listed");
        // Histograms hold later-user minus earlier-user delays.
        let sign = if ua < ub { 1.0 } else { -1.0 };
        let center = -sign * sched.edge_offset(edge) * 1e3;
        let w = scn.histogram.window_ns;
        let central = cc_ac_car(&hists[k], w, center, 1)?;
        let early = cc_ac_car(&hists[k], w, center - sign * delta, 1)?;
        let late = cc_ac_car(&hists[k], w, center + sign * delta, 1)?;
        let key = edge.key();
        out.metric(format!("simulate.cc.{key}"), central.cc);
        out.metric(format!("simulate.side_cc.{key}"), early.cc + late.cc);
        out.metric(format!("simulate.ac.{key}"), central.ac);
        out.summary.push(format!(
            "{:<14} peak group at {:+.1} ns: early {} central {} late {} (accidentals {:.1}/window)",
            edge.name(),
            center / 1e3,
            early.cc,
            central.cc,
            late.cc,
            central.ac
        ));
    }
    Ok(out)
}

/// Rates, PGR, linewidth and CAR of each edge straight from the demultiplexer.
pub fn characterize_stage(scn: &Scenario, plan: &NetworkPlan) -> Result<StageOutput> {
    par_edges(scn, plan, |sim| {
        let key = sim.key();
        let p = scn.source.pump_power_mw;
        let seed = substream_seed(scn.seed, "characterize", &[sim.index as u64]);
        let counts = run_pair(&sim.setup(AnalyzerMode::Direct, p, scn.duration_s, seed, [0.0; 2]), scn)?;
        let car = cc_ac_car(&counts.histogram, scn.histogram.window_ns, 0.0, 1)?;
        let fit = fit_correlation(&counts.histogram, FitModel::ExponentialGaussian)?;
        let t = counts.duration_s;
        let rates = rate_summary(
            counts.singles[0] as f64 / t,
            counts.singles[1] as f64 / t,
            (car.cc - car.ac).max(0.0) / t,
        )?;
        let mut out = StageOutput::default();
        out.file(format!("hist_{key}.csv"), counts.histogram.to_csv());
        out.metric(format!("tau_c.{key}"), fit.tau_c_ps());
        out.metric(format!("sigma.{key}"), fit.sigma_ps());
        out.metric(format!("bandwidth.{key}"), bandwidth_from_tau(fit.tau_c_ps()));
        out.metric(format!("pgr.{key}"), rates.pgr_per_mw2(p));
        out.metric(format!("loss.{key}"), rates.loss_per_arm_db);
        out.metric(format!("car.{key}"), car.car);
        out.summary.push(format!(
            "{:<14} tau_c {:.1} ps  sigma {:.1} ps  bandwidth {:.1} MHz  PGR {:.3e} /s/mW^2  loss {:.2} dB  CAR {:.1}",
            sim.edge.name(),
            fit.tau_c_ps(),
            fit.sigma_ps(),
            bandwidth_from_tau(fit.tau_c_ps()),
            rates.pgr_per_mw2(p),
            rates.loss_per_arm_db,
            car.car
        ));
        Ok(out)
    })
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub power_mw: f64,
    pub duration_s: f64,
    pub car: CarResult,
    pub singles: [f64; 2],
    /// Accidental-subtracted coincidence rate.
    pub net_rate: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Underdetermined("need two positive points for a slope".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Underdetermined("all powers are equal".into()));
    }
    Ok(sxy / sxx)
}

/// Coincidences and CAR against pump power.
pub fn sweep_stage(scn: &Scenario, plan: &NetworkPlan) -> Result<StageOutput> {
    par_edges(scn, plan, |sim| {
        let key = sim.key();
        let sweep = &scn.power_sweep;
        let eta = sim.eta(sim.edge.signal_channel, AnalyzerMode::Direct) * sim.eta(sim.edge.idler_channel, AnalyzerMode::Direct);
        let mut points = Vec::new();
        for (i, &p) in sweep.powers_mw.iter().enumerate() {
            let expected = scn.pgr(sim.edge) * p * p * eta;
            let duration = (sweep.target_coincidences / expected.max(1e-12)).clamp(sweep.min_duration_s, sweep.max_duration_s);
            let duration = (duration * 10.0).ceil() / 10.0;
            let seed = substream_seed(scn.seed, "sweep", &[sim.index as u64, i as u64]);
            let counts = run_pair(&sim.setup(AnalyzerMode::Direct, p, duration, seed, [0.0; 2]), scn)?;
            let car = cc_ac_car(&counts.histogram, scn.histogram.window_ns, 0.0, 1)?;
            points.push(SweepPoint {
                power_mw: p,
                duration_s: duration,
                car,
                singles: [counts.singles[0] as f64 / duration, counts.singles[1] as f64 / duration],
                net_rate: (car.cc - car.ac) / duration,
            });
        }
        let mut out = StageOutput::default();
        let mut csv = String::from("power_mw,duration_s,cc,ac,car,net_rate,singles_signal,singles_idler\n");
        for pt in &points {
            let _ = writeln!(
                csv,
                "{},{},{},{:.4},{:.4},{:.6},{:.3},{:.3}",
                pt.power_mw, pt.duration_s, pt.car.cc, pt.car.ac, pt.car.car, pt.net_rate, pt.singles[0], pt.singles[1]
            );
            let pk = power_key(pt.power_mw);
            out.metric(format!("car.{key}.{pk}"), pt.car.car);
            out.metric(format!("rate.{key}.{pk}"), pt.net_rate);
            out.summary.push(format!(
                "{:<14} {:>6} mW  {:>8.1} s  CC {:>8}  AC {:>9.3}  CAR {:>7.1}  net rate {:.4} /s",
                sim.edge.name(),
                pt.power_mw,
                pt.duration_s,
                pt.car.cc,
                pt.car.ac,
                pt.car.car,
                pt.net_rate
            ));
        }
        let powers: Vec<f64> = points.iter().map(|p| p.power_mw).collect();
        let rates: Vec<f64> = points.iter().map(|p| p.net_rate).collect();
        let slope = log_log_slope(&powers, &rates)?;
        out.metric(format!("slope.{key}"), slope);
        out.summary.push(format!("{:<14} log-log coincidence slope {slope:.3}", sim.edge.name()));
        out.file(format!("sweep_{key}.csv"), csv);
        Ok(out)
    })
}

/// Franson fringes: the signal analyzer phase is swept, the idler's held.
pub fn fringe_stage(scn: &Scenario, plan: &NetworkPlan) -> Result<StageOutput> {
    let sw = &scn.phase_sweep;
    let phases = phase_sweep(sw.start_rad, sw.stop_rad, sw.steps);
    let mode = match scn.analyzer.mode {
        AnalyzerMode::Direct | AnalyzerMode::Bbm92 => {
            return Err(Error::Configuration("fringes need single- or dual-port analyzers".into()))
        }
        m => m,
    };
    let delta = scn.analyzer.interferometer.delta_t_ps();
    let idler_phase = scn.analyzer.interferometer.phase_rad;
    par_edges(scn, plan, |sim| {
        let key = sim.key();
        let mut central = Vec::new();
        let mut side = Vec::new();
        let mut ac = Vec::new();
        let mut singles = Vec::new();
        let mut csv = String::from("phase_rad,central_cc,early_cc,late_cc,ac\n");
        for (i, &phi) in phases.iter().enumerate() {
            let seed = substream_seed(scn.seed, "fringe", &[sim.index as u64, i as u64]);
            let setup = sim.setup(mode, scn.source.pump_power_mw, sw.seconds_per_point, seed, [phi, idler_phase]);
            let counts = run_pair(&setup, scn)?;
            let w = scn.histogram.window_ns;
            let c = cc_ac_car(&counts.histogram, w, 0.0, 1)?;
            let e = cc_ac_car(&counts.histogram, w, -delta, 0)?;
            let l = cc_ac_car(&counts.histogram, w, delta, 0)?;
            let _ = writeln!(csv, "{phi:.6},{},{},{},{:.4}", c.cc, e.cc, l.cc, c.ac);
            central.push(c.cc);
            side.push(e.cc + l.cc);
            ac.push(c.ac);
            singles.push(counts.singles[0] as f64);
        }
        let fit = fit_fringe(&phases, &central, Some(&ac))?;
        let flatness = singles_rate_check(&singles)?;
        let mut out = StageOutput::default();
        out.file(format!("fringe_{key}.csv"), csv);
        out.metric(format!("visibility_raw.{key}"), fit.visibility_raw);
        out.metric(format!("visibility_raw_err.{key}"), fit.visibility_raw_err);
        if let (Some(v), Some(e)) = (fit.visibility_net, fit.visibility_net_err) {
            out.metric(format!("visibility_net.{key}"), v);
            out.metric(format!("visibility_net_err.{key}"), e);
        }
        out.metric(format!("singles_spread.{key}"), flatness);
        out.summary.push(format!(
            "{:<14} raw V {:.4} ± {:.4}  net V {}  classical bound {}",
            sim.edge.name(),
            fit.visibility_raw,
            fit.visibility_raw_err,
            fit.visibility_net.map_or("n/a".into(), |v| format!("{v:.4}")),
            if fit.exceeds_classical_bound() { "violated" } else { "not violated" }
        ));
        Ok(out)
    })
}

/// Phase setpoints of the Z and X interferometers of the signal (`a`) and
/// idler (`b`) parties.
fn lock_setpoints() -> [f64; 4] {
    [0.0, PI / 2.0, 0.0, 3.0 * PI / 2.0]
}

fn lock_names(edge: &EdgeAssignment) -> [String; 4] {
    let a = edge.user_a.label.to_lowercase();
    let b = edge.user_b.label.to_lowercase();
    [format!("{a}_z"), format!("{a}_x"), format!("{b}_z"), format!("{b}_x")]
}

fn run_locks(scn: &Scenario, duration_s: f64, seed: u64) -> Result<Vec<LockStatus>> {
    let c = &scn.control;
    let timing = LoopTiming {
        duration_s,
        seed,
        ..c.timing
    };
    lock_setpoints()
        .iter()
        .enumerate()
        .map(|(i, &sp)| phase_lock(&c.phase_drift, &c.phase_gains, sp, &timing, i as u64))
        .collect()
}

/// One BBM92 session on a single edge.
pub fn qkd_session(scn: &Scenario, plan: &NetworkPlan, edge_key: &str, phase_locked: bool) -> Result<QkdSessionReport> {
    let (index, edge) = plan
        .edges
        .iter()
        .enumerate()
        .find(|(_, e)| e.key() == edge_key)
        .ok_or_else(|| Error::Configuration(format!("unknown edge {edge_key}")))?;
    let sim = EdgeSim { scn, index, edge };
    run_session(&sim, phase_locked)
}

fn run_session(sim: &EdgeSim, phase_locked: bool) -> Result<QkdSessionReport> {
    let scn = sim.scn;
    let q = &scn.qkd;
    let seed = substream_seed(scn.seed, "qkd", &[sim.index as u64]);
    let mut setup = sim.setup(AnalyzerMode::Bbm92, scn.source.pump_power_mw, q.duration_s, seed, [0.0; 2]);
    if phase_locked {
        setup.locks = Some(run_locks(scn, q.duration_s, substream_seed(scn.seed, "qkd-locks", &[sim.index as u64]))?);
    }
    let i = &scn.analyzer.interferometer;
    let mut matcher = BasisMatcher::new(
        scn.detector.resolution_ps,
        scn.histogram.window_ns,
        i.delta_t_ns,
        0.0,
        setup.detector_id(0, 0),
        setup.detector_id(1, 0),
    );
    let mut acc = SessionAccumulator::new(q.duration_s, q.window_s);
    pipeline::run(&setup, |_, tags| {
        matcher.push(tags, |o| acc.record(&o));
        Ok(())
    })?;
    acc.report(&sim.edge.name(), q.f_ec)
}

pub fn qkd_stage(scn: &Scenario, plan: &NetworkPlan) -> Result<StageOutput> {
    let mut out = par_edges(scn, plan, |sim| {
        let key = sim.key();
        let r = run_session(sim, scn.qkd.phase_locked)?;
        let mut out = StageOutput::default();
        out.file(format!("qkd_{key}.csv"), r.windows_csv());
        out.file(
            format!("qkd_{key}.json"),
            serde_json::to_string_pretty(&r).expect("report serializes") + "\n",
        );
        out.metric(format!("sifted.{key}"), r.sifted_count as f64);
        out.metric(format!("sift_rate.{key}"), r.sift_rate);
        out.metric(format!("skr.{key}"), r.skr);
        out.metric(format!("secure_bits.{key}"), r.total_secure_bits);
        if let (Some(qb), Some(e)) = (r.qber, r.qber_err) {
            out.metric(format!("qber.{key}"), qb);
            out.metric(format!("qber_err.{key}"), e);
        }
        if let Some(v) = r.visibility {
            out.metric(format!("visibility.{key}"), v);
        }
        if let Some(e) = r.visibility_err {
            out.metric(format!("visibility_err.{key}"), e);
        }
        out.summary.push(format!(
            "{:<14} sifted {:.3e}  V {}  QBER {}  SKR {:.1} bit/s  secure bits {:.3e}",
            sim.edge.name(),
            r.sifted_count as f64,
            r.visibility.map_or("n/a".into(), |v| format!("{v:.4}")),
            r.qber.map_or("n/a".into(), |v| format!("{v:.4}")),
            r.skr,
            r.total_secure_bits
        ));
        Ok(out)
    })?;
    let mut csv = String::from("edge,sifted,visibility,qber,skr,secure_bits\n");
    for (_, e) in edges_of(scn, plan)? {
        let k = e.key();
        let m = |n: &str| out.metrics.get(&format!("{n}.{k}")).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            csv,
            "{k},{},{:.6},{:.6},{:.3},{:.1}",
            m("sifted"),
            m("visibility"),
            m("qber"),
            m("skr"),
            m("secure_bits")
        );
    }
    out.file("qkd_summary.csv", csv);
    Ok(out)
}

/// Pump-resonance following and the four interferometer locks of the first
/// selected edge.
pub fn stabilize_stage(scn: &Scenario, plan: &NetworkPlan) -> Result<StageOutput> {
    let c = &scn.control;
    let timing = LoopTiming {
        seed: substream_seed(scn.seed, "stabilize", &[]),
        ..c.timing
    };
    let pump = pump_follow(&scn.resonator, &c.pump_drift, &c.pump_gains, c.initial_detuning_mhz, &timing)?;
    let mut out = StageOutput::default();
    out.file("lock_pump.csv", pump.to_csv());
    out.metric("pump.fraction_in_band", pump.fraction_in_band());
    out.metric("pump.rms_detuning_mhz", pump.rms_error);
    out.metric("pump.lock_loss_events", pump.lock_loss_events as f64);
    out.summary.push(format!(
        "pump follow: {:.4} of samples within {} ± {}, rms detuning {:.2} MHz, {} lock-loss events",
        pump.fraction_in_band(),
        pump.setpoint,
        pump.tolerance,
        pump.rms_error,
        pump.lock_loss_events
    ));
    let (_, edge) = edges_of(scn, plan)?.into_iter().next().expect("edges_of is non-empty");
    let locks = run_locks(scn, c.timing.duration_s, timing.seed)?;
    for (name, lock) in lock_names(&edge).iter().zip(&locks) {
        out.file(format!("lock_{name}.csv"), lock.to_csv());
        out.metric(format!("phase.{name}.rms_rad"), lock.rms_error);
        out.metric(format!("phase.{name}.fraction_in_band"), lock.fraction_in_band());
        out.metric(format!("phase.{name}.qber_penalty"), phase_error_qber(lock));
        out.summary.push(format!(
            "phase lock {name}: rms error {:.4} rad, {:.4} of samples within ±{} rad, QBER penalty {:.2e}",
            lock.rms_error,
            lock.fraction_in_band(),
            lock.tolerance,
            phase_error_qber(lock)
        ));
    }
    Ok(out)
}
