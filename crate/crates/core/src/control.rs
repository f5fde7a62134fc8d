//! Closed-loop stabilization: the pump laser following the drifting ring
//! resonance, and interferometer phases held by PID loops on reference light.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::spectral_grid::{transmission, ResonatorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DriftKind {
    RandomWalk,
    SinusoidalWalk { amplitude: f64, period_s: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    pub kind: DriftKind,
    /// Random-walk strength per √s (MHz for the resonance, rad for phases).
    pub step_std: f64,
    /// Deterministic drift per second.
    #[serde(default)]
    pub rate: f64,
    pub bound: Option<f64>,
}

impl DriftModel {
    /// Resonance wander read off hours-long pump-tracking records: about
    /// 150 MHz of excursion over a few hours.
    pub fn resonance_default() -> Self {
        DriftModel {
            kind: DriftKind::RandomWalk,
            step_std: 0.72,
            rate: 0.0,
            bound: Some(150.0),
        }
    }

    /// Slow thermal wander of an interferometer phase, rad/√s.
    pub fn phase_default() -> Self {
        DriftModel {
            kind: DriftKind::RandomWalk,
            step_std: 0.02,
            rate: 0.0,
            bound: None,
        }
    }

    pub fn none() -> Self {
        DriftModel {
            kind: DriftKind::RandomWalk,
            step_std: 0.0,
            rate: 0.0,
            bound: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_std >= 0.0) {
            return Err(Error::Configuration("drift step_std must be non-negative".into()));
        }
        if let DriftKind::SinusoidalWalk { period_s, .. } = self.kind {
            if !(period_s > 0.0) {
                return Err(Error::Configuration("drift period must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Advance a drift state from `t` to `t + dt`.
pub fn step_drift<R: Rng + ?Sized>(state: f64, model: &DriftModel, t: f64, dt: f64, rng: &mut R) -> f64 {
    let mut next = state + model.rate * dt;
    if model.step_std > 0.0 {
        next += Normal::new(0.0, model.step_std * dt.sqrt()).expect("finite").sample(rng);
    }
    if let DriftKind::SinusoidalWalk { amplitude, period_s } = model.kind {
        let w = 2.0 * PI / period_s;
        next += amplitude * ((w * (t + dt)).sin() - (w * t).sin());
    }
    match model.bound {
        Some(b) => next.clamp(-b, b),
        None => next,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    /// Per second.
    pub ki: f64,
    /// Seconds.
    pub kd: f64,
    pub setpoint: f64,
    pub output_min: f64,
    pub output_max: f64,
    /// Largest actuator change per second.
    pub slew_limit: Option<f64>,
}

impl PidGains {
    /// Pump-frequency loop; actuator in MHz of pump detuning.
    pub fn pump_default() -> Self {
        PidGains {
            kp: 0.2,
            ki: 3.0,
            kd: 0.0,
            setpoint: 0.0,
            output_min: -1000.0,
            output_max: 1000.0,
            slew_limit: Some(100.0),
        }
    }

    /// Phase loop; actuator in rad of phase-shifter setting.
    pub fn phase_default() -> Self {
        PidGains {
            kp: 0.3,
            ki: 4.0,
            kd: 0.0,
            setpoint: 0.0,
            output_min: -4.0 * PI,
            output_max: 4.0 * PI,
            slew_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PidController {
    pub gains: PidGains,
    integral: f64,
    prev_error: Option<f64>,
    output: f64,
    pub saturated_steps: usize,
}

impl PidController {
    pub fn new(gains: PidGains, initial_output: f64) -> Self {
        let ki = gains.ki;
        PidController {
            gains,
            integral: if ki != 0.0 { initial_output / ki } else { 0.0 },
            prev_error: None,
            output: initial_output,
            saturated_steps: 0,
        }
    }

    pub fn output(&self) -> f64 {
        self.output
    }

    pub fn update(&mut self, measurement: f64, dt: f64) -> f64 {
        self.update_error(self.gains.setpoint - measurement, dt)
    }

    /// One controller step on an already formed error signal.
    pub fn update_error(&mut self, error: f64, dt: f64) -> f64 {
        let g = self.gains;
        let derivative = self.prev_error.map_or(0.0, |p| (error - p) / dt);
        self.prev_error = Some(error);
        let candidate = self.integral + error * dt;
        let raw = g.kp * error + g.ki * candidate + g.kd * derivative;
        let clamped = raw.clamp(g.output_min, g.output_max);
        // Anti-windup: stop integrating while saturated in the error direction.
        if raw == clamped || (raw > clamped) != (error > 0.0) {
            self.integral = candidate;
        }
        let mut out = clamped;
        if let Some(slew) = g.slew_limit {
            let max_step = slew * dt;
            out = self.output + (out - self.output).clamp(-max_step, max_step);
        }
        if out != raw {
            self.saturated_steps += 1;
        }
        self.output = out;
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockSample {
    pub t: f64,
    pub observable: f64,
    pub actuator: f64,
    /// Plant error: pump-resonance detuning (MHz) or phase error (rad).
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockStatus {
    pub samples: Vec<LockSample>,
    pub setpoint: f64,
    pub tolerance: f64,
    pub window_s: f64,
    /// Per window: every observable sample within `setpoint ± tolerance`.
    pub in_lock: Vec<bool>,
    /// RMS of the plant error after settling.
    pub rms_error: f64,
    pub settle_s: f64,
    pub lock_loss_events: usize,
    pub saturated_steps: usize,
}

impl LockStatus {
    fn build(
        samples: Vec<LockSample>,
        setpoint: f64,
        tolerance: f64,
        settle_s: f64,
        lock_loss_events: usize,
        saturated_steps: usize,
    ) -> Self {
        let window_s = 10.0;
        let n_windows = samples.last().map_or(0, |s| (s.t / window_s).ceil() as usize);
        let mut in_lock = vec![true; n_windows];
        for s in &samples {
            let w = ((s.t / window_s).ceil() as usize).saturating_sub(1).min(n_windows.saturating_sub(1));
            if (s.observable - setpoint).abs() > tolerance && w < n_windows {
                in_lock[w] = false;
            }
        }
        let settled: Vec<f64> = samples.iter().filter(|s| s.t >= settle_s).map(|s| s.error).collect();
        let rms_error = if settled.is_empty() {
            0.0
        } else {
            (settled.iter().map(|e| e * e).sum::<f64>() / settled.len() as f64).sqrt()
        };
        LockStatus {
            samples,
            setpoint,
            tolerance,
            window_s,
            in_lock,
            rms_error,
            settle_s,
            lock_loss_events,
            saturated_steps,
        }
    }

    /// Fraction of post-settling samples with the observable in band.
    pub fn fraction_in_band(&self) -> f64 {
        let settled: Vec<&LockSample> = self.samples.iter().filter(|s| s.t >= self.settle_s).collect();
        if settled.is_empty() {
            return 0.0;
        }
        let good = settled
            .iter()
            .filter(|s| (s.observable - self.setpoint).abs() <= self.tolerance)
            .count();
        good as f64 / settled.len() as f64
    }

    pub fn lock_lost(&self) -> bool {
        self.lock_loss_events > 0
    }

    /// Plant error at time `t` (zero-order hold).
    pub fn error_at(&self, t: f64) -> f64 {
        let i = self.samples.partition_point(|s| s.t <= t);
        if i == 0 {
            self.samples.first().map_or(0.0, |s| s.error)
        } else {
            self.samples[i - 1].error
        }
    }

    /// CSV `t,observable,actuator`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,observable,actuator\n");
        for x in &self.samples {
            s.push_str(&format!("{:.3},{:.6},{:.6}\n", x.t, x.observable, x.actuator));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopTiming {
    pub duration_s: f64,
    pub dt_s: f64,
    pub settle_s: f64,
    pub seed: u64,
}

impl Default for LoopTiming {
    fn default() -> Self {
        LoopTiming {
            duration_s: 3600.0,
            dt_s: 0.1,
            settle_s: 10.0,
            seed: 0,
        }
    }
}

impl LoopTiming {
    fn validate(&self) -> Result<usize> {
        if !(self.dt_s > 0.0 && self.duration_s >= 0.0) {
            return Err(Error::Configuration("loop dt must be positive and duration non-negative".into()));
        }
        Ok((self.duration_s / self.dt_s).round() as usize)
    }
}

/// Transmission band that the pump-follow loop is expected to hold.
pub const PUMP_BAND_TOLERANCE: f64 = 0.001;

/// Keep the pump on the bottom of its drifting resonance.
///
/// The loop dithers the pump by ±FWHM/20, estimates the slope of the
/// transmission dip from the two probe readings, and converts it into a
/// detuning estimate for the PID. The recorded observable is the
/// transmission at the operating point.
pub fn pump_follow(
    resonator: &ResonatorSpec,
    drift: &DriftModel,
    gains: &PidGains,
    initial_detuning_mhz: f64,
    timing: &LoopTiming,
) -> Result<LockStatus> {
    resonator.validate()?;
    drift.validate()?;
    let steps = timing.validate()?;
    let fwhm = resonator.linewidth_fwhm_mhz;
    if initial_detuning_mhz.abs() > fwhm {
        return Err(Error::Configuration(format!(
            "pump starts {initial_detuning_mhz} MHz from resonance, beyond one linewidth"
        )));
    }
    let f0 = resonator.pump_frequency_thz();
    let extinction = resonator.mode_extinction(0);
    let observe = |detuning_mhz: f64| transmission(resonator, f0 + detuning_mhz * 1e-6);
    let dither = fwhm / 20.0;
    // Curvature of the dip at its bottom converts slope to detuning.
    let curvature = 8.0 * (1.0 - extinction) / (fwhm * fwhm);

    let mut rng = substream(timing.seed, "pump-drift", &[]);
    let mut resonance = 0.0;
    let mut pid = PidController::new(*gains, resonance + initial_detuning_mhz);
    let mut samples = Vec::with_capacity(steps + 1);
    let mut out_since: Option<f64> = None;
    let mut losses = 0usize;
    let mut counted = false;
    for k in 0..=steps {
        let t = k as f64 * timing.dt_s;
        let detuning = pid.output() - resonance;
        samples.push(LockSample {
            t,
            observable: observe(detuning),
            actuator: pid.output(),
            error: detuning,
        });
        if detuning.abs() > fwhm {
            let since = *out_since.get_or_insert(t);
            if t - since > 1.0 && !counted {
                losses += 1;
                counted = true;
            }
        } else {
            out_since = None;
            counted = false;
        }
        if k == steps {
            break;
        }
        let slope = (observe(detuning + dither) - observe(detuning - dither)) / (2.0 * dither);
        let estimate = slope / curvature;
        pid.update_error(-estimate, timing.dt_s);
        resonance = step_drift(resonance, drift, t, timing.dt_s, &mut rng);
    }
    Ok(LockStatus::build(
        samples,
        extinction,
        PUMP_BAND_TOLERANCE,
        timing.settle_s,
        losses,
        pid.saturated_steps,
    ))
}

/// Hold an interferometer at `setpoint` using its reference-light fringe.
///
/// The reference signal is `(1 + cos(φ + φ_ref))/2` with `φ_ref` chosen so
/// the setpoint sits at quadrature, where the fringe slope is steepest.
/// The recorded observable is the interferometer phase.
pub fn phase_lock(drift: &DriftModel, gains: &PidGains, setpoint: f64, timing: &LoopTiming, lock_id: u64) -> Result<LockStatus> {
    drift.validate()?;
    let steps = timing.validate()?;
    if !(0.0..2.0 * PI).contains(&setpoint) {
        return Err(Error::Configuration(format!("phase setpoint {setpoint} outside [0, 2π)")));
    }
    let reference_offset = FRAC_PI_2 - setpoint;
    let mut rng = substream(timing.seed, "phase-drift", &[lock_id]);
    let mut drift_phase = 0.0;
    let mut pid = PidController::new(PidGains { setpoint: 0.0, ..*gains }, setpoint);
    let mut samples = Vec::with_capacity(steps + 1);
    let wrap = |x: f64| (x + PI).rem_euclid(2.0 * PI) - PI;
    for k in 0..=steps {
        let t = k as f64 * timing.dt_s;
        let phase = drift_phase + pid.output();
        let error = wrap(phase - setpoint);
        samples.push(LockSample {
            t,
            observable: setpoint + error,
            actuator: pid.output(),
            error,
        });
        if k == steps {
            break;
        }
        let reference = 0.5 * (1.0 + (phase + reference_offset).cos());
        // At quadrature the normalized signal (0.5 - I)/0.5 reads sin(error).
        let measured = (0.5 - reference) / 0.5;
        pid.update(measured, timing.dt_s);
        drift_phase = step_drift(drift_phase, drift, t, timing.dt_s, &mut rng);
    }
    Ok(LockStatus::build(samples, setpoint, 0.1, timing.settle_s, 0, pid.saturated_steps))
}

/// Mean extra QBER from residual phase errors: `⟨(1 - cos ε)/2⟩`.
pub fn phase_error_qber(status: &LockStatus) -> f64 {
    let settled: Vec<f64> = status
        .samples
        .iter()
        .filter(|s| s.t >= status.settle_s)
        .map(|s| (1.0 - s.error.cos()) / 2.0)
        .collect();
    if settled.is_empty() {
        0.0
    } else {
        settled.iter().sum::<f64>() / settled.len() as f64
    }
}
