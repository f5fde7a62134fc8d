//! Unbalanced (Franson) interferometer pair analyzers.
//!
//! Each photon independently takes the short or long arm. When both take the
//! same arm the two histories are indistinguishable and interfere with the
//! phase sum `φa + φb`; when they differ the pair lands in a side peak at
//! `∓ΔT` and carries no phase information.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::source_sim::PairEvent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferometerConfig {
    /// Long minus short arm delay.
    pub delta_t_ns: f64,
    /// Phase shifter setting.
    pub phase_rad: f64,
    /// Fixed, otherwise unknown, phase of this analyzer.
    #[serde(default)]
    pub phase_offset_rad: f64,
    /// 1 for a single monitored output, 2 when both outputs are detected.
    pub ports: u8,
    pub insertion_loss_db: f64,
}

impl Default for InterferometerConfig {
    fn default() -> Self {
        InterferometerConfig {
            delta_t_ns: 2.5,
            phase_rad: 0.0,
            phase_offset_rad: 0.0,
            ports: 1,
            insertion_loss_db: 0.0,
        }
    }
}

impl InterferometerConfig {
    pub fn with_phase(&self, phase_rad: f64) -> Self {
        InterferometerConfig {
            phase_rad,
            ..self.clone()
        }
    }

    pub fn total_phase(&self) -> f64 {
        self.phase_rad + self.phase_offset_rad
    }

    pub fn delta_t_ps(&self) -> f64 {
        self.delta_t_ns * 1e3
    }

    /// Check the Franson regime `5 τc ≤ ΔT ≤ 10⁻³ τp`.
    pub fn validate(&self, tau_c_ps: f64, tau_p_us: f64) -> Result<()> {
        if self.ports != 1 && self.ports != 2 {
            return Err(Error::Configuration(format!(
                "analyzer must have 1 or 2 ports, got {}",
                self.ports
            )));
        }
        if self.insertion_loss_db > 0.0 {
            return Err(Error::Configuration("insertion loss must be non-positive dB".into()));
        }
        let dt_ps = self.delta_t_ps();
        if dt_ps < 5.0 * tau_c_ps {
            return Err(Error::Configuration(format!(
                "arm imbalance {} ns is not >= 5 x tau_c ({tau_c_ps} ps)",
                self.delta_t_ns
            )));
        }
        if dt_ps > 1e-3 * tau_p_us * 1e6 {
            return Err(Error::Configuration(format!(
                "arm imbalance {} ns is not <= 1e-3 x tau_p ({tau_p_us} us)",
                self.delta_t_ns
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Path {
    Short,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Peak {
    /// Photon a took the long arm, b the short one: pair offset `-ΔT`.
    EarlySide,
    Central,
    /// Photon a short, b long: pair offset `+ΔT`.
    LateSide,
}

impl Peak {
    pub fn from_paths(a: Path, b: Path) -> Peak {
        match (a, b) {
            (Path::Long, Path::Short) => Peak::EarlySide,
            (Path::Short, Path::Long) => Peak::LateSide,
            _ => Peak::Central,
        }
    }

    /// Nominal pair offset `t_b - t_a` in units of ΔT.
    pub fn offset_units(self) -> f64 {
        match self {
            Peak::EarlySide => -1.0,
            Peak::Central => 0.0,
            Peak::LateSide => 1.0,
        }
    }
}

/// Arms and output ports taken by the two photons of one pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointOutcome {
    pub path_a: Path,
    pub path_b: Path,
    pub port_a: u8,
    pub port_b: u8,
}

impl JointOutcome {
    pub fn peak(&self) -> Peak {
        Peak::from_paths(self.path_a, self.path_b)
    }

    pub fn delay_a_ps(&self, delta_t_ps: f64) -> f64 {
        if self.path_a == Path::Long { delta_t_ps } else { 0.0 }
    }

    pub fn delay_b_ps(&self, delta_t_ps: f64) -> f64 {
        if self.path_b == Path::Long { delta_t_ps } else { 0.0 }
    }
}

fn random_path<R: Rng + ?Sized>(rng: &mut R) -> Path {
    if rng.random::<bool>() { Path::Long } else { Path::Short }
}

fn random_port<R: Rng + ?Sized>(rng: &mut R) -> u8 {
    u8::from(rng.random::<bool>())
}

/// Sample arms and two-port outputs for one pair.
///
/// Central events have uniform marginal ports with
/// `P(port_a = port_b) = (1 + V cos φ)/2`; side events have independent
/// uniform ports.
pub fn sample_joint<R: Rng + ?Sized>(rng: &mut R, phase_sum: f64, visibility: f64) -> JointOutcome {
    let path_a = random_path(rng);
    let path_b = random_path(rng);
    let port_a = random_port(rng);
    let port_b = if path_a == path_b {
        let p_same = 0.5 * (1.0 + visibility * phase_sum.cos());
        if rng.random::<f64>() < p_same { port_a } else { 1 - port_a }
    } else {
        random_port(rng)
    };
    JointOutcome {
        path_a,
        path_b,
        port_a,
        port_b,
    }
}

/// One photon through an analyzer whose partner is not detected.
pub fn sample_single<R: Rng + ?Sized>(rng: &mut R) -> (Path, u8) {
    (random_path(rng), random_port(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedOutcome {
    pub peak: Peak,
    pub port_a: u8,
    pub port_b: u8,
    /// Detection-plane times including the arm delays.
    pub signal_ps: f64,
    pub idler_ps: f64,
}

pub fn check_visibility(v: f64) -> Result<f64> {
    check_range("visibility", v, 0.0, 1.0)
}

/// Pass a pair through analyzer `a` (signal) and `b` (idler).
///
/// Single-port analyzers only report pairs where both photons leave the
/// monitored port 0; two-port analyzers report every pair.
pub fn analyze_pair<R: Rng + ?Sized>(
    pair: &PairEvent,
    config_a: &InterferometerConfig,
    config_b: &InterferometerConfig,
    visibility: f64,
    rng: &mut R,
) -> Result<Option<AnalyzedOutcome>> {
    check_visibility(visibility)?;
    let phase_sum = config_a.total_phase() + config_b.total_phase();
    let j = sample_joint(rng, phase_sum, visibility);
    if (config_a.ports == 1 && j.port_a != 0) || (config_b.ports == 1 && j.port_b != 0) {
        return Ok(None);
    }
    Ok(Some(AnalyzedOutcome {
        peak: j.peak(),
        port_a: j.port_a,
        port_b: j.port_b,
        signal_ps: pair.signal_ps + j.delay_a_ps(config_a.delta_t_ps()),
        idler_ps: pair.idler_ps + j.delay_b_ps(config_b.delta_t_ps()),
    }))
}

/// Joint single-port detection probability in the central peak.
pub fn central_probability(phase_sum: f64, visibility: f64) -> f64 {
    (1.0 + visibility * phase_sum.cos()) / 8.0
}

/// `[early, central, late, none]` for a pair of single-port analyzers.
pub fn outcome_probabilities(phase_sum: f64, visibility: f64) -> [f64; 4] {
    let c = central_probability(phase_sum, visibility);
    let side = 1.0 / 16.0;
    [side, c, side, 1.0 - c - 2.0 * side]
}

/// Largest relative deviation of per-phase singles rates from their mean.
pub fn singles_rate_check(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::EmptyData("no singles rates".into()));
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    if mean <= 0.0 {
        return Err(Error::EmptyData("singles rates are all zero".into()));
    }
    Ok(rates
        .iter()
        .map(|r| (r - mean).abs() / mean)
        .fold(0.0, f64::max))
}

/// Evenly spaced phase settings covering `[start, stop]`.
pub fn phase_sweep(start: f64, stop: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![start],
        n => (0..n)
            .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn full_turn(steps: usize) -> Vec<f64> {
    phase_sweep(0.0, 2.0 * PI, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn pair() -> PairEvent {
        PairEvent { signal_ps: 1e6, idler_ps: 1e6 + 40.0, edge: 0 }
    }

    #[test]
    fn central_probability_examples() {
        assert!((central_probability(0.0, 1.0) - 0.25).abs() < 1e-15);
        for v in [0.0, 0.3, 1.0] {
            assert!((central_probability(PI / 2.0, v) - 0.125).abs() < 1e-15);
        }
        assert!((central_probability(0.0, 0.856) - 0.232).abs() < 1e-12);
        assert!((central_probability(0.0, 1.0) / outcome_probabilities(0.0, 1.0)[0] - 4.0).abs() < 1e-12);
        assert!(central_probability(PI, 1.0).abs() < 1e-15);
    }

    #[test]
    fn regime_validation() {
        let c = InterferometerConfig::default();
        assert!(c.validate(250.8, 2.7).is_ok());
        assert!(c.validate(600.0, 2.7).is_err());
        assert!(c.validate(250.8, 1e-3).is_err());
        assert!(InterferometerConfig { ports: 3, ..c.clone() }.validate(250.8, 2.7).is_err());
    }

    #[test]
    fn analyze_pair_single_port_law() {
        let a = InterferometerConfig::default();
        let b = InterferometerConfig::default();
        let mut rng = substream(1, "franson", &[]);
        let n = 400_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            match analyze_pair(&pair(), &a, &b, 1.0, &mut rng).unwrap() {
                Some(o) => {
                    assert_eq!((o.port_a, o.port_b), (0, 0));
                    let d = o.idler_ps - o.signal_ps - 40.0;
                    let expected = o.peak.offset_units() * 2500.0;
                    assert!((d - expected).abs() < 1e-6);
                    counts[match o.peak {
                        Peak::EarlySide => 0,
                        Peak::Central => 1,
                        Peak::LateSide => 2,
                    }] += 1;
                }
                None => counts[3] += 1,
            }
        }
        let probs = outcome_probabilities(0.0, 1.0);
        for (c, p) in counts.iter().zip(probs) {
            let want = p * n as f64;
            assert!((*c as f64 - want).abs() < 5.0 * want.sqrt().max(1.0), "{c} vs {want}");
        }
        assert!(analyze_pair(&pair(), &a, &b, 1.5, &mut rng).is_err());
    }

    #[test]
    fn two_port_qber_link() {
        let a = InterferometerConfig { ports: 2, ..InterferometerConfig::default() };
        let mut rng = substream(2, "franson", &[]);
        let v = 0.9;
        let (mut same, mut total) = (0usize, 0usize);
        for _ in 0..200_000 {
            let o = analyze_pair(&pair(), &a, &a, v, &mut rng).unwrap().unwrap();
            if o.peak == Peak::Central {
                total += 1;
                same += usize::from(o.port_a == o.port_b);
            }
        }
        let mismatch = 1.0 - same as f64 / total as f64;
        let se = (0.05 * 0.95 / total as f64).sqrt();
        assert!((mismatch - (1.0 - v) / 2.0).abs() < 4.0 * se, "{mismatch}");
    }

    #[test]
    fn two_port_total_is_phase_free() {
        let mut rng = substream(3, "franson", &[]);
        for phi in [0.0, PI / 3.0, PI] {
            let mut central = 0usize;
            for _ in 0..100_000 {
                let j = sample_joint(&mut rng, phi, 1.0);
                central += usize::from(j.peak() == Peak::Central);
            }
            assert!((central as f64 - 50_000.0).abs() < 5.0 * 158.0);
        }
    }

    #[test]
    fn singles_check() {
        assert!((singles_rate_check(&[99.0, 101.0, 100.0]).unwrap() - 0.01).abs() < 1e-12);
        assert!(singles_rate_check(&[]).is_err());
        assert!(singles_rate_check(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn sweep_points() {
        let s = full_turn(5);
        assert_eq!(s.len(), 5);
        assert!((s[4] - 2.0 * PI).abs() < 1e-15);
        assert_eq!(phase_sweep(1.0, 2.0, 1), vec![1.0]);
    }

    proptest! {
        #[test]
        fn probabilities_conserve(phi in -10.0f64..10.0, v in 0.0f64..=1.0) {
            let p = outcome_probabilities(phi, v);
            prop_assert!(p.iter().all(|x| *x >= 0.0 && *x <= 1.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
