//! Photon-pair emission from the microring.
//!
//! Pairs arrive as a homogeneous Poisson process at `PGR * P^2` per edge and
//! the idler lags the signal by a Laplace(τc) offset, so the ideal
//! coincidence histogram is exactly `exp(-|Δt|/τc)`.
//!
//! Emission is organised in fixed chunks of [`CHUNK_SECONDS`]; each chunk
//! draws from its own RNG substream so long runs can be streamed without
//! holding every event in memory and any chunk can be regenerated alone.

use std::io::{self, BufRead, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::rng::{substream, SimRng};

pub const CHUNK_SECONDS: f64 = 10.0;
pub const PS_PER_SECOND: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Pair generation rate per channel pair, s⁻¹·mW⁻².
    pub pgr_per_mw2: f64,
    pub pump_power_mw: f64,
    pub coherence_time_ps: f64,
    /// Pump coherence time in µs. Only used to check the Franson regime.
    pub pump_coherence_time_us: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            pgr_per_mw2: 8.3e3,
            pump_power_mw: 1.0,
            coherence_time_ps: 250.0,
            pump_coherence_time_us: 2.7,
            duration_s: 10.0,
            seed: 0,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("pgr_per_mw2", self.pgr_per_mw2, 0.0, f64::MAX)?;
        check_range("pump_power_mw", self.pump_power_mw, 0.0, f64::MAX)?;
        if !(self.coherence_time_ps > 0.0 && self.coherence_time_ps.is_finite()) {
            return Err(Error::Configuration(format!(
                "coherence time must be positive, got {} ps",
                self.coherence_time_ps
            )));
        }
        if self.pump_coherence_time_us * 1e6 < 1000.0 * self.coherence_time_ps {
            return Err(Error::Configuration(format!(
                "pump coherence time {} us is not >= 1000 x tau_c ({} ps)",
                self.pump_coherence_time_us, self.coherence_time_ps
            )));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Configuration(format!(
                "duration must be positive, got {} s",
                self.duration_s
            )));
        }
        Ok(())
    }

    pub fn chunk_count(&self) -> u64 {
        (self.duration_s / CHUNK_SECONDS).ceil().max(1.0) as u64
    }

    /// Start and length (seconds) of chunk `k`.
    pub fn chunk_span(&self, k: u64) -> (f64, f64) {
        let start = k as f64 * CHUNK_SECONDS;
        (start, (self.duration_s - start).min(CHUNK_SECONDS).max(0.0))
    }
}

/// Pairs per second for one channel pair.
pub fn pair_rate(config: &SourceConfig) -> f64 {
    config.pgr_per_mw2 * config.pump_power_mw * config.pump_power_mw
}

/// Rate of two independent pairs landing inside one coincidence window.
pub fn multi_pair_rate(config: &SourceConfig, window_ns: f64) -> f64 {
    let r = pair_rate(config);
    r * r * window_ns * 1e-9
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEvent {
    pub signal_ps: f64,
    pub idler_ps: f64,
    pub edge: usize,
}

/// Two-sided exponential offset with scale `tau`.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, tau: f64) -> f64 {
    let magnitude = Exp::new(1.0).expect("unit rate").sample(rng) * tau;
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

/// Sorted Poisson arrival times (ps) on `[0, len_ps)` at `rate_per_ps`.
pub fn poisson_times<R: Rng + ?Sized>(rng: &mut R, rate_per_ps: f64, len_ps: f64) -> Vec<f64> {
    if rate_per_ps <= 0.0 || len_ps <= 0.0 {
        return Vec::new();
    }
    let expected = rate_per_ps * len_ps;
    let n = if expected > 0.0 {
        Poisson::new(expected).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * len_ps).collect();
    times.sort_unstable_by(f64::total_cmp);
    times
}

fn chunk_rng(config: &SourceConfig, label: &str, id: u64, chunk: u64) -> SimRng {
    substream(config.seed, label, &[id, chunk])
}

/// Pairs of chunk `k`, with times relative to the chunk start.
pub fn emit_chunk(config: &SourceConfig, edge: usize, k: u64) -> Vec<PairEvent> {
    let (_, len) = config.chunk_span(k);
    let mut rng = chunk_rng(config, "pairs", edge as u64, k);
    let rate = pair_rate(config) / PS_PER_SECOND;
    poisson_times(&mut rng, rate, len * PS_PER_SECOND)
        .into_iter()
        .map(|t| PairEvent {
            signal_ps: t,
            idler_ps: t + sample_laplace(&mut rng, config.coherence_time_ps),
            edge,
        })
        .collect()
}

/// Every pair of the run for one edge, ordered by signal time.
pub fn emit_pairs(config: &SourceConfig, edge: usize) -> Result<Vec<PairEvent>> {
    config.validate()?;
    let mut out = Vec::new();
    for k in 0..config.chunk_count() {
        let (start, _) = config.chunk_span(k);
        let offset = start * PS_PER_SECOND;
        out.extend(emit_chunk(config, edge, k).into_iter().map(|p| PairEvent {
            signal_ps: p.signal_ps + offset,
            idler_ps: p.idler_ps + offset,
            ..p
        }));
    }
    Ok(out)
}

/// A pair for which at least one photon survives the channel losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectablePair {
    pub signal_ps: Option<f64>,
    pub idler_ps: Option<f64>,
    pub edge: usize,
}

/// Chunk `k` of pairs already thinned by the signal and idler transmissions.
///
/// Only pairs with at least one surviving photon are generated: they form a
/// Poisson process at `r * (1 - (1-ηs)(1-ηi))` and the survivor pattern is
/// drawn conditionally. The result has the same law as [`emit_chunk`]
/// followed by independent per-photon loss, at a fraction of the cost when
/// the transmissions are small.
pub fn emit_detectable_chunk(
    config: &SourceConfig,
    edge: usize,
    k: u64,
    eta_signal: f64,
    eta_idler: f64,
) -> Vec<DetectablePair> {
    let (_, len) = config.chunk_span(k);
    let p_any = 1.0 - (1.0 - eta_signal) * (1.0 - eta_idler);
    if p_any <= 0.0 {
        return Vec::new();
    }
    let p_both = eta_signal * eta_idler / p_any;
    let p_signal_only = eta_signal * (1.0 - eta_idler) / p_any;
    let mut rng = chunk_rng(config, "detectable-pairs", edge as u64, k);
    let rate = pair_rate(config) * p_any / PS_PER_SECOND;
    poisson_times(&mut rng, rate, len * PS_PER_SECOND)
        .into_iter()
        .map(|t| {
            let idler = t + sample_laplace(&mut rng, config.coherence_time_ps);
            let u: f64 = rng.random();
            let (s, i) = if u < p_both {
                (true, true)
            } else if u < p_both + p_signal_only {
                (true, false)
            } else {
                (false, true)
            };
            DetectablePair {
                signal_ps: s.then_some(t),
                idler_ps: i.then_some(idler),
                edge,
            }
        })
        .collect()
}

/// Uncorrelated single photons in one channel (chunk-relative, sorted).
pub fn emit_noise_chunk(config: &SourceConfig, channel_id: u64, k: u64, rate_per_s: f64) -> Vec<f64> {
    let (_, len) = config.chunk_span(k);
    let mut rng = chunk_rng(config, "noise", channel_id, k);
    poisson_times(&mut rng, rate_per_s / PS_PER_SECOND, len * PS_PER_SECOND)
}

/// CSV with header `edge,signal_ps,idler_ps`.
pub fn write_pairs_csv<W: Write>(mut w: W, pairs: &[PairEvent]) -> io::Result<()> {
    writeln!(w, "edge,signal_ps,idler_ps")?;
    for p in pairs {
        writeln!(w, "{},{},{}", p.edge, p.signal_ps, p.idler_ps)?;
    }
    Ok(())
}

pub fn read_pairs_csv<R: BufRead>(r: R) -> io::Result<Vec<PairEvent>> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(format!("line {}: expected 3 fields", n + 1)));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 1)));
        out.push(PairEvent {
            edge: f[0].trim().parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?,
            signal_ps: num(f[1])?,
            idler_ps: num(f[2])?,
        });
    }
    Ok(out)
}

/// Little-endian records of `u32 edge, f64 signal_ps, f64 idler_ps`.
pub fn write_pairs_binary<W: Write>(mut w: W, pairs: &[PairEvent]) -> io::Result<()> {
    for p in pairs {
        w.write_all(&(p.edge as u32).to_le_bytes())?;
        w.write_all(&p.signal_ps.to_le_bytes())?;
        w.write_all(&p.idler_ps.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_pairs_binary<R: Read>(mut r: R) -> io::Result<Vec<PairEvent>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % 20 != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "truncated pair record"));
    }
    Ok(buf
        .chunks_exact(20)
        .map(|c| PairEvent {
            edge: u32::from_le_bytes(c[0..4].try_into().unwrap()) as usize,
            signal_ps: f64::from_le_bytes(c[4..12].try_into().unwrap()),
            idler_ps: f64::from_le_bytes(c[12..20].try_into().unwrap()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(power: f64, duration: f64) -> SourceConfig {
        SourceConfig {
            pgr_per_mw2: 1e3,
            pump_power_mw: power,
            coherence_time_ps: 250.0,
            duration_s: duration,
            seed: 42,
            ..SourceConfig::default()
        }
    }

    #[test]
    fn rate_examples() {
        let c = SourceConfig::default();
        assert_eq!(pair_rate(&c), 8.3e3);
        assert_eq!(pair_rate(&SourceConfig { pump_power_mw: 0.0, ..c.clone() }), 0.0);
        assert_eq!(pair_rate(&SourceConfig { pump_power_mw: 2.0, ..c.clone() }), 4.0 * 8.3e3);
    }

    #[test]
    fn multi_pair_examples() {
        let c = SourceConfig { pgr_per_mw2: 1e4, pump_power_mw: 1.0, ..SourceConfig::default() };
        assert!((multi_pair_rate(&c, 2.5) - 0.25).abs() < 1e-12);
        let doubled = SourceConfig { pump_power_mw: 2.0, ..c.clone() };
        assert!((multi_pair_rate(&doubled, 2.5) / multi_pair_rate(&c, 2.5) - 16.0).abs() < 1e-9);
        assert_eq!(multi_pair_rate(&SourceConfig { pump_power_mw: 0.0, ..c }, 2.5), 0.0);
    }

    #[test]
    fn validation() {
        assert!(config(1.0, 10.0).validate().is_ok());
        assert!(config(-1.0, 10.0).validate().is_err());
        assert!(config(1.0, 0.0).validate().is_err());
        let mut c = config(1.0, 10.0);
        c.coherence_time_ps = 0.0;
        assert!(c.validate().is_err());
        c.coherence_time_ps = 250.0;
        c.pump_coherence_time_us = 1e-4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn poisson_count_and_ordering() {
        let pairs = emit_pairs(&config(1.0, 10.0), 0).unwrap();
        let n = pairs.len() as f64;
        assert!((n - 1e4).abs() < 5.0 * 100.0, "{n}");
        assert!(pairs.windows(2).all(|w| w[0].signal_ps <= w[1].signal_ps));
        assert!(pairs.iter().all(|p| p.signal_ps >= 0.0 && p.signal_ps < 10.0 * PS_PER_SECOND));
    }

    #[test]
    fn tiny_duration_is_almost_surely_empty() {
        assert!(emit_pairs(&config(1.0, 1e-6), 0).unwrap().len() <= 1);
    }

    #[test]
    fn deterministic_and_edge_distinct() {
        let c = config(1.0, 1.0);
        assert_eq!(emit_pairs(&c, 3).unwrap(), emit_pairs(&c, 3).unwrap());
        assert_ne!(emit_pairs(&c, 3).unwrap(), emit_pairs(&c, 4).unwrap());
    }

    #[test]
    fn laplace_offsets() {
        let c = SourceConfig { pgr_per_mw2: 2e4, ..config(1.0, 10.0) };
        let d: Vec<f64> = emit_pairs(&c, 0)
            .unwrap()
            .iter()
            .map(|p| p.idler_ps - p.signal_ps)
            .collect();
        assert!(d.len() >= 100_000);
        let mean_abs = d.iter().map(|x| x.abs()).sum::<f64>() / d.len() as f64;
        assert!((mean_abs / 250.0 - 1.0).abs() < 0.02, "{mean_abs}");

        // Kolmogorov-Smirnov against the Laplace CDF.
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let cdf = |x: f64| {
            if x < 0.0 {
                0.5 * (x / 250.0).exp()
            } else {
                1.0 - 0.5 * (-x / 250.0).exp()
            }
        };
        let dmax = sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic critical value for p = 0.01.
        assert!(dmax < 1.628 / n.sqrt(), "KS statistic {dmax}");
    }

    #[test]
    fn quadratic_power_law() {
        let powers = [0.5, 1.0, 2.0, 4.0];
        let pts: Vec<(f64, f64)> = powers
            .iter()
            .map(|&p| {
                let n = emit_pairs(&config(p, 20.0), 0).unwrap().len() as f64;
                (p.ln(), n.ln())
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / 4.0;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / 4.0;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - 2.0).abs() < 0.05, "{slope}");
    }

    #[test]
    fn detectable_pairs_match_thinning_rates() {
        let c = SourceConfig { pgr_per_mw2: 5e4, ..config(1.0, 10.0) };
        let (es, ei) = (0.3, 0.1);
        let pairs: Vec<DetectablePair> = (0..c.chunk_count())
            .flat_map(|k| emit_detectable_chunk(&c, 0, k, es, ei))
            .collect();
        let r = pair_rate(&c) * c.duration_s;
        let both = pairs.iter().filter(|p| p.signal_ps.is_some() && p.idler_ps.is_some()).count() as f64;
        let s = pairs.iter().filter(|p| p.signal_ps.is_some()).count() as f64;
        let i = pairs.iter().filter(|p| p.idler_ps.is_some()).count() as f64;
        for (got, want) in [(both, r * es * ei), (s, r * es), (i, r * ei)] {
            assert!((got - want).abs() < 5.0 * want.sqrt(), "{got} vs {want}");
        }
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let pairs = emit_pairs(&config(1.0, 0.01), 2).unwrap();
        assert!(!pairs.is_empty());
        let mut csv = Vec::new();
        write_pairs_csv(&mut csv, &pairs).unwrap();
        assert_eq!(read_pairs_csv(csv.as_slice()).unwrap(), pairs);
        let mut bin = Vec::new();
        write_pairs_binary(&mut bin, &pairs).unwrap();
        assert_eq!(bin.len(), 20 * pairs.len());
        assert_eq!(read_pairs_binary(bin.as_slice()).unwrap(), pairs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn emission_is_deterministic(seed in any::<u64>(), edge in 0usize..16) {
            let c = SourceConfig { seed, ..config(1.0, 0.05) };
            prop_assert_eq!(emit_pairs(&c, edge).unwrap(), emit_pairs(&c, edge).unwrap());
        }
    }
}
