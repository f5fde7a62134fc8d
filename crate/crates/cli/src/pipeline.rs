//! Chunked photon-level engine shared by every simulation stage.
//!
//! Links (one per entangled channel pair) emit pairs chunk by chunk, the
//! photons go through their analyzers and fiber delays into per-user
//! detectors, and the finalized tags of each chunk are handed to a sink.

use qnet_core::control::LockStatus;
use qnet_core::detection_sim::{Detector, DetectorSpec};
use qnet_core::franson::{sample_joint, sample_single, InterferometerConfig, Path, Peak};
use qnet_core::qkd::{route_basis, Basis, BasisOutcome, BasisSetting};
use qnet_core::rng::{substream, SimRng};
use qnet_core::source_sim::{emit_detectable_chunk, emit_noise_chunk, SourceConfig, CHUNK_SECONDS, PS_PER_SECOND};
use qnet_core::{Error, Result};

use crate::scenario::AnalyzerMode;

/// Tags later chunks can still produce below this distance from the chunk
/// end: fiber delays, Franson arm, jitter and the pair time spread.
const HORIZON_MARGIN_PS: f64 = 1e6;

impl AnalyzerMode {
    /// Detectors behind one user's analyzer.
    pub fn detectors_per_slot(self) -> usize {
        match self {
            AnalyzerMode::Direct | AnalyzerMode::SinglePort => 1,
            AnalyzerMode::DualPort => 2,
            AnalyzerMode::Bbm92 => 4,
        }
    }

    fn local_detector(self, basis: Basis, port: u8) -> Option<usize> {
        match self {
            AnalyzerMode::Direct => Some(0),
            AnalyzerMode::SinglePort => (port == 0).then_some(0),
            AnalyzerMode::DualPort => Some(port as usize),
            AnalyzerMode::Bbm92 => Some(basis_index(basis) * 2 + port as usize),
        }
    }
}

fn basis_index(b: Basis) -> usize {
    match b {
        Basis::Z => 0,
        Basis::X => 1,
    }
}

/// One entangled channel pair. The signal photon goes to `slot_a`, the
/// idler to `slot_b`.
#[derive(Clone, Debug)]
pub struct Link {
    pub edge_id: usize,
    pub source: SourceConfig,
    pub slot_a: usize,
    pub slot_b: usize,
    /// Chip-to-detector transmission of each arm, analyzer included.
    pub eta_a: f64,
    pub eta_b: f64,
    pub delay_a_ps: f64,
    pub delay_b_ps: f64,
    pub visibility: f64,
}

/// Uncorrelated photons in one channel, already scaled by the channel loss.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    pub channel_id: u64,
    pub slot: usize,
    pub rate_per_s: f64,
    pub delay_ps: f64,
}

#[derive(Clone, Debug)]
pub struct Setup {
    pub mode: AnalyzerMode,
    pub interferometer: InterferometerConfig,
    /// Analyzer phase per slot (single- and dual-port modes).
    pub phases: Vec<f64>,
    /// Fixed phase offset per slot.
    pub offsets: Vec<f64>,
    /// Phase-lock traces indexed by `2 * slot + basis` (BBM92 only).
    pub locks: Option<Vec<LockStatus>>,
    pub detectors: Vec<DetectorSpec>,
    pub duration_s: f64,
    pub seed: u64,
    pub links: Vec<Link>,
    pub noise: Vec<NoiseSource>,
}

impl Setup {
    pub fn slots(&self) -> usize {
        self.detectors.len()
    }

    pub fn detector_count(&self) -> usize {
        self.slots() * self.mode.detectors_per_slot()
    }

    pub fn detector_id(&self, slot: usize, local: usize) -> usize {
        slot * self.mode.detectors_per_slot() + local
    }

    fn chunk_count(&self) -> u64 {
        (self.duration_s / CHUNK_SECONDS).ceil().max(1.0) as u64
    }

    fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::Configuration("simulation duration must be positive".into()));
        }
        let slots = self.slots();
        if self.phases.len() != slots || self.offsets.len() != slots {
            return Err(Error::Configuration("phase and offset lists must cover every slot".into()));
        }
        for l in &self.links {
            if l.slot_a >= slots || l.slot_b >= slots {
                return Err(Error::Configuration(format!("link {} uses an unknown slot", l.edge_id)));
            }
            l.source.validate()?;
        }
        if let Some(locks) = &self.locks {
            if locks.len() != 2 * slots {
                return Err(Error::Configuration("need one phase lock per slot and basis".into()));
            }
        }
        Ok(())
    }

    fn lock_error(&self, slot: usize, basis: Basis, t_s: f64) -> f64 {
        match &self.locks {
            Some(l) => l[2 * slot + basis_index(basis)].error_at(t_s),
            None => 0.0,
        }
    }

    fn photon_phase(&self, slot: usize, setting: &BasisSetting, signal: bool, t_s: f64) -> f64 {
        let base = match self.mode {
            AnalyzerMode::Bbm92 => {
                let p = if signal { setting.analyzer_phase_a() } else { setting.analyzer_phase_b() };
                p + self.lock_error(slot, setting.basis, t_s)
            }
            _ => self.phases[slot],
        };
        base + self.offsets[slot]
    }
}

struct Arrivals {
    per_detector: Vec<Vec<f64>>,
    delta_t_ps: f64,
}

impl Arrivals {
    fn push(&mut self, setup: &Setup, slot: usize, basis: Basis, path: Path, port: u8, t_ps: f64) {
        if let Some(local) = setup.mode.local_detector(basis, port) {
            let arm = if setup.mode != AnalyzerMode::Direct && path == Path::Long { self.delta_t_ps } else { 0.0 };
            self.per_detector[setup.detector_id(slot, local)].push(t_ps + arm);
        }
    }
}

fn random_basis(mode: AnalyzerMode, rng: &mut SimRng) -> BasisSetting {
    if mode == AnalyzerMode::Bbm92 {
        route_basis(rng)
    } else {
        BasisSetting::of(Basis::Z)
    }
}

/// Run the engine, handing each chunk's finalized tags (bins per detector)
/// to `sink`. Tags arrive in time order per detector across chunks.
pub fn run<F>(setup: &Setup, mut sink: F) -> Result<()>
where
    F: FnMut(u64, &[Vec<u64>]) -> Result<()>,
{
    setup.validate()?;
    let n_det = setup.detector_count();
    let per_slot = setup.mode.detectors_per_slot();
    let mut detectors = (0..n_det)
        .map(|d| Detector::new(d as u32, setup.detectors[d / per_slot].clone(), setup.duration_s))
        .collect::<Result<Vec<_>>>()?;
    let clock = SourceConfig {
        duration_s: setup.duration_s,
        seed: setup.seed,
        ..SourceConfig::default()
    };
    let chunks = setup.chunk_count();
    for k in 0..chunks {
        let (start_s, len_s) = clock.chunk_span(k);
        let start_ps = start_s * PS_PER_SECOND;
        let mut arrivals = Arrivals {
            per_detector: vec![Vec::new(); n_det],
            delta_t_ps: setup.interferometer.delta_t_ps(),
        };
        for link in &setup.links {
            let source = SourceConfig {
                duration_s: setup.duration_s,
                seed: setup.seed,
                ..link.source.clone()
            };
            let pairs = emit_detectable_chunk(&source, link.edge_id, k, link.eta_a, link.eta_b);
            let mut rng = substream(setup.seed, "analyzer", &[link.edge_id as u64, k]);
            for p in pairs {
                let t_s = start_s + p.signal_ps.or(p.idler_ps).unwrap_or(0.0) / PS_PER_SECOND;
                let set_a = random_basis(setup.mode, &mut rng);
                let set_b = random_basis(setup.mode, &mut rng);
                let ((path_a, port_a), (path_b, port_b)) = match (p.signal_ps, p.idler_ps) {
                    (Some(_), Some(_)) => {
                        let phase_sum = setup.photon_phase(link.slot_a, &set_a, true, t_s)
                            + setup.photon_phase(link.slot_b, &set_b, false, t_s);
                        let j = sample_joint(&mut rng, phase_sum, link.visibility);
                        ((j.path_a, j.port_a), (j.path_b, j.port_b))
                    }
                    _ => (sample_single(&mut rng), sample_single(&mut rng)),
                };
                if let Some(s) = p.signal_ps {
                    arrivals.push(setup, link.slot_a, set_a.basis, path_a, port_a, start_ps + s + link.delay_a_ps);
                }
                if let Some(i) = p.idler_ps {
                    arrivals.push(setup, link.slot_b, set_b.basis, path_b, port_b, start_ps + i + link.delay_b_ps);
                }
            }
        }
        for n in &setup.noise {
            let times = emit_noise_chunk(&clock, n.channel_id, k, n.rate_per_s);
            let mut rng = substream(setup.seed, "noise-route", &[n.channel_id, k]);
            for t in times {
                let basis = random_basis(setup.mode, &mut rng).basis;
                let (path, port) = sample_single(&mut rng);
                arrivals.push(setup, n.slot, basis, path, port, start_ps + t + n.delay_ps);
            }
        }
        let end_ps = (start_s + len_s) * PS_PER_SECOND;
        let mut tags = Vec::with_capacity(n_det);
        for (d, det) in detectors.iter_mut().enumerate() {
            let mut rng = substream(setup.seed, "detector", &[d as u64, k]);
            det.feed(&arrivals.per_detector[d], start_ps, len_s * PS_PER_SECOND, &mut rng);
            tags.push(if k + 1 == chunks { det.finish() } else { det.drain_before(end_ps - HORIZON_MARGIN_PS) });
        }
        sink(k, &tags)?;
    }
    Ok(())
}

/// Streaming coincidence classifier for a two-party BBM92 link.
///
/// Pairs every tag of party `a` with the tags of party `b` whose delay
/// falls in the central window or one of the two side-peak windows.
/// Pairs that straddle chunk boundaries are found through a short tail
/// carried between calls.
#[derive(Clone, Debug)]
pub struct BasisMatcher {
    resolution_ps: f64,
    window_ps: f64,
    delta_t_ps: f64,
    /// Expected `b - a` delay of true coincidences.
    offset_ps: f64,
    det_a: usize,
    det_b: usize,
    reach: u64,
    tail_a: Vec<(u64, u8)>,
    tail_b: Vec<(u64, u8)>,
}

impl BasisMatcher {
    /// `det_a`/`det_b` are the first of the four detectors of each party.
    pub fn new(resolution_ps: f64, window_ns: f64, delta_t_ns: f64, offset_ps: f64, det_a: usize, det_b: usize) -> Self {
        let window_ps = window_ns * 1e3;
        let delta_t_ps = delta_t_ns * 1e3;
        let reach_ps = offset_ps.abs() + delta_t_ps + window_ps;
        BasisMatcher {
            resolution_ps,
            window_ps,
            delta_t_ps,
            offset_ps,
            det_a,
            det_b,
            reach: (reach_ps / resolution_ps).ceil() as u64 + 2,
            tail_a: Vec::new(),
            tail_b: Vec::new(),
        }
    }

    /// Merge the four sorted detector streams of one party.
    fn merged(tags: &[Vec<u64>], first: usize) -> Vec<(u64, u8)> {
        let lists = &tags[first..first + 4];
        let mut pos = [0usize; 4];
        let mut v = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        loop {
            let mut best: Option<(u64, u8)> = None;
            for (l, list) in lists.iter().enumerate() {
                if let Some(&b) = list.get(pos[l]) {
                    if best.is_none_or(|x| b < x.0) {
                        best = Some((b, l as u8));
                    }
                }
            }
            match best {
                Some(x) => {
                    pos[x.1 as usize] += 1;
                    v.push(x);
                }
                None => return v,
            }
        }
    }

    fn classify(&self, a: &[(u64, u8)], b: &[(u64, u8)], out: &mut impl FnMut(BasisOutcome)) {
        let lo_ps = self.offset_ps - self.delta_t_ps - self.window_ps / 2.0;
        let hi_ps = self.offset_ps + self.delta_t_ps + self.window_ps / 2.0;
        let peaks = [
            (Peak::EarlySide, -self.delta_t_ps),
            (Peak::Central, 0.0),
            (Peak::LateSide, self.delta_t_ps),
        ];
        for &(ta, la) in a {
            let lo = (ta as f64 + (lo_ps / self.resolution_ps).floor()).max(0.0) as u64;
            let start = b.partition_point(|x| x.0 < lo);
            for &(tb, lb) in &b[start..] {
                let d = (tb as f64 - ta as f64) * self.resolution_ps;
                if d > hi_ps {
                    break;
                }
                let rel = d - self.offset_ps;
                let hw = self.window_ps / 2.0;
                if let Some(&(peak, _)) = peaks.iter().find(|(_, c)| rel >= c - hw && rel < c + hw) {
                    let basis = |l: u8| if l < 2 { Basis::Z } else { Basis::X };
                    out(BasisOutcome {
                        peak,
                        basis_a: basis(la),
                        basis_b: basis(lb),
                        port_a: la % 2,
                        port_b: lb % 2,
                        time_s: ta as f64 * self.resolution_ps / PS_PER_SECOND,
                    });
                }
            }
        }
    }

    pub fn push(&mut self, tags: &[Vec<u64>], mut out: impl FnMut(BasisOutcome)) {
        let new_a = Self::merged(tags, self.det_a);
        let new_b = Self::merged(tags, self.det_b);
        let mut b_all = std::mem::take(&mut self.tail_b);
        b_all.extend_from_slice(&new_b);
        self.classify(&new_a, &b_all, &mut out);
        let tail_a = std::mem::take(&mut self.tail_a);
        self.classify(&tail_a, &new_b, &mut out);

        let mut a_all = tail_a;
        a_all.extend_from_slice(&new_a);
        let newest = a_all.last().map(|x| x.0).max(b_all.last().map(|x| x.0)).unwrap_or(0);
        let keep_from = newest.saturating_sub(self.reach);
        a_all.retain(|x| x.0 >= keep_from);
        b_all.retain(|x| x.0 >= keep_from);
        self.tail_a = a_all;
        self.tail_b = b_all;
    }
}

/// Combined transmission of a channel loss and an analyzer insertion loss.
pub fn transmission(loss_db: f64, analyzer_db: f64) -> f64 {
    10f64.powf((loss_db + analyzer_db) / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use qnet_core::analysis::HistogramAccumulator;
    use qnet_core::franson::outcome_probabilities;

    fn fingerprint(tags: &[Vec<u64>]) -> u64 {
        tags.iter()
            .flatten()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b).wrapping_mul(0x0000_0100_0000_01b3))
    }

    fn one_link(mode: AnalyzerMode, phase: f64, duration_s: f64) -> Setup {
        let ports = if mode == AnalyzerMode::SinglePort { 1 } else { 2 };
        Setup {
            mode,
            interferometer: InterferometerConfig {
                ports,
                ..InterferometerConfig::default()
            },
            phases: vec![phase, 0.0],
            offsets: vec![0.0, 0.0],
            locks: None,
            detectors: vec![DetectorSpec { dark_count_rate: 0.0, ..DetectorSpec::default() }; 2],
            duration_s,
            seed: 11,
            links: vec![Link {
                edge_id: 0,
                source: SourceConfig {
                    pgr_per_mw2: 2e4,
                    ..SourceConfig::default()
                },
                slot_a: 0,
                slot_b: 1,
                eta_a: 0.5,
                eta_b: 0.5,
                delay_a_ps: 0.0,
                delay_b_ps: 0.0,
                visibility: 1.0,
            }],
            noise: Vec::new(),
        }
    }

    fn central_and_side(setup: &Setup) -> (f64, f64) {
        let mut acc = HistogramAccumulator::new(156.25, 156.25, 20.0);
        run(setup, |_, tags| {
            acc.push(&tags[0], &tags[1]);
            Ok(())
        })
        .unwrap();
        let h = acc.finish();
        let sum = |c: f64| {
            (0..h.len())
                .filter(|&i| (h.center(i) - c).abs() < 1000.0)
                .map(|i| h.counts[i] as f64)
                .sum::<f64>()
        };
        (sum(0.0), sum(-2500.0) + sum(2500.0))
    }

    #[test]
    fn single_port_peaks_follow_outcome_probabilities() {
        let (c0, s0) = central_and_side(&one_link(AnalyzerMode::SinglePort, 0.0, 20.0));
        let p = outcome_probabilities(0.0, 1.0);
        let expected = p[1] / (p[0] + p[2]);
        assert!((c0 / s0 - expected).abs() < 0.1 * expected, "{c0} {s0}");
        let (cpi, _) = central_and_side(&one_link(AnalyzerMode::SinglePort, std::f64::consts::PI, 20.0));
        assert!(cpi < 0.02 * c0, "{cpi} vs {c0}");
    }

    #[test]
    fn engine_is_deterministic_across_chunks() {
        let s = one_link(AnalyzerMode::DualPort, 0.3, 25.0);
        let mut a = Vec::new();
        run(&s, |_, t| {
            a.push(fingerprint(t));
            Ok(())
        })
        .unwrap();
        let mut b = Vec::new();
        run(&s, |_, t| {
            b.push(fingerprint(t));
            Ok(())
        })
        .unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn bbm92_matched_bases_are_correlated() {
        let mut s = one_link(AnalyzerMode::Bbm92, 0.0, 10.0);
        s.interferometer.ports = 2;
        let mut m = BasisMatcher::new(156.25, 2.5, 2.5, 0.0, 0, 4);
        let (mut matched, mut errors, mut central, mut side) = (0u64, 0u64, 0u64, 0u64);
        run(&s, |_, tags| {
            m.push(tags, |o| {
                if o.peak == Peak::Central {
                    central += 1;
                    if o.basis_a == o.basis_b {
                        matched += 1;
                        errors += u64::from(o.port_a != o.port_b);
                    }
                } else {
                    side += 1;
                }
            });
            Ok(())
        })
        .unwrap();
        assert!(matched > 1000);
        // Jitter spills a small fraction of each peak into its neighbour.
        assert!((errors as f64) < 0.01 * matched as f64, "{errors}/{matched}");
        let ratio = central as f64 / side as f64;
        assert!((ratio - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn matcher_handles_chunk_boundaries() {
        let mut m = BasisMatcher::new(1.0, 2.5, 2.5, 0.0, 0, 4);
        let mut tags = vec![Vec::new(); 8];
        tags[0].push(1000);
        let mut n = 0;
        m.push(&tags, |_| n += 1);
        let mut later = vec![Vec::new(); 8];
        later[5].push(1000 + 2500);
        m.push(&later, |o| {
            n += 1;
            assert_eq!(o.peak, Peak::LateSide);
            assert_eq!(o.port_b, 1);
        });
        assert_eq!(n, 1);
    }
}
