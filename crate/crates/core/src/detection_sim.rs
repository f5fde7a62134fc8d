//! Detector model: channel loss, fiber delay, timing jitter, dark counts,
//! dead time and time-tagger quantization.
//!
//! Tags are stored as integer multiples of the tagger resolution. Arrival
//! times are `f64` picoseconds.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, SimRng};
use crate::source_sim::{poisson_times, PS_PER_SECOND};
use crate::spectral_grid::Channel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelLoss {
    /// Chip-to-detector loss, negative dB.
    pub total_loss_db: f64,
}

impl ChannelLoss {
    pub fn new(total_loss_db: f64) -> Result<Self> {
        if !(total_loss_db <= 0.0) {
            return Err(Error::Configuration(format!(
                "loss must be expressed as non-positive dB, got {total_loss_db}"
            )));
        }
        Ok(ChannelLoss { total_loss_db })
    }

    pub fn lossless() -> Self {
        ChannelLoss { total_loss_db: 0.0 }
    }

    pub fn transmission(&self) -> f64 {
        10f64.powf(self.total_loss_db / 10.0)
    }

    pub fn then(self, other: ChannelLoss) -> ChannelLoss {
        ChannelLoss {
            total_loss_db: self.total_loss_db + other.total_loss_db,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    /// Extra efficiency factor; the channel loss already includes the detector.
    pub efficiency: f64,
    pub dark_count_rate: f64,
    /// Jitter of the whole detection system, in the `exp(-t²/σ²)` convention
    /// used for the coincidence-histogram kernel.
    pub jitter_sigma_ps: f64,
    pub resolution_ps: f64,
    pub dead_time_ns: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec {
            efficiency: 1.0,
            dark_count_rate: 100.0,
            jitter_sigma_ps: 138.3,
            resolution_ps: 156.25,
            dead_time_ns: 25.0,
        }
    }
}

impl DetectorSpec {
    pub fn ideal() -> Self {
        DetectorSpec {
            efficiency: 1.0,
            dark_count_rate: 0.0,
            jitter_sigma_ps: 0.0,
            resolution_ps: 156.25,
            dead_time_ns: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution_ps > 0.0) {
            return Err(Error::Configuration("tagger resolution must be positive".into()));
        }
        if !(self.jitter_sigma_ps >= 0.0) {
            return Err(Error::Configuration("jitter must be non-negative".into()));
        }
        if !(self.dark_count_rate >= 0.0 && self.dead_time_ns >= 0.0) {
            return Err(Error::Configuration(
                "dark count rate and dead time must be non-negative".into(),
            ));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::Configuration("efficiency must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Gaussian std applied to each photon at one detector.
    ///
    /// The system kernel `exp(-t²/σ²)` has variance σ²/2 for a pair delay,
    /// which is shared between two detectors. Quantizing both tags adds a
    /// further res²/12 to the delay on top of the res²/12 the bin-averaged
    /// fit already accounts for, so that part is taken out here.
    pub fn per_detector_jitter_ps(&self) -> f64 {
        let s = self.jitter_sigma_ps;
        let r = self.resolution_ps;
        (s * s / 4.0 - r * r / 24.0).max(0.0).sqrt()
    }

    pub fn dead_time_bins(&self) -> u64 {
        (self.dead_time_ns * 1e3 / self.resolution_ps).ceil() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeTag {
    pub detector: u32,
    /// Time in units of the tagger resolution.
    pub bin: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorInfo {
    pub user: String,
    pub channels: Vec<Channel>,
    pub port: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeTagStream {
    /// Ordered by `(bin, detector)`.
    pub tags: Vec<TimeTag>,
    pub duration_s: f64,
    pub resolution_ps: f64,
    pub detector_map: BTreeMap<u32, DetectorInfo>,
}

impl TimeTagStream {
    pub fn empty(duration_s: f64, resolution_ps: f64) -> Self {
        TimeTagStream {
            tags: Vec::new(),
            duration_s,
            resolution_ps,
            detector_map: BTreeMap::new(),
        }
    }

    pub fn from_bins(detector: u32, bins: Vec<u64>, duration_s: f64, resolution_ps: f64) -> Self {
        TimeTagStream {
            tags: bins.into_iter().map(|bin| TimeTag { detector, bin }).collect(),
            duration_s,
            resolution_ps,
            detector_map: BTreeMap::new(),
        }
    }

    /// Tag bins of one detector, in order.
    pub fn bins_of(&self, detector: u32) -> Vec<u64> {
        self.tags
            .iter()
            .filter(|t| t.detector == detector)
            .map(|t| t.bin)
            .collect()
    }

    pub fn time_ps(&self, tag: &TimeTag) -> f64 {
        tag.bin as f64 * self.resolution_ps
    }

    pub fn count(&self, detector: u32) -> usize {
        self.tags.iter().filter(|t| t.detector == detector).count()
    }

    /// Merge streams sharing a time base into one ordered stream.
    pub fn merge(streams: Vec<TimeTagStream>) -> Result<TimeTagStream> {
        let mut iter = streams.into_iter();
        let Some(mut out) = iter.next() else {
            return Err(Error::EmptyData("no streams to merge".into()));
        };
        for s in iter {
            if s.resolution_ps != out.resolution_ps {
                return Err(Error::Configuration("streams use different resolutions".into()));
            }
            out.duration_s = out.duration_s.max(s.duration_s);
            out.tags.extend(s.tags);
            out.detector_map.extend(s.detector_map);
        }
        out.tags.sort_by_key(|t| (t.bin, t.detector));
        Ok(out)
    }

    /// Little-endian records of `u32 detector, u64 bin`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        for t in &self.tags {
            w.write_all(&t.detector.to_le_bytes())?;
            w.write_all(&t.bin.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, duration_s: f64, resolution_ps: f64) -> io::Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() % 12 != 0 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "truncated time-tag record"));
        }
        let tags = buf
            .chunks_exact(12)
            .map(|c| TimeTag {
                detector: u32::from_le_bytes(c[0..4].try_into().unwrap()),
                bin: u64::from_le_bytes(c[4..12].try_into().unwrap()),
            })
            .collect();
        Ok(TimeTagStream {
            tags,
            duration_s,
            resolution_ps,
            detector_map: BTreeMap::new(),
        })
    }

    /// CSV with header `detector,bin`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "detector,bin")?;
        for t in &self.tags {
            writeln!(w, "{},{}", t.detector, t.bin)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, duration_s: f64, resolution_ps: f64) -> io::Result<Self> {
        let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
        let mut tags = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let (d, b) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("line {}: expected detector,bin", n + 1)))?;
            tags.push(TimeTag {
                detector: d.trim().parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?,
                bin: b.trim().parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?,
            });
        }
        Ok(TimeTagStream {
            tags,
            duration_s,
            resolution_ps,
            detector_map: BTreeMap::new(),
        })
    }
}

/// Keep each arrival independently with the channel transmission.
pub fn apply_loss_with<R: Rng + ?Sized>(arrivals: &[f64], loss: &ChannelLoss, rng: &mut R) -> Vec<f64> {
    let p = loss.transmission();
    if p >= 1.0 {
        return arrivals.to_vec();
    }
    arrivals
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < p)
        .collect()
}

pub fn apply_loss(arrivals: &[f64], loss: &ChannelLoss, seed: u64) -> Vec<f64> {
    apply_loss_with(arrivals, loss, &mut substream(seed, "loss", &[]))
}

pub fn apply_delay(arrivals: &[f64], delay_ns: f64) -> Result<Vec<f64>> {
    if !(delay_ns >= 0.0) {
        return Err(Error::Configuration(format!("delay must be non-negative, got {delay_ns} ns")));
    }
    let d = delay_ns * 1e3;
    Ok(arrivals.iter().map(|t| t + d).collect())
}

/// Streaming single-detector model.
///
/// Arrivals are fed chunk by chunk. Because jitter and fiber delays can push
/// a photon past the end of its chunk, tags are only finalized once they lie
/// below a horizon that later chunks cannot reach; dead time is applied in
/// that final ordered pass.
#[derive(Clone, Debug)]
pub struct Detector {
    pub id: u32,
    spec: DetectorSpec,
    jitter: Option<Normal<f64>>,
    duration_s: f64,
    pending: Vec<u64>,
    last_kept: Option<u64>,
}

impl Detector {
    pub fn new(id: u32, spec: DetectorSpec, duration_s: f64) -> Result<Self> {
        spec.validate()?;
        let sd = spec.per_detector_jitter_ps();
        let jitter = (sd > 0.0).then(|| Normal::new(0.0, sd).expect("finite std"));
        Ok(Detector {
            id,
            spec,
            jitter,
            duration_s,
            pending: Vec::new(),
            last_kept: None,
        })
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    fn push_time(&mut self, t_ps: f64) {
        let max_ps = self.duration_s * PS_PER_SECOND;
        if t_ps < 0.0 || t_ps > max_ps {
            return;
        }
        let bin = (t_ps / self.spec.resolution_ps).round() as u64;
        if (bin as f64) * self.spec.resolution_ps <= max_ps {
            self.pending.push(bin);
        }
    }

    /// Add photon arrivals (absolute ps) and dark counts over
    /// `[start_ps, start_ps + len_ps)`.
    pub fn feed<R: Rng + ?Sized>(&mut self, arrivals_ps: &[f64], start_ps: f64, len_ps: f64, rng: &mut R) {
        let eff = self.spec.efficiency;
        for &t in arrivals_ps {
            if eff < 1.0 && rng.random::<f64>() >= eff {
                continue;
            }
            let j = match &self.jitter {
                Some(n) => n.sample(rng),
                None => 0.0,
            };
            self.push_time(t + j);
        }
        let dark = poisson_times(rng, self.spec.dark_count_rate / PS_PER_SECOND, len_ps);
        for t in dark {
            self.push_time(start_ps + t);
        }
    }

    /// Finalize and return all tags strictly below `horizon_ps`.
    pub fn drain_before(&mut self, horizon_ps: f64) -> Vec<u64> {
        let horizon = (horizon_ps / self.spec.resolution_ps).floor().max(0.0) as u64;
        self.pending.sort_unstable();
        let split = self.pending.partition_point(|&b| b < horizon);
        let ready: Vec<u64> = self.pending.drain(..split).collect();
        self.apply_dead_time(ready)
    }

    pub fn finish(&mut self) -> Vec<u64> {
        self.pending.sort_unstable();
        let ready = std::mem::take(&mut self.pending);
        self.apply_dead_time(ready)
    }

    fn apply_dead_time(&mut self, sorted: Vec<u64>) -> Vec<u64> {
        let dead = self.spec.dead_time_bins();
        let mut out = Vec::with_capacity(sorted.len());
        for b in sorted {
            if let Some(last) = self.last_kept {
                if dead > 0 && b < last + dead {
                    continue;
                }
            }
            out.push(b);
            self.last_kept = Some(b);
        }
        out
    }
}

/// Turn time-ordered arrivals (ps) into a single-detector tag stream.
pub fn detect(arrivals: &[f64], spec: &DetectorSpec, duration_s: f64, seed: u64) -> Result<TimeTagStream> {
    detect_as(0, arrivals, spec, duration_s, &mut substream(seed, "detect", &[0]))
}

pub fn detect_as(
    id: u32,
    arrivals: &[f64],
    spec: &DetectorSpec,
    duration_s: f64,
    rng: &mut SimRng,
) -> Result<TimeTagStream> {
    let mut d = Detector::new(id, spec.clone(), duration_s)?;
    d.feed(arrivals, 0.0, duration_s * PS_PER_SECOND, rng);
    let bins = d.finish();
    Ok(TimeTagStream::from_bins(id, bins, duration_s, spec.resolution_ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loss_survival() {
        let arrivals: Vec<f64> = (0..1_000_000).map(f64::from).collect();
        let n = apply_loss(&arrivals, &ChannelLoss::new(-10.0).unwrap(), 1).len() as f64;
        assert!((n - 1e5).abs() < 5.0 * (1e6 * 0.1 * 0.9f64).sqrt(), "{n}");
        assert_eq!(apply_loss(&arrivals[..100], &ChannelLoss::lossless(), 1).len(), 100);
        assert!((ChannelLoss::new(-13.20).unwrap().transmission() - 0.0479).abs() < 5e-5);
        assert!(ChannelLoss::new(1.0).is_err());
    }

    #[test]
    fn noiseless_detector_rounds_to_grid() {
        let arrivals = [0.0, 100.0, 1000.0, 5000.3, 1e6];
        let s = detect(&arrivals, &DetectorSpec::ideal(), 1.0, 0).unwrap();
        let bins: Vec<u64> = s.tags.iter().map(|t| t.bin).collect();
        assert_eq!(bins, vec![0, 1, 6, 32, 6400]);
    }

    #[test]
    fn dark_counts_only() {
        let spec = DetectorSpec { jitter_sigma_ps: 0.0, ..DetectorSpec::default() };
        let s = detect(&[], &spec, 10.0, 3).unwrap();
        let n = s.tags.len() as f64;
        assert!((n - 1000.0).abs() < 5.0 * 1000f64.sqrt(), "{n}");
        assert!(s.tags.iter().all(|t| s.time_ps(t) <= 10.0 * PS_PER_SECOND));
    }

    #[test]
    fn dead_time_vetoes_close_photons() {
        let spec = DetectorSpec { dark_count_rate: 0.0, jitter_sigma_ps: 0.0, ..DetectorSpec::default() };
        let s = detect(&[1000.0, 2000.0], &spec, 1.0, 0).unwrap();
        assert_eq!(s.tags.len(), 1);
        let s = detect(&[1000.0, 40_000.0], &spec, 1.0, 0).unwrap();
        assert_eq!(s.tags.len(), 2);
    }

    #[test]
    fn delays() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(apply_delay(&a, 0.0).unwrap(), a.to_vec());
        assert_eq!(apply_delay(&a, 10.0).unwrap(), vec![10_001.0, 10_002.0, 10_003.0]);
        assert!(apply_delay(&a, -1.0).is_err());
    }

    #[test]
    fn per_detector_jitter_budget() {
        let spec = DetectorSpec::default();
        let sd = spec.per_detector_jitter_ps();
        let pair_var = 2.0 * sd * sd + 2.0 * 156.25f64.powi(2) / 12.0;
        let kernel_var = 138.3f64.powi(2) / 2.0 + 156.25f64.powi(2) / 12.0;
        assert!((pair_var - kernel_var).abs() < 1e-6);
    }

    #[test]
    fn streaming_matches_batch() {
        let spec = DetectorSpec::default();
        let arrivals: Vec<f64> = (0..20_000).map(|i| i as f64 * 1.7e8).collect();
        let mut rng = substream(5, "x", &[]);
        let mut d = Detector::new(0, spec, 4.0).unwrap();
        d.feed(&arrivals, 0.0, 4e12, &mut rng);
        let all = d.finish();
        assert!(all.windows(2).all(|w| w[1] >= w[0] + spec_dead_bins()));

        // Same draws fed in two halves with a horizon in between.
        let mut rng = substream(5, "x", &[]);
        let mut d = Detector::new(0, DetectorSpec { dark_count_rate: 0.0, ..DetectorSpec::default() }, 4.0).unwrap();
        let (first, second) = arrivals.split_at(10_000);
        d.feed(first, 0.0, 0.0, &mut rng);
        let mut out = d.drain_before(first.last().unwrap() - 1e6);
        d.feed(second, 0.0, 0.0, &mut rng);
        out.extend(d.finish());
        assert_eq!(out.len(), arrivals.len());
        assert!(out.windows(2).all(|w| w[0] < w[1]));
    }

    fn spec_dead_bins() -> u64 {
        DetectorSpec::default().dead_time_bins()
    }

    #[test]
    fn formats_round_trip() {
        let spec = DetectorSpec::default();
        let arrivals: Vec<f64> = (0..500).map(|i| i as f64 * 3.3e6).collect();
        let s = detect(&arrivals, &spec, 0.01, 9).unwrap();
        let mut bin = Vec::new();
        s.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 12 * s.tags.len());
        let back = TimeTagStream::read_binary(bin.as_slice(), 0.01, spec.resolution_ps).unwrap();
        assert_eq!(back.tags, s.tags);
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        let back = TimeTagStream::read_csv(csv.as_slice(), 0.01, spec.resolution_ps).unwrap();
        assert_eq!(back.tags, s.tags);
    }

    #[test]
    fn merge_orders_tags() {
        let a = TimeTagStream::from_bins(0, vec![1, 5, 9], 1.0, 156.25);
        let b = TimeTagStream::from_bins(1, vec![2, 5, 7], 1.0, 156.25);
        let m = TimeTagStream::merge(vec![a, b]).unwrap();
        let got: Vec<(u64, u32)> = m.tags.iter().map(|t| (t.bin, t.detector)).collect();
        assert_eq!(got, vec![(1, 0), (2, 1), (5, 0), (5, 1), (7, 1), (9, 0)]);
        assert!(TimeTagStream::merge(vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn tags_are_quantized_ordered_and_in_range(
            seed in any::<u64>(),
            times in proptest::collection::vec(0.0f64..1e9, 0..200),
        ) {
            let mut times = times;
            times.sort_by(f64::total_cmp);
            let spec = DetectorSpec { dark_count_rate: 1e3, ..DetectorSpec::default() };
            let s = detect(&times, &spec, 1e-3, seed).unwrap();
            let dead = spec.dead_time_bins();
            for w in s.tags.windows(2) {
                prop_assert!(w[1].bin >= w[0].bin + dead);
            }
            for t in &s.tags {
                let ps = s.time_ps(t);
                prop_assert!((ps / spec.resolution_ps).fract() == 0.0);
                prop_assert!(ps <= 1e-3 * PS_PER_SECOND);
            }
        }
    }
}
