//! ITU DWDM grid arithmetic and the microring comb model.
//!
//! Channel `n` sits at `190.0 THz + n * 0.1 THz`. The resonator produces a
//! comb of Lorentzian dips spaced by its FSR around the pumped mode; photon
//! pairs are only emitted on those resonances, so the comb decides which grid
//! channels carry usable light.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const GRID_ORIGIN_THZ: f64 = 190.0;
pub const GRID_SPACING_THZ: f64 = 0.1;
pub const MIN_CHANNEL: i32 = -100;
pub const MAX_CHANNEL: i32 = 100;
/// A comb mode is mapped onto a grid channel when it sits within this
/// distance of the channel center (a quarter of the grid spacing).
pub const MAPPING_TOLERANCE_GHZ: f64 = 25.0;

/// An ITU-T 100 GHz grid channel, identified by its channel number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub struct Channel(i32);

impl Channel {
    pub fn new(index: i32) -> Result<Self> {
        if (MIN_CHANNEL..=MAX_CHANNEL).contains(&index) {
            Ok(Channel(index))
        } else {
            Err(Error::GridRange(i64::from(index)))
        }
    }

    pub fn index(self) -> i32 {
        self.0
    }

    pub fn center_frequency_thz(self) -> f64 {
        GRID_ORIGIN_THZ + GRID_SPACING_THZ * f64::from(self.0)
    }

    pub fn center_wavelength_nm(self) -> f64 {
        frequency_to_wavelength_nm(self.center_frequency_thz())
    }

    /// Nearest grid channel to `frequency_thz`, if it lies within
    /// `tolerance_ghz` of that channel's center.
    pub fn nearest(frequency_thz: f64, tolerance_ghz: f64) -> Option<Channel> {
        let index = ((frequency_thz - GRID_ORIGIN_THZ) / GRID_SPACING_THZ).round();
        if !(f64::from(MIN_CHANNEL)..=f64::from(MAX_CHANNEL)).contains(&index) {
            return None;
        }
        let channel = Channel(index as i32);
        let offset_ghz = (frequency_thz - channel.center_frequency_thz()).abs() * 1e3;
        (offset_ghz <= tolerance_ghz + 1e-9).then_some(channel)
    }
}

impl TryFrom<i32> for Channel {
    type Error = Error;
    fn try_from(index: i32) -> Result<Self> {
        Channel::new(index)
    }
}

impl From<Channel> for i32 {
    fn from(c: Channel) -> i32 {
        c.0
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CH{}", self.0)
    }
}

pub fn frequency_to_wavelength_nm(frequency_thz: f64) -> f64 {
    SPEED_OF_LIGHT / (frequency_thz * 1e12) * 1e9
}

/// Center frequency (THz) of grid channel `index`.
pub fn channel_center_frequency(index: i32) -> Result<f64> {
    Ok(Channel::new(index)?.center_frequency_thz())
}

/// Energy conservation on the grid: `2 * pump = signal + idler`.
pub fn conjugate_channel(signal: Channel, pump: Channel) -> Result<Channel> {
    if signal == pump {
        return Err(Error::DegeneratePair(signal.to_string()));
    }
    Channel::new(2 * pump.index() - signal.index())
}

/// Microring resonator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonatorSpec {
    pub fsr_ghz: f64,
    pub q_factor: f64,
    pub linewidth_fwhm_mhz: f64,
    pub pump_channel: Channel,
    pub mode_count: usize,
    /// On-resonance transmission (dip depth) applied to every mode.
    pub extinction: f64,
    /// Per-mode extinction overrides keyed by mode order.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mode_extinction: BTreeMap<i32, f64>,
    /// Per-mode center-frequency overrides (THz) keyed by mode order.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mode_frequency_thz: BTreeMap<i32, f64>,
    pub insertion_loss_db: f64,
}

impl Default for ResonatorSpec {
    /// The characterized Si3N4 ring: 97.8 GHz FSR, Q = 3.1e5, 649 MHz FWHM
    /// at the CH35 pump, 128 resonances plus the pumped mode, ~5 dB chip
    /// insertion loss and a 2.2 % on-resonance transmission floor.
    fn default() -> Self {
        ResonatorSpec {
            fsr_ghz: 97.8,
            q_factor: 3.1e5,
            linewidth_fwhm_mhz: 649.0,
            pump_channel: Channel(35),
            mode_count: 129,
            extinction: 0.022,
            mode_extinction: BTreeMap::new(),
            mode_frequency_thz: BTreeMap::new(),
            insertion_loss_db: -5.0,
        }
    }
}

impl ResonatorSpec {
    pub fn pump_frequency_thz(&self) -> f64 {
        self.pump_channel.center_frequency_thz()
    }

    pub fn half_span(&self) -> i32 {
        ((self.mode_count.saturating_sub(1)) / 2) as i32
    }

    pub fn mode_orders(&self) -> std::ops::RangeInclusive<i32> {
        -self.half_span()..=self.half_span()
    }

    pub fn mode_frequency(&self, order: i32) -> f64 {
        self.mode_frequency_thz
            .get(&order)
            .copied()
            .unwrap_or_else(|| self.pump_frequency_thz() + f64::from(order) * self.fsr_ghz * 1e-3)
    }

    pub fn mode_extinction(&self, order: i32) -> f64 {
        self.mode_extinction
            .get(&order)
            .copied()
            .unwrap_or(self.extinction)
    }

    /// Checks the Q/FWHM consistency and that the comb is resolved.
    pub fn validate(&self) -> Result<()> {
        if self.mode_count < 3 || self.mode_count % 2 == 0 {
            return Err(Error::Configuration(format!(
                "mode_count must be odd and >= 3, got {}",
                self.mode_count
            )));
        }
        if !(self.fsr_ghz > 0.0 && self.q_factor > 0.0 && self.linewidth_fwhm_mhz > 0.0) {
            return Err(Error::Configuration(
                "fsr, q_factor and linewidth must be positive".into(),
            ));
        }
        let implied_mhz = self.pump_frequency_thz() * 1e6 / self.q_factor;
        let mismatch = (implied_mhz - self.linewidth_fwhm_mhz).abs() / self.linewidth_fwhm_mhz;
        if mismatch > 0.05 {
            return Err(Error::Configuration(format!(
                "linewidth {:.1} MHz disagrees with f/Q = {:.1} MHz by {:.1} %",
                self.linewidth_fwhm_mhz,
                implied_mhz,
                mismatch * 100.0
            )));
        }
        if self.fsr_ghz * 1e3 <= 10.0 * self.linewidth_fwhm_mhz {
            return Err(Error::Configuration(format!(
                "FSR {} GHz does not resolve {} MHz resonances",
                self.fsr_ghz, self.linewidth_fwhm_mhz
            )));
        }
        let bad = std::iter::once(self.extinction)
            .chain(self.mode_extinction.values().copied())
            .find(|e| !(*e > 0.0 && *e <= 1.0));
        if let Some(e) = bad {
            return Err(Error::Configuration(format!(
                "extinction {e} outside (0, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonanceMode {
    pub order: i32,
    pub center_frequency_thz: f64,
    pub linewidth_mhz: f64,
    pub mapped_channel: Option<Channel>,
}

/// All resonances of the comb, ordered from the lowest frequency upward.
pub fn resonance_comb(spec: &ResonatorSpec) -> Result<Vec<ResonanceMode>> {
    spec.validate()?;
    Ok(spec
        .mode_orders()
        .map(|order| {
            let f = spec.mode_frequency(order);
            ResonanceMode {
                order,
                center_frequency_thz: f,
                linewidth_mhz: spec.linewidth_fwhm_mhz,
                mapped_channel: Channel::nearest(f, MAPPING_TOLERANCE_GHZ),
            }
        })
        .collect())
}

/// Through-port transmission: the product of one inverted Lorentzian per
/// mode, each bottoming out at that mode's extinction.
pub fn transmission(spec: &ResonatorSpec, frequency_thz: f64) -> f64 {
    let half_width_thz = 0.5 * spec.linewidth_fwhm_mhz * 1e-6;
    spec.mode_orders()
        .map(|order| {
            let x = (frequency_thz - spec.mode_frequency(order)) / half_width_thz;
            1.0 - (1.0 - spec.mode_extinction(order)) / (1.0 + x * x)
        })
        .product()
}

/// Transmission sampled on `steps` evenly spaced frequencies in
/// `[start_thz, stop_thz]`.
pub fn transmission_spectrum(
    spec: &ResonatorSpec,
    start_thz: f64,
    stop_thz: f64,
    steps: usize,
) -> Vec<(f64, f64)> {
    let n = steps.max(2);
    (0..n)
        .map(|i| {
            let f = start_thz + (stop_thz - start_thz) * i as f64 / (n - 1) as f64;
            (f, transmission(spec, f))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ch(i: i32) -> Channel {
        Channel::new(i).unwrap()
    }

    #[test]
    fn grid_examples() {
        assert!((channel_center_frequency(35).unwrap() - 193.5).abs() < 1e-12);
        assert!((ch(35).center_wavelength_nm() - 1549.32).abs() < 0.005);
        assert_eq!(channel_center_frequency(0).unwrap(), 190.0);
        // c / 193.7 THz = 1547.7153 nm
        assert!((ch(37).center_wavelength_nm() - 1547.7153).abs() < 1e-3);
        assert!((channel_center_frequency(37).unwrap() - 193.7).abs() < 1e-12);
    }

    #[test]
    fn grid_range_is_enforced() {
        assert_eq!(channel_center_frequency(101), Err(Error::GridRange(101)));
        assert!(channel_center_frequency(-100).is_ok());
        assert!(serde_json::from_str::<Channel>("250").is_err());
    }

    #[test]
    fn wavelength_frequency_product_is_c() {
        for i in [-100, -3, 0, 28, 35, 42, 100] {
            let c = ch(i);
            let product = c.center_wavelength_nm() * 1e-9 * c.center_frequency_thz() * 1e12;
            assert!((product / SPEED_OF_LIGHT - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn conjugates() {
        assert_eq!(conjugate_channel(ch(37), ch(35)).unwrap(), ch(33));
        assert_eq!(conjugate_channel(ch(42), ch(35)).unwrap(), ch(28));
        assert_eq!(conjugate_channel(ch(36), ch(35)).unwrap(), ch(34));
        assert!(matches!(
            conjugate_channel(ch(35), ch(35)),
            Err(Error::DegeneratePair(_))
        ));
    }

    #[test]
    fn default_resonator_is_consistent() {
        ResonatorSpec::default().validate().unwrap();
        let mut bad = ResonatorSpec::default();
        bad.linewidth_fwhm_mhz = 800.0;
        assert!(bad.validate().is_err());
        let mut even = ResonatorSpec::default();
        even.mode_count = 4;
        assert!(resonance_comb(&even).is_err());
    }

    #[test]
    fn comb_of_the_measured_ring() {
        let spec = ResonatorSpec::default();
        let comb = resonance_comb(&spec).unwrap();
        assert_eq!(comb.len(), 129);
        let pump = comb.iter().find(|m| m.order == 0).unwrap();
        let offset_mhz = (pump.center_frequency_thz - 193.5).abs() * 1e6;
        assert!(offset_mhz < spec.linewidth_fwhm_mhz / 2.0);
        let plus_two = comb.iter().find(|m| m.order == 2).unwrap();
        assert_eq!(plus_two.mapped_channel, Some(ch(37)));
        // 2.2 GHz walk-off per mode: order 11 is the last inside 25 GHz.
        assert!(comb.iter().find(|m| m.order == 11).unwrap().mapped_channel.is_some());
        assert!(comb.iter().find(|m| m.order == 12).unwrap().mapped_channel.is_none());
        for pair in comb.windows(2) {
            let gap = (pair[1].center_frequency_thz - pair[0].center_frequency_thz) * 1e3;
            assert!((gap - 97.8).abs() < 1e-6);
        }
    }

    #[test]
    fn minimal_and_commensurate_combs() {
        let spec = ResonatorSpec {
            mode_count: 3,
            ..ResonatorSpec::default()
        };
        let orders: Vec<i32> = resonance_comb(&spec).unwrap().iter().map(|m| m.order).collect();
        assert_eq!(orders, vec![-1, 0, 1]);

        let grid = ResonatorSpec {
            fsr_ghz: 100.0,
            mode_count: 41,
            ..ResonatorSpec::default()
        };
        for m in resonance_comb(&grid).unwrap() {
            let c = m.mapped_channel.expect("every mode on grid");
            assert_eq!(c.index(), 35 + m.order);
        }
    }

    #[test]
    fn transmission_examples() {
        let spec = ResonatorSpec::default();
        let f0 = spec.pump_frequency_thz();
        assert!((transmission(&spec, f0) - 0.022).abs() < 1e-4);
        let mid = f0 + 0.5 * spec.fsr_ghz * 1e-3;
        assert!(transmission(&spec, mid) > 0.99);
        let half = f0 + 0.5 * spec.linewidth_fwhm_mhz * 1e-6;
        let expected = 1.0 - (1.0 - 0.022) / 2.0;
        assert!((transmission(&spec, half) - expected).abs() < 1e-4);
    }

    #[test]
    fn per_mode_overrides() {
        let mut spec = ResonatorSpec::default();
        spec.mode_extinction.insert(1, 0.5);
        spec.mode_frequency_thz.insert(1, 193.6);
        assert!((transmission(&spec, 193.6) - 0.5).abs() < 1e-3);
        assert_eq!(
            resonance_comb(&spec).unwrap().iter().find(|m| m.order == 1).unwrap().mapped_channel,
            Some(ch(36))
        );
    }

    proptest! {
        #[test]
        fn grid_round_trip(i in MIN_CHANNEL..=MAX_CHANNEL) {
            let f = channel_center_frequency(i).unwrap();
            prop_assert_eq!(Channel::nearest(f, 1e-3).map(Channel::index), Some(i));
        }

        #[test]
        fn conjugation_is_involution(s in -30i32..=30, p in -30i32..=30) {
            prop_assume!(s != p);
            let (s, p) = (ch(s), ch(p));
            let c = conjugate_channel(s, p).unwrap();
            prop_assert_eq!(conjugate_channel(c, p).unwrap(), s);
        }

        #[test]
        fn transmission_bounded(offset_ghz in -700.0f64..700.0) {
            let spec = ResonatorSpec::default();
            let t = transmission(&spec, spec.pump_frequency_thz() + offset_ghz * 1e-3);
            prop_assert!(t <= 1.0);
            // Overlapping tails of neighbouring modes can only deepen a dip by a hair.
            prop_assert!(t >= spec.extinction * (1.0 - 1e-3));
        }
    }
}
