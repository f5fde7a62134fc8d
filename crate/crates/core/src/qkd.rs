//! BBM92 key distribution on two-port Franson analyzers.
//!
//! Each party splits photons passively between a Z analyzer (phases 0/π on
//! its two outputs) and an X analyzer (π/2 / 3π/2). The analyzer output
//! port is the raw key bit.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::franson::Peak;

pub const DEFAULT_F_EC: f64 = 1.2;
pub const DEFAULT_WINDOW_S: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSetting {
    pub basis: Basis,
    /// Phases measured by output ports 0 and 1.
    pub phase_pair: (f64, f64),
}

impl BasisSetting {
    pub fn of(basis: Basis) -> Self {
        let phase_pair = match basis {
            Basis::Z => (0.0, PI),
            Basis::X => (FRAC_PI_2, 3.0 * FRAC_PI_2),
        };
        BasisSetting { basis, phase_pair }
    }

    /// Interferometer phase for the signal-side party.
    pub fn analyzer_phase_a(&self) -> f64 {
        self.phase_pair.0
    }

    /// Interferometer phase for the idler-side party, mirrored so that
    /// matched bases have a zero phase sum.
    pub fn analyzer_phase_b(&self) -> f64 {
        -self.phase_pair.0
    }
}

/// Passive 50:50 basis choice for one photon.
pub fn route_basis<R: Rng + ?Sized>(rng: &mut R) -> BasisSetting {
    BasisSetting::of(if rng.random::<bool>() { Basis::Z } else { Basis::X })
}

/// A detected coincidence with the bases and output ports of both photons.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisOutcome {
    pub peak: Peak,
    pub basis_a: Basis,
    pub basis_b: Basis,
    pub port_a: u8,
    pub port_b: u8,
    pub time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiftedKey {
    pub bits: Vec<u8>,
    pub bases: Vec<Basis>,
    pub times_s: Vec<f64>,
    pub session_duration_s: f64,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Where each coincidence went during sifting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftLedger {
    pub coincidences: u64,
    pub side_peak: u64,
    pub basis_mismatch: u64,
    pub sifted: u64,
}

/// Keep central-peak coincidences measured in matching bases.
pub fn sift(outcomes: &[BasisOutcome], session_duration_s: f64) -> (SiftedKey, SiftedKey, SiftLedger) {
    let mut a = SiftedKey {
        session_duration_s,
        ..SiftedKey::default()
    };
    let mut b = a.clone();
    let mut ledger = SiftLedger::default();
    for o in outcomes {
        ledger.coincidences += 1;
        if o.peak != Peak::Central {
            ledger.side_peak += 1;
            continue;
        }
        if o.basis_a != o.basis_b {
            ledger.basis_mismatch += 1;
            continue;
        }
        ledger.sifted += 1;
        a.bits.push(o.port_a);
        a.bases.push(o.basis_a);
        a.times_s.push(o.time_s);
        b.bits.push(o.port_b);
        b.bases.push(o.basis_b);
        b.times_s.push(o.time_s);
    }
    (a, b, ledger)
}

pub fn qber(a: &SiftedKey, b: &SiftedKey) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Configuration(format!(
            "sifted keys differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::UndefinedQber);
    }
    let errors = a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count();
    Ok(errors as f64 / a.len() as f64)
}

pub fn qber_from_visibility(visibility: f64) -> f64 {
    (1.0 - visibility) / 2.0
}

/// `H₂(x) = -x log₂ x - (1-x) log₂(1-x)`, zero at both ends.
pub fn binary_entropy(x: f64) -> Result<f64> {
    check_range("x", x, 0.0, 1.0)?;
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}

/// Asymptotic key rate `n_sift [1 - f H₂(E) - H₂(E)]`, clamped at zero.
pub fn secure_key_rate(n_sift: f64, qber: f64, f_ec: f64) -> Result<f64> {
    check_range("qber", qber, 0.0, 0.5)?;
    check_range("f_ec", f_ec, 1.0, f64::MAX)?;
    let h = binary_entropy(qber)?;
    Ok((n_sift * (1.0 - f_ec * h - h)).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionWindow {
    pub start_s: f64,
    pub sifted: u64,
    pub errors: u64,
    pub visibility: Option<f64>,
    pub qber: Option<f64>,
    pub skr: Option<f64>,
    /// No sifted bits: excluded from the session averages.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkdSessionReport {
    pub edge: String,
    pub duration_s: f64,
    pub ledger: SiftLedger,
    pub sifted_count: u64,
    pub sift_rate: f64,
    pub qber: Option<f64>,
    pub qber_err: Option<f64>,
    /// Mean of the per-window visibilities.
    pub visibility: Option<f64>,
    pub visibility_err: Option<f64>,
    pub skr: f64,
    pub total_secure_bits: f64,
    pub f_ec: f64,
    pub windows: Vec<SessionWindow>,
}

impl QkdSessionReport {
    /// Time series CSV: window start, visibility, QBER, SKR.
    pub fn windows_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("t_s,visibility,qber,skr,sifted,flagged\n");
        for w in &self.windows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                w.start_s,
                opt(w.visibility),
                opt(w.qber),
                opt(w.skr),
                w.sifted,
                w.flagged
            ));
        }
        s
    }
}

/// Running per-window tally of sifted bits and errors for one edge.
#[derive(Clone, Debug)]
pub struct SessionAccumulator {
    pub window_s: f64,
    pub duration_s: f64,
    sifted: Vec<u64>,
    errors: Vec<u64>,
    ledger: SiftLedger,
}

impl SessionAccumulator {
    pub fn new(duration_s: f64, window_s: f64) -> Self {
        let n = if duration_s > 0.0 { (duration_s / window_s).ceil() as usize } else { 0 };
        SessionAccumulator {
            window_s,
            duration_s,
            sifted: vec![0; n],
            errors: vec![0; n],
            ledger: SiftLedger::default(),
        }
    }

    pub fn record(&mut self, outcome: &BasisOutcome) {
        let (a, b, l) = sift(std::slice::from_ref(outcome), self.duration_s);
        self.ledger.coincidences += l.coincidences;
        self.ledger.side_peak += l.side_peak;
        self.ledger.basis_mismatch += l.basis_mismatch;
        self.ledger.sifted += l.sifted;
        if l.sifted == 1 {
            let w = ((outcome.time_s / self.window_s) as usize).min(self.sifted.len().saturating_sub(1));
            if w < self.sifted.len() {
                self.sifted[w] += 1;
                self.errors[w] += u64::from(a.bits[0] != b.bits[0]);
            }
        }
    }

    pub fn ledger(&self) -> SiftLedger {
        self.ledger
    }

    pub fn report(&self, edge: &str, f_ec: f64) -> Result<QkdSessionReport> {
        let mut windows = Vec::with_capacity(self.sifted.len());
        for (i, (&n, &e)) in self.sifted.iter().zip(&self.errors).enumerate() {
            let start = i as f64 * self.window_s;
            let len = (self.duration_s - start).min(self.window_s);
            if n == 0 {
                windows.push(SessionWindow {
                    start_s: start,
                    sifted: 0,
                    errors: 0,
                    visibility: None,
                    qber: None,
                    skr: None,
                    flagged: true,
                });
                continue;
            }
            let q = e as f64 / n as f64;
            let skr = if q <= 0.5 { Some(secure_key_rate(n as f64 / len, q, f_ec)?) } else { Some(0.0) };
            windows.push(SessionWindow {
                start_s: start,
                sifted: n,
                errors: e,
                visibility: Some(1.0 - 2.0 * q),
                qber: Some(q),
                skr,
                flagged: false,
            });
        }
        let sifted_count: u64 = self.sifted.iter().sum();
        let errors: u64 = self.errors.iter().sum();
        let sift_rate = if self.duration_s > 0.0 { sifted_count as f64 / self.duration_s } else { 0.0 };
        let (qber, qber_err) = if sifted_count > 0 {
            let q = errors as f64 / sifted_count as f64;
            (Some(q), Some((q * (1.0 - q) / sifted_count as f64).sqrt()))
        } else {
            (None, None)
        };
        let vs: Vec<f64> = windows.iter().filter_map(|w| w.visibility).collect();
        let (visibility, visibility_err) = if vs.is_empty() {
            (None, None)
        } else {
            let m = vs.iter().sum::<f64>() / vs.len() as f64;
            let err = if vs.len() > 1 {
                let var = vs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vs.len() - 1) as f64;
                (var / vs.len() as f64).sqrt()
            } else {
                f64::NAN
            };
            (Some(m), (err.is_finite()).then_some(err))
        };
        let skr = match qber {
            Some(q) if q <= 0.5 => secure_key_rate(sift_rate, q, f_ec)?,
            _ => 0.0,
        };
        Ok(QkdSessionReport {
            edge: edge.to_string(),
            duration_s: self.duration_s,
            ledger: self.ledger,
            sifted_count,
            sift_rate,
            qber,
            qber_err,
            visibility,
            visibility_err,
            skr,
            total_secure_bits: skr * self.duration_s,
            f_ec,
            windows,
        })
    }
}

/// Windowed session report directly from classified coincidences.
pub fn session_report(
    edge: &str,
    outcomes: &[BasisOutcome],
    duration_s: f64,
    window_s: f64,
    f_ec: f64,
) -> Result<QkdSessionReport> {
    let mut acc = SessionAccumulator::new(duration_s, window_s);
    for o in outcomes {
        acc.record(o);
    }
    acc.report(edge, f_ec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::franson::sample_joint;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn outcome(peak: Peak, ba: Basis, bb: Basis, pa: u8, pb: u8) -> BasisOutcome {
        BasisOutcome { peak, basis_a: ba, basis_b: bb, port_a: pa, port_b: pb, time_s: 0.0 }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.0306).unwrap() - 0.19739).abs() < 1e-5);
        assert!((binary_entropy(0.12).unwrap() - 0.52936).abs() < 1e-5);
        assert!(binary_entropy(1.1).is_err());
    }

    #[test]
    fn skr_examples() {
        let n = 7.28e5 / 2000.0;
        assert!((secure_key_rate(n, 0.0306, 1.2).unwrap() - 206.0).abs() < 1.0);
        assert_eq!(secure_key_rate(364.0, 0.0, 1.2).unwrap(), 364.0);
        assert_eq!(secure_key_rate(364.0, 0.12, 1.2).unwrap(), 0.0);
        assert!(secure_key_rate(364.0, 0.6, 1.2).is_err());
    }

    #[test]
    fn qber_examples() {
        assert!((qber_from_visibility(0.9384) - 0.0308).abs() < 1e-4);
        assert!((qber_from_visibility(0.9504) - 0.0248).abs() < 1e-4);
        let k = SiftedKey { bits: vec![0, 1, 1, 0], ..SiftedKey::default() };
        assert_eq!(qber(&k, &k).unwrap(), 0.0);
        assert!(matches!(qber(&SiftedKey::default(), &SiftedKey::default()), Err(Error::UndefinedQber)));
    }

    #[test]
    fn basis_phases() {
        for basis in [Basis::Z, Basis::X] {
            let s = BasisSetting::of(basis);
            assert!((s.phase_pair.1 - s.phase_pair.0 - PI).abs() < 1e-15);
            assert!((s.analyzer_phase_a() + s.analyzer_phase_b()).cos() > 1.0 - 1e-12);
        }
        let z = BasisSetting::of(Basis::Z);
        let x = BasisSetting::of(Basis::X);
        assert!((z.analyzer_phase_a() + x.analyzer_phase_b()).cos().abs() < 1e-12);
        assert!((x.analyzer_phase_a() + z.analyzer_phase_b()).cos().abs() < 1e-12);
    }

    #[test]
    fn basis_routing_statistics() {
        let mut rng = substream(1, "basis", &[]);
        let n = 1_000_000;
        let z = (0..n).filter(|_| route_basis(&mut rng).basis == Basis::Z).count() as f64;
        assert!((z - 5e5).abs() < 5.0 * 500.0);
        let mut ra = substream(1, "basis", &[0]);
        let mut rb = substream(1, "basis", &[1]);
        let matched = (0..100_000)
            .filter(|_| route_basis(&mut ra).basis == route_basis(&mut rb).basis)
            .count() as f64;
        assert!((matched - 5e4).abs() < 5.0 * 158.2);
        let mut r1 = substream(9, "basis", &[]);
        let mut r2 = substream(9, "basis", &[]);
        for _ in 0..100 {
            assert_eq!(route_basis(&mut r1), route_basis(&mut r2));
        }
    }

    #[test]
    fn sifting_rules() {
        let side = vec![outcome(Peak::EarlySide, Basis::Z, Basis::Z, 0, 0); 10];
        let (a, b, l) = sift(&side, 1.0);
        assert!(a.is_empty() && b.is_empty());
        assert_eq!(l.side_peak, 10);
        let mixed = vec![
            outcome(Peak::Central, Basis::Z, Basis::Z, 1, 1),
            outcome(Peak::Central, Basis::Z, Basis::X, 1, 0),
            outcome(Peak::Central, Basis::X, Basis::X, 0, 0),
            outcome(Peak::LateSide, Basis::X, Basis::X, 0, 1),
        ];
        let (a, b, l) = sift(&mixed, 1.0);
        assert_eq!(a.bits, vec![1, 0]);
        assert_eq!(a.bits, b.bits);
        assert_eq!(l, SiftLedger { coincidences: 4, side_peak: 1, basis_mismatch: 1, sifted: 2 });
    }

    /// Simulated central events from the analyzer model reproduce QBER = (1-V)/2.
    #[test]
    fn simulated_qber_tracks_visibility() {
        let mut rng = substream(2, "qkd", &[]);
        let v = 0.9384;
        let mut outcomes = Vec::new();
        for i in 0..400_000 {
            let sa = route_basis(&mut rng);
            let sb = route_basis(&mut rng);
            let j = sample_joint(&mut rng, sa.analyzer_phase_a() + sb.analyzer_phase_b(), v);
            outcomes.push(BasisOutcome {
                peak: j.peak(),
                basis_a: sa.basis,
                basis_b: sb.basis,
                port_a: j.port_a,
                port_b: j.port_b,
                time_s: i as f64 * 1e-3,
            });
        }
        let (a, b, l) = sift(&outcomes, 400.0);
        let q = qber(&a, &b).unwrap();
        let se = (0.0308 * 0.9692 / a.len() as f64).sqrt();
        assert!((q - 0.0308).abs() < 4.0 * se, "{q}");
        // Sifting accounting: about half central, half of those matched.
        let central = l.coincidences - l.side_peak;
        assert!(l.sifted <= central);
        assert!((l.sifted as f64 / l.coincidences as f64 - 0.25).abs() < 0.005);

        let report = session_report("alice_bob", &outcomes, 400.0, 10.0, 1.2).unwrap();
        assert_eq!(report.windows.len(), 40);
        assert_eq!(report.sifted_count, a.len() as u64);
        let qv = qber_from_visibility(report.visibility.unwrap());
        let combined = (report.qber_err.unwrap().powi(2) + (report.visibility_err.unwrap() / 2.0).powi(2)).sqrt();
        assert!((report.qber.unwrap() - qv).abs() < 3.0 * combined);
        assert!(report.skr <= report.sift_rate);
    }

    #[test]
    fn empty_and_sparse_sessions() {
        let r = session_report("e", &[], 0.0, 10.0, 1.2).unwrap();
        assert!(r.windows.is_empty());
        assert_eq!(r.skr, 0.0);
        let one = [BasisOutcome { time_s: 15.0, ..outcome(Peak::Central, Basis::Z, Basis::Z, 1, 1) }];
        let r = session_report("e", &one, 30.0, 10.0, 1.2).unwrap();
        let flags: Vec<bool> = r.windows.iter().map(|w| w.flagged).collect();
        assert_eq!(flags, vec![true, false, true]);
        assert_eq!(r.visibility, Some(1.0));
        assert!(r.windows_csv().lines().count() == 4);
    }

    proptest! {
        #[test]
        fn entropy_symmetry(x in 0.0f64..=1.0) {
            let a = binary_entropy(x).unwrap();
            let b = binary_entropy(1.0 - x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn entropy_concave(x in 0.0f64..=1.0, y in 0.0f64..=1.0, t in 0.0f64..=1.0) {
            let m = t * x + (1.0 - t) * y;
            let lhs = binary_entropy(m).unwrap();
            let rhs = t * binary_entropy(x).unwrap() + (1.0 - t) * binary_entropy(y).unwrap();
            prop_assert!(lhs >= rhs - 1e-12);
        }

        #[test]
        fn skr_bounded_and_monotone(n in 0.0f64..1e4, q1 in 0.0f64..=0.5, q2 in 0.0f64..=0.5) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let a = secure_key_rate(n, lo, 1.2).unwrap();
            let b = secure_key_rate(n, hi, 1.2).unwrap();
            prop_assert!(a <= n + 1e-9 && a >= 0.0);
            prop_assert!(b <= a + 1e-9);
        }
    }
}
