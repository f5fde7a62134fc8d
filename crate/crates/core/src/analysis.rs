//! Coincidence statistics and parameter fits.
//!
//! Delay histograms use bins centered on multiples of the bin width, so a
//! zero-delay coincidence falls in the middle of the central bin. The
//! correlation model is the two-sided exponential `exp(-|t|/τc)` convolved
//! with the Gaussian kernel `exp(-t²/σ²)`, averaged over each bin.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::source_sim::sample_laplace;

/// Raw visibility at or below this value admits a local hidden-variable model.
pub const CLASSICAL_BOUND: f64 = FRAC_1_SQRT_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width_ps: f64,
    /// Left edge of bin 0.
    pub origin_ps: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Empty histogram with `2·half + 1` bins centered on `k · bin_width`.
    pub fn centered(bin_width_ps: f64, span_ns: f64) -> Self {
        let half = (span_ns * 1e3 / 2.0 / bin_width_ps).floor() as usize;
        Histogram {
            bin_width_ps,
            origin_ps: -(half as f64 + 0.5) * bin_width_ps,
            counts: vec![0; 2 * half + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn center(&self, i: usize) -> f64 {
        self.origin_ps + (i as f64 + 0.5) * self.bin_width_ps
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn index_of(&self, delay_ps: f64) -> Option<usize> {
        let x = ((delay_ps - self.origin_ps) / self.bin_width_ps).floor();
        (x >= 0.0 && (x as usize) < self.len()).then_some(x as usize)
    }

    pub fn add(&mut self, other: &Histogram) -> Result<()> {
        if other.counts.len() != self.counts.len()
            || other.bin_width_ps != self.bin_width_ps
            || other.origin_ps != self.origin_ps
        {
            return Err(Error::Configuration("histogram layouts differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("delay_ps,counts\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{}\n", self.center(i), c));
        }
        s
    }
}

/// Accumulate delays `b - a` of every tag pair into `hist`.
///
/// Both inputs are sorted tag bins at `resolution_ps`; the sweep keeps a
/// moving lower bound in `b`, so the cost is linear in the number of tags
/// plus the number of pairs inside the span.
pub fn accumulate_delays(hist: &mut Histogram, a: &[u64], b: &[u64], resolution_ps: f64) {
    let lo_ps = hist.origin_ps;
    let hi_ps = hist.origin_ps + hist.len() as f64 * hist.bin_width_ps;
    let lo = (lo_ps / resolution_ps).ceil() as i64;
    let hi = (hi_ps / resolution_ps).ceil() as i64 - 1;
    let mut start = 0usize;
    for &ta in a {
        let ta = ta as i64;
        while start < b.len() && (b[start] as i64) - ta < lo {
            start += 1;
        }
        for &tb in &b[start..] {
            let d = tb as i64 - ta;
            if d > hi {
                break;
            }
            if let Some(i) = hist.index_of(d as f64 * resolution_ps) {
                hist.counts[i] += 1;
            }
        }
    }
}

/// Delay histogram of two sorted tag-bin sequences over `±span/2`.
pub fn build_histogram(a: &[u64], b: &[u64], resolution_ps: f64, bin_width_ps: f64, span_ns: f64) -> Histogram {
    let mut h = Histogram::centered(bin_width_ps, span_ns);
    accumulate_delays(&mut h, a, b, resolution_ps);
    h
}

/// Delay histogram built from tags delivered in consecutive batches.
///
/// Each batch must only contain tags at or after every tag of earlier
/// batches of the same stream, which is what the streaming detectors
/// produce. Pairs straddling batch boundaries are counted exactly once.
#[derive(Clone, Debug)]
pub struct HistogramAccumulator {
    pub histogram: Histogram,
    resolution_ps: f64,
    reach: u64,
    tail_a: Vec<u64>,
    tail_b: Vec<u64>,
}

impl HistogramAccumulator {
    pub fn new(resolution_ps: f64, bin_width_ps: f64, span_ns: f64) -> Self {
        let histogram = Histogram::centered(bin_width_ps, span_ns);
        let reach_ps = histogram.origin_ps.abs() + histogram.bin_width_ps;
        HistogramAccumulator {
            histogram,
            resolution_ps,
            reach: (reach_ps / resolution_ps).ceil() as u64 + 1,
            tail_a: Vec::new(),
            tail_b: Vec::new(),
        }
    }

    pub fn push(&mut self, a_new: &[u64], b_new: &[u64]) {
        let mut b_all = std::mem::take(&mut self.tail_b);
        b_all.extend_from_slice(b_new);
        accumulate_delays(&mut self.histogram, a_new, &b_all, self.resolution_ps);
        accumulate_delays(&mut self.histogram, &self.tail_a, b_new, self.resolution_ps);

        let mut a_all = std::mem::take(&mut self.tail_a);
        a_all.extend_from_slice(a_new);
        let newest = a_all.last().copied().max(b_all.last().copied()).unwrap_or(0);
        let keep_from = newest.saturating_sub(self.reach);
        a_all.retain(|&t| t >= keep_from);
        b_all.retain(|&t| t >= keep_from);
        self.tail_a = a_all;
        self.tail_b = b_all;
    }

    pub fn finish(self) -> Histogram {
        self.histogram
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarResult {
    pub cc: f64,
    pub ac: f64,
    /// `f64::INFINITY` when no accidentals were seen.
    pub car: f64,
    pub car_infinite: bool,
    pub accidental_windows: usize,
}

/// Bin ranges of the window tiling: `(offset index, first bin, last bin)`.
pub fn window_tiling(h: &Histogram, window_ns: f64, center_ps: f64) -> Vec<(i64, usize, usize)> {
    let w = window_ns * 1e3;
    let mut out = Vec::new();
    let max_j = (h.len() as f64 * h.bin_width_ps / w).ceil() as i64 + 1;
    for j in -max_j..=max_j {
        let lo = center_ps + (j as f64 - 0.5) * w;
        let hi = lo + w;
        let first = ((lo - h.origin_ps) / h.bin_width_ps - 0.5).ceil();
        let last = ((hi - h.origin_ps) / h.bin_width_ps - 0.5).ceil() - 1.0;
        if first < 0.0 || last >= h.len() as f64 || last < first {
            continue;
        }
        // Drop windows that would run off the end of the histogram.
        if lo < h.origin_ps || hi > h.origin_ps + h.len() as f64 * h.bin_width_ps {
            continue;
        }
        out.push((j, first as usize, last as usize));
    }
    out
}

/// CC in the window centered on `center_ps`, AC as the mean of the other
/// disjoint windows farther than `exclude_radius` windows from it.
pub fn cc_ac_car(h: &Histogram, window_ns: f64, center_ps: f64, exclude_radius: u32) -> Result<CarResult> {
    let tiles = window_tiling(h, window_ns, center_ps);
    let sum = |first: usize, last: usize| h.counts[first..=last].iter().sum::<u64>() as f64;
    let cc = tiles
        .iter()
        .find(|t| t.0 == 0)
        .map(|t| sum(t.1, t.2))
        .ok_or_else(|| Error::Configuration("central window lies outside the histogram".into()))?;
    let others: Vec<f64> = tiles
        .iter()
        .filter(|t| t.0.unsigned_abs() > u64::from(exclude_radius))
        .map(|t| sum(t.1, t.2))
        .collect();
    if others.len() < 2 {
        return Err(Error::Configuration(format!(
            "histogram span holds only {} accidental windows of {window_ns} ns",
            others.len()
        )));
    }
    let ac = others.iter().sum::<f64>() / others.len() as f64;
    let (car, car_infinite) = if ac > 0.0 { (cc / ac, false) } else { (f64::INFINITY, true) };
    Ok(CarResult {
        cc,
        ac,
        car,
        car_infinite,
        accidental_windows: others.len(),
    })
}

/// Scaled complementary error function `exp(x²)·erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x < 25.0 {
        (x * x).exp() * erfc(x)
    } else {
        let x2 = x * x;
        let inv = 1.0 / (2.0 * x2);
        (1.0 - inv + 3.0 * inv * inv - 15.0 * inv * inv * inv) / (x * PI.sqrt())
    }
}

/// Density of a Laplace(τ) variable plus an independent Gaussian with the
/// kernel `exp(-t²/σ²)` (standard deviation σ/√2).
pub fn exp_gauss_density(t: f64, tau: f64, sigma: f64) -> f64 {
    let tau = tau.abs();
    let s = sigma.abs() / SQRT_2;
    if s < 1e-9 * tau {
        return (-t.abs() / tau).exp() / (2.0 * tau);
    }
    let side = |t: f64| {
        // exp(s²/2τ² - t/τ)·erfc(u) with u = (s/τ - t/s)/√2.
        let u = (s / tau - t / s) / SQRT_2;
        if u >= 0.0 {
            (-t * t / (2.0 * s * s)).exp() * erfcx(u)
        } else {
            (s * s / (2.0 * tau * tau) - t / tau).exp() * erfc(u)
        }
    };
    (side(t) + side(-t)) / (4.0 * tau)
}

const GAUSS_LEGENDRE_5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
];

/// Probability mass of the correlation density inside one bin.
pub fn bin_mass(center: f64, width: f64, tau: f64, sigma: f64) -> f64 {
    // Split the bin at the cusp when sigma is tiny and the cusp falls inside.
    let lo = center - width / 2.0;
    let hi = center + width / 2.0;
    let integrate = |a: f64, b: f64| {
        let m = 0.5 * (a + b);
        let r = 0.5 * (b - a);
        GAUSS_LEGENDRE_5
            .iter()
            .map(|(x, w)| w * exp_gauss_density(m + r * x, tau, sigma))
            .sum::<f64>()
            * r
    };
    if lo < 0.0 && hi > 0.0 && sigma.abs() < width {
        integrate(lo, 0.0) + integrate(0.0, hi)
    } else {
        integrate(lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitModel {
    /// Two-sided exponential only (no detector jitter).
    Exponential,
    ExponentialGaussian,
}

/// Parameters in fit order: amplitude, center, τc, σ, baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams {
    /// Total counts in the peak.
    pub amplitude: f64,
    pub center_ps: f64,
    pub tau_c_ps: f64,
    pub sigma_ps: f64,
    /// Counts per bin.
    pub baseline: f64,
}

impl CorrelationParams {
    pub fn expected(&self, h: &Histogram, i: usize) -> f64 {
        self.baseline
            + self.amplitude * bin_mass(h.center(i) - self.center_ps, h.bin_width_ps, self.tau_c_ps, self.sigma_ps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFit {
    pub model: FitModel,
    pub params: CorrelationParams,
    /// One-sigma uncertainties in the same order as the parameters; σ is
    /// reported as 0 for the pure exponential model.
    pub uncertainties: CorrelationParams,
    /// Square root of the weighted sum of squared residuals per degree of freedom.
    pub residual_norm: f64,
    pub iterations: usize,
}

impl CorrelationFit {
    pub fn tau_c_ps(&self) -> f64 {
        self.params.tau_c_ps
    }

    pub fn sigma_ps(&self) -> f64 {
        self.params.sigma_ps
    }
}

const FIT_TOLERANCE: f64 = 1e-6;
const FIT_MAX_ITERATIONS: usize = 200;

fn pack(model: FitModel, c: &CorrelationParams) -> Vec<f64> {
    match model {
        FitModel::Exponential => vec![c.amplitude, c.center_ps, c.tau_c_ps, c.baseline],
        FitModel::ExponentialGaussian => vec![c.amplitude, c.center_ps, c.tau_c_ps, c.sigma_ps, c.baseline],
    }
}

fn unpack(model: FitModel, p: &DVector<f64>) -> CorrelationParams {
    match model {
        FitModel::Exponential => CorrelationParams {
            amplitude: p[0],
            center_ps: p[1],
            tau_c_ps: p[2].abs(),
            sigma_ps: 0.0,
            baseline: p[3],
        },
        FitModel::ExponentialGaussian => CorrelationParams {
            amplitude: p[0],
            center_ps: p[1],
            tau_c_ps: p[2].abs(),
            sigma_ps: p[3].abs(),
            baseline: p[4],
        },
    }
}

fn initial_guess(h: &Histogram, model: FitModel) -> Result<DVector<f64>> {
    let n = h.len();
    if n < 8 {
        return Err(Error::FitFailure {
            reason: format!("histogram has only {n} bins"),
            iterations: 0,
            residual: f64::NAN,
            last: Vec::new(),
        });
    }
    let y: Vec<f64> = h.counts.iter().map(|&c| c as f64).collect();
    let mut sorted = y.clone();
    sorted.sort_by(f64::total_cmp);
    let baseline = sorted[..n / 4].iter().sum::<f64>() / (n / 4) as f64;
    let (imax, &ymax) = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let height = ymax - baseline;
    if height <= 5.0 * (baseline + 1.0).sqrt() || height < 5.0 {
        return Err(Error::FitFailure {
            reason: "no dominant peak above the baseline".into(),
            iterations: 0,
            residual: f64::NAN,
            last: Vec::new(),
        });
    }
    let half = baseline + height / 2.0;
    let mut lo = imax;
    while lo > 0 && y[lo - 1] > half {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < n && y[hi + 1] > half {
        hi += 1;
    }
    let fwhm = ((hi - lo + 1) as f64 * h.bin_width_ps).max(h.bin_width_ps);
    let amplitude = y.iter().map(|v| (v - baseline).max(0.0)).sum::<f64>().max(height);
    let center = h.center(imax);
    Ok(match model {
        FitModel::Exponential => DVector::from_vec(vec![amplitude, center, fwhm / (2.0 * LN_2), baseline]),
        FitModel::ExponentialGaussian => DVector::from_vec(vec![
            amplitude,
            center,
            0.6 * fwhm / (2.0 * LN_2),
            0.4 * fwhm,
            baseline,
        ]),
    })
}

/// Levenberg-Marquardt fit of the correlation model with Poisson weights.
///
/// A data-weighted least-squares pass gives a robust starting point; a
/// Poisson maximum-likelihood pass from there removes the bias that data
/// weights put on the peak shape. The least-squares result is returned if the
/// likelihood pass fails.
pub fn fit_correlation(h: &Histogram, model: FitModel) -> Result<CorrelationFit> {
    let p0 = initial_guess(h, model)?;
    let first = fit_correlation_from(h, model, p0, Objective::LeastSquares)?;
    let start = DVector::from_vec(pack(model, &first.params));
    Ok(fit_correlation_from(h, model, start, Objective::Poisson).unwrap_or(first))
}

#[derive(Clone, Copy, PartialEq)]
enum Objective {
    /// χ² with weights 1/max(y, 1).
    LeastSquares,
    /// Poisson deviance; Gauss-Newton steps use weights 1/μ.
    Poisson,
}

/// Smallest expected count used in Poisson weights, so empty tails do not
/// dominate the normal equations.
const MIN_EXPECTED: f64 = 1e-3;

fn fit_correlation_from(h: &Histogram, model: FitModel, mut p: DVector<f64>, objective: Objective) -> Result<CorrelationFit> {
    let n = h.len();
    let k = p.len();
    let y: Vec<f64> = h.counts.iter().map(|&c| c as f64).collect();
    let data_w: Vec<f64> = y.iter().map(|&v| 1.0 / v.max(1.0)).collect();
    let weights = |m: &[f64]| -> Vec<f64> {
        match objective {
            Objective::LeastSquares => data_w.clone(),
            Objective::Poisson => m.iter().map(|&v| 1.0 / v.max(MIN_EXPECTED)).collect(),
        }
    };
    let scales = |p: &DVector<f64>| -> Vec<f64> {
        (0..k)
            .map(|i| match (model, i) {
                (_, 0) => p[0].abs().max(1.0),
                (_, 1) => h.bin_width_ps,
                (FitModel::Exponential, 3) | (FitModel::ExponentialGaussian, 4) => p[i].abs().max(1.0),
                _ => p[i].abs().max(0.05 * h.bin_width_ps),
            })
            .collect()
    };
    let model_at = |p: &DVector<f64>| -> Vec<f64> {
        let c = unpack(model, p);
        (0..n).map(|i| c.expected(h, i)).collect()
    };
    let chi2 = |m: &[f64]| -> f64 {
        match objective {
            Objective::LeastSquares => (0..n).map(|i| data_w[i] * (y[i] - m[i]).powi(2)).sum(),
            Objective::Poisson => (0..n)
                .map(|i| match (y[i] > 0.0, m[i] > 0.0) {
                    (true, true) => 2.0 * (m[i] - y[i] + y[i] * (y[i] / m[i]).ln()),
                    (false, _) => 2.0 * m[i].max(0.0),
                    (true, false) => f64::INFINITY,
                })
                .sum(),
        }
    };
    let jacobian = |p: &DVector<f64>| -> DMatrix<f64> {
        let sc = scales(p);
        let mut j = DMatrix::zeros(n, k);
        for c in 0..k {
            let step = 1e-6 * sc[c];
            let mut up = p.clone();
            up[c] += step;
            let mut dn = p.clone();
            dn[c] -= step;
            let (mu, md) = (model_at(&up), model_at(&dn));
            for i in 0..n {
                j[(i, c)] = (mu[i] - md[i]) / (2.0 * step);
            }
        }
        j
    };

    let mut m = model_at(&p);
    let mut cost = chi2(&m);
    let mut lambda = 1e-3;
    let dof = (n.saturating_sub(k)).max(1) as f64;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < FIT_MAX_ITERATIONS {
        iterations += 1;
        let j = jacobian(&p);
        let w = weights(&m);
        let mut jtwj = DMatrix::zeros(k, k);
        let mut jtwr = DVector::zeros(k);
        for i in 0..n {
            let r = y[i] - m[i];
            for a in 0..k {
                jtwr[a] += j[(i, a)] * w[i] * r;
                for b in 0..k {
                    jtwj[(a, b)] += j[(i, a)] * w[i] * j[(i, b)];
                }
            }
        }
        let max_diag = (0..k).map(|i| jtwj[(i, i)]).fold(0.0, f64::max);
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = jtwj.clone();
            for i in 0..k {
                a[(i, i)] += lambda * jtwj[(i, i)].max(1e-12 * max_diag);
            }
            let Some(step) = a.lu().solve(&jtwr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &p + &step;
            let mt = model_at(&trial);
            let ct = chi2(&mt);
            if ct.is_finite() && ct <= cost {
                let sc = scales(&p);
                let small = (0..k).all(|i| step[i].abs() <= FIT_TOLERANCE * sc[i]);
                p = trial;
                m = mt;
                cost = ct;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // No downhill step at any damping: at the minimum to machine precision.
            converged = true;
            break;
        }
    }
    let residual = (cost / dof).sqrt();
    if !converged {
        return Err(Error::FitFailure {
            reason: "parameter tolerance not reached".into(),
            iterations,
            residual,
            last: p.iter().copied().collect(),
        });
    }
    let params = unpack(model, &p);
    if !(params.tau_c_ps > 0.0) || !params.amplitude.is_finite() || params.amplitude <= 0.0 {
        return Err(Error::FitFailure {
            reason: "fit converged to a non-physical peak".into(),
            iterations,
            residual,
            last: p.iter().copied().collect(),
        });
    }
    let j = jacobian(&p);
    let w = weights(&m);
    let mut jtwj: DMatrix<f64> = DMatrix::zeros(k, k);
    for i in 0..n {
        for a in 0..k {
            for b in 0..k {
                jtwj[(a, b)] += j[(i, a)] * w[i] * j[(i, b)];
            }
        }
    }
    let err: Vec<f64> = match jtwj.try_inverse() {
        Some(cov) => (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; k],
    };
    let uncertainties = unpack(model, &DVector::from_vec(err));
    Ok(CorrelationFit {
        model,
        params,
        uncertainties,
        residual_norm: residual,
        iterations,
    })
}

/// Expected (noiseless) histogram for the given parameters.
pub fn model_histogram(params: &CorrelationParams, bin_width_ps: f64, span_ns: f64) -> (Histogram, Vec<f64>) {
    let h = Histogram::centered(bin_width_ps, span_ns);
    let m = (0..h.len()).map(|i| params.expected(&h, i)).collect();
    (h, m)
}

/// Histogram of `events` delays drawn from the correlation model plus a
/// Poisson-free flat background of `background_per_bin` counts.
pub fn synthetic_histogram<R: Rng + ?Sized>(
    rng: &mut R,
    tau_c_ps: f64,
    sigma_ps: f64,
    events: usize,
    background_per_bin: u64,
    bin_width_ps: f64,
    span_ns: f64,
) -> Histogram {
    let mut h = Histogram::centered(bin_width_ps, span_ns);
    let gauss = (sigma_ps > 0.0).then(|| Normal::new(0.0, sigma_ps / SQRT_2).expect("finite"));
    for _ in 0..events {
        let mut d = sample_laplace(rng, tau_c_ps);
        if let Some(g) = &gauss {
            d += g.sample(rng);
        }
        if let Some(i) = h.index_of(d) {
            h.counts[i] += 1;
        }
    }
    for c in &mut h.counts {
        *c += background_per_bin;
    }
    h
}

/// Single-photon bandwidth (MHz) from the coherence time (ps).
pub fn bandwidth_from_tau(tau_c_ps: f64) -> f64 {
    1e6 / (2.0 * PI * tau_c_ps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub singles_signal: f64,
    pub singles_idler: f64,
    pub coincidences: f64,
    /// `S_s·S_i/R_c`, in s⁻¹ (divide by P² for the per-mW² figure).
    pub pgr: f64,
    pub loss_per_arm_db: f64,
    pub car: Option<f64>,
    pub bandwidth_mhz: Option<f64>,
}

impl RateSummary {
    pub fn pgr_per_mw2(&self, pump_power_mw: f64) -> f64 {
        self.pgr / (pump_power_mw * pump_power_mw)
    }

    /// PGR per mW² per MHz of single-photon bandwidth.
    pub fn pgr_per_mw2_mhz(&self, pump_power_mw: f64) -> Option<f64> {
        self.bandwidth_mhz.map(|b| self.pgr_per_mw2(pump_power_mw) / b)
    }
}

pub fn rate_summary(singles_signal: f64, singles_idler: f64, coincidences: f64) -> Result<RateSummary> {
    if !(coincidences > 0.0) {
        return Err(Error::EmptyData("no coincidences".into()));
    }
    if coincidences > singles_signal.min(singles_idler) {
        return Err(Error::Inconsistent(format!(
            "coincidence rate {coincidences} exceeds a singles rate ({singles_signal}, {singles_idler})"
        )));
    }
    let geo = (singles_signal * singles_idler).sqrt();
    Ok(RateSummary {
        singles_signal,
        singles_idler,
        coincidences,
        pgr: singles_signal * singles_idler / coincidences,
        loss_per_arm_db: 10.0 * (coincidences / geo).log10(),
        car: None,
        bandwidth_mhz: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub mean_level: f64,
    pub visibility_raw: f64,
    pub visibility_raw_err: f64,
    pub visibility_net: Option<f64>,
    pub visibility_net_err: Option<f64>,
    pub phase_offset: f64,
    /// Set when an unclamped visibility fell outside [0, 1].
    pub out_of_range: bool,
}

impl FringeFit {
    pub fn exceeds_classical_bound(&self) -> bool {
        !is_classical(self.visibility_raw)
    }
}

struct Harmonic {
    a: f64,
    b: f64,
    c: f64,
    v: f64,
    v_err: f64,
}

fn fit_harmonic(phases: &[f64], y: &[f64]) -> Result<Harmonic> {
    let n = phases.len();
    let x = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => phases[i].cos(),
        _ => phases[i].sin(),
    });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::Underdetermined("phase points do not resolve the fringe".into()))?;
    let beta = &inv * x.transpose() * &yv;
    let (a, b, c) = (beta[0], beta[1], beta[2]);
    let r = (b * b + c * c).sqrt();
    if a <= 0.0 {
        return Err(Error::Underdetermined("fringe mean level is not positive".into()));
    }
    let v = r / a;
    let resid = &yv - &x * &beta;
    let s2 = if n > 3 { resid.norm_squared() / (n - 3) as f64 } else { 0.0 };
    let grad = if r > 0.0 {
        DVector::from_vec(vec![-v / a, b / (a * r), c / (a * r)])
    } else {
        DVector::from_vec(vec![0.0, 1.0 / a, 0.0])
    };
    let v_err = (s2 * (grad.transpose() * &inv * &grad)[(0, 0)]).max(0.0).sqrt();
    Ok(Harmonic { a, b, c, v, v_err })
}

/// Least-squares fit of `C₀(1 + V cos(φ + φ₀))` to central coincidences.
///
/// With `accidentals`, the net visibility is fitted on `cc - ac` point by
/// point.
pub fn fit_fringe(phases: &[f64], cc: &[f64], accidentals: Option<&[f64]>) -> Result<FringeFit> {
    if phases.len() != cc.len() || accidentals.is_some_and(|a| a.len() != cc.len()) {
        return Err(Error::Configuration("fringe inputs differ in length".into()));
    }
    if phases.len() < 5 {
        return Err(Error::Underdetermined(format!(
            "need at least 5 phase points, got {}",
            phases.len()
        )));
    }
    let span = phases.iter().copied().fold(f64::MIN, f64::max) - phases.iter().copied().fold(f64::MAX, f64::min);
    if span < PI - 1e-9 {
        return Err(Error::Underdetermined(format!("phase sweep spans only {span:.3} rad")));
    }
    let raw = fit_harmonic(phases, cc)?;
    let mut out_of_range = raw.v > 1.0;
    let (net, net_err) = match accidentals {
        Some(ac) => {
            let y: Vec<f64> = cc.iter().zip(ac).map(|(c, a)| c - a).collect();
            let f = fit_harmonic(phases, &y)?;
            out_of_range |= f.v > 1.0;
            (Some(f.v.min(1.0)), Some(f.v_err))
        }
        None => (None, None),
    };
    Ok(FringeFit {
        mean_level: raw.a,
        visibility_raw: raw.v.min(1.0),
        visibility_raw_err: raw.v_err,
        visibility_net: net,
        visibility_net_err: net_err,
        phase_offset: (-raw.c).atan2(raw.b),
        out_of_range,
    })
}

/// `(max - min)/(max + min)`.
pub fn two_point_visibility(max: f64, min: f64) -> Result<f64> {
    if !(max + min > 0.0) || max < min || min < 0.0 {
        return Err(Error::Configuration(format!("invalid fringe extremes ({max}, {min})")));
    }
    Ok((max - min) / (max + min))
}

/// Two-point visibility after subtracting the accidentals under each extreme.
pub fn two_point_net_visibility(max: f64, min: f64, ac_max: f64, ac_min: f64) -> Result<f64> {
    two_point_visibility(max - ac_max, (min - ac_min).max(0.0))
}

pub fn is_classical(raw_visibility: f64) -> bool {
    raw_visibility <= CLASSICAL_BOUND
}
