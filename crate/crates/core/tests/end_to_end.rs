//! Source, detection and analysis chained through the public API.

use qnet_core::analysis::{build_histogram, cc_ac_car, fit_correlation, FitModel};
use qnet_core::detection_sim::{apply_loss, detect, ChannelLoss, DetectorSpec};
use qnet_core::source_sim::{emit_pairs, pair_rate, SourceConfig};

#[test]
fn detected_pairs_recover_the_source_parameters() {
    let config = SourceConfig {
        pump_power_mw: 5.0,
        coherence_time_ps: 250.8,
        duration_s: 5.0,
        seed: 21,
        ..SourceConfig::default()
    };
    let pairs = emit_pairs(&config, 0).unwrap();
    let expected_pairs = pair_rate(&config) * config.duration_s;
    let z = (pairs.len() as f64 - expected_pairs) / expected_pairs.sqrt();
    assert!(z.abs() < 5.0, "pair count z = {z}");

    let loss = ChannelLoss::new(-10.0).unwrap();
    let signal: Vec<f64> = pairs.iter().map(|p| p.signal_ps).collect();
    let mut idler: Vec<f64> = pairs.iter().map(|p| p.idler_ps).collect();
    idler.sort_unstable_by(f64::total_cmp);
    let spec = DetectorSpec::default();
    let a = detect(&apply_loss(&signal, &loss, 1), &spec, config.duration_s, 2).unwrap();
    let b = detect(&apply_loss(&idler, &loss, 3), &spec, config.duration_s, 4).unwrap();

    let h = build_histogram(&a.bins_of(0), &b.bins_of(0), spec.resolution_ps, spec.resolution_ps, 50.0);
    let car = cc_ac_car(&h, 2.5, 0.0, 1).unwrap();
    let true_coincidences = expected_pairs * loss.transmission().powi(2);
    assert!(
        ((car.cc as f64 - car.ac) / true_coincidences - 1.0).abs() < 0.05,
        "net {} vs {true_coincidences}",
        car.cc as f64 - car.ac
    );
    assert!(car.car > 10.0, "CAR {}", car.car);

    let fit = fit_correlation(&h, FitModel::ExponentialGaussian).unwrap();
    assert!((fit.tau_c_ps() / 250.8 - 1.0).abs() < 0.06, "tau_c {}", fit.tau_c_ps());
    assert!(fit.params.center_ps.abs() < 20.0, "center {}", fit.params.center_ps);
}
