use mmv_core::amp::{amp_run, AmpConfig, VarianceInit};
use mmv_core::model::{from_db, to_db, PriorParams, ProblemParams};
use mmv_core::se::se_fixed_point;
use mmv_core::sim::{empirical_v_covariance, generate, measurement_count, EstimatorSpec, MeasurementEnsemble, Setting};
use mmv_core::MmvError;

fn prior(j: usize) -> PriorParams {
    PriorParams::new(0.1, j).unwrap()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[test]
fn realised_rate_converges() {
    for rate in [0.1, 0.137, 0.2234] {
        let gaps: Vec<f64> = [100, 1000, 10_000, 100_000]
            .iter()
            .map(|&n| (measurement_count(rate, n) as f64 / n as f64 - rate).abs())
            .collect();
        for (g, n) in gaps.iter().zip([100.0, 1000.0, 10_000.0, 100_000.0]) {
            assert!(*g <= 0.5 / n + 1e-15, "R={rate}: gap {g} at N={n}");
        }
    }
}

#[test]
fn ensembles_are_reproducible_and_round_trip() {
    let a = generate(Setting::Mmv1, &prior(3), 1e-3, 0.2, 200, 42).unwrap();
    let b = generate(Setting::Mmv1, &prior(3), 1e-3, 0.2, 200, 42).unwrap();
    assert_eq!(a.measurements, b.measurements);
    let mut buf = Vec::new();
    a.write_to(&mut buf).unwrap();
    let c = MeasurementEnsemble::read_from(buf.as_slice()).unwrap();
    assert_eq!(c.signal, a.signal);
    assert_eq!(c.measurements, a.measurements);
    assert_eq!(c.distinct_matrices(), 3);
}

#[test]
fn settings_share_signal_and_noise_for_a_seed() {
    let one = generate(Setting::Mmv1, &prior(2), 1e-3, 0.3, 300, 9).unwrap();
    let two = generate(Setting::Mmv2, &prior(2), 1e-3, 0.3, 300, 9).unwrap();
    let complex = generate(Setting::ComplexReal, &prior(2), 1e-3, 0.3, 300, 9).unwrap();
    assert_eq!(one.signal, two.signal);
    assert_eq!(one.noise, two.noise);
    assert_eq!(complex.measurements, two.measurements);
    assert_eq!(*one.matrices[0], *two.matrices[0]);
    assert_ne!(*one.matrices[1], *two.matrices[1]);
}

#[test]
fn complex_matrix_is_a_rotation_block_everywhere() {
    let e = generate(Setting::ComplexComplex, &prior(2), 1e-3, 0.3, 100, 5).unwrap();
    let stacked = e.stacked.as_ref().unwrap();
    let (real, imag) = (&e.matrices[0], &e.matrices[1]);
    for mu in 0..e.m {
        for l in 0..e.n {
            let block = [
                [stacked.get(mu, 2 * l), stacked.get(mu, 2 * l + 1)],
                [stacked.get(mu + e.m, 2 * l), stacked.get(mu + e.m, 2 * l + 1)],
            ];
            assert_eq!(block[0][0], block[1][1]);
            assert_eq!(block[0][1], -block[1][0]);
            assert_eq!(block[0][0], real.get(mu, l));
            assert_eq!(block[1][0], imag.get(mu, l));
        }
    }
}

#[test]
fn residuals_of_independent_draws_are_uncorrelated_across_vectors() {
    for setting in [Setting::Mmv1, Setting::Mmv2] {
        let est = empirical_v_covariance(setting, &prior(3), 1e-3, 0.2, 400, EstimatorSpec::IndependentDraw, 400, 17).unwrap();
        for (name, w) in [("w2", est.w2.unwrap()), ("w4", est.w4.unwrap())] {
            assert!((w.mean / w.std_error).abs() < 3.0, "{setting} {name}: {} +- {}", w.mean, w.std_error);
        }
        // Same replica, same vector: the residual power is 2 rho + delta.
        let w1 = est.w1;
        assert!(((w1.mean - 0.201) / w1.std_error).abs() < 3.0, "{setting} w1: {} +- {}", w1.mean, w1.std_error);
    }
}

#[test]
fn exact_estimator_leaves_only_noise() {
    let est = empirical_v_covariance(Setting::Mmv1, &prior(2), 1e-2, 0.25, 200, EstimatorSpec::Exact, 200, 3).unwrap();
    assert!(((est.w1.mean - 1e-2) / est.w1.std_error).abs() < 3.0);
    assert!(((est.w3.mean - 1e-2) / est.w3.std_error).abs() < 3.0);
}

#[test]
fn amp_tracks_state_evolution_in_its_first_iterations() {
    let p = prior(3);
    let delta = from_db(-35.0);
    let rate = 0.22;
    let t = 10;
    let config = AmpConfig {
        t_max: t,
        epsilon: 1e-300,
        v_init: VarianceInit::Rho,
        ..AmpConfig::default()
    };
    let params = ProblemParams::new(p, delta, rate).unwrap();
    let se = se_fixed_point(&params, 0.1, 1e-300, t).unwrap().e_sequence;
    let traces: Vec<Vec<f64>> = (0..50)
        .map(|trial| {
            let e = generate(Setting::Mmv1, &p, delta, rate, 5000, 1000 + trial).unwrap();
            amp_run(&e, &p, &config).unwrap().mse_trace
        })
        .collect();
    for it in 0..t {
        let amp = median(traces.iter().map(|tr| tr[it]).collect());
        let predicted = se[it + 1];
        let gap = (to_db(amp) - to_db(predicted)).abs();
        assert!(gap < 2.0, "iteration {}: AMP {amp} vs SE {predicted} ({gap:.2} dB)", it + 1);
    }
}

#[test]
fn amp_error_decreases_after_the_first_iterations_in_region_one() {
    let p = prior(3);
    let delta = from_db(-35.0);
    let config = AmpConfig {
        v_init: VarianceInit::Rho,
        ..AmpConfig::default()
    };
    let trials = 20;
    let monotone = (0..trials)
        .filter(|&trial| {
            let e = generate(Setting::Mmv1, &p, delta, 0.22, 2000, 500 + trial).unwrap();
            let tr = amp_run(&e, &p, &config).unwrap().mse_trace;
            tr.windows(2).skip(2).all(|w| w[1] <= w[0] * 1.05)
        })
        .count();
    assert!(monotone as f64 >= 0.9 * trials as f64, "{monotone}/{trials}");
}

#[test]
fn amp_recovers_the_signal_in_every_real_setting() {
    for (setting, j) in [(Setting::Mmv1, 3), (Setting::Mmv2, 3), (Setting::ComplexReal, 2)] {
        let p = prior(j);
        let delta = from_db(-35.0);
        let e = generate(setting, &p, delta, 0.3, 1000, 77).unwrap();
        let r = amp_run(&e, &p, &AmpConfig::default()).unwrap();
        let se = se_fixed_point(&e.params, 0.1, 1e-12, 10_000).unwrap().fixed_point;
        assert!(r.converged, "{setting}");
        assert!((to_db(r.final_mse()) - to_db(se)).abs() < 3.0, "{setting}: {} vs {se}", r.final_mse());
    }
}

#[test]
fn amp_rejects_the_complex_matrix_setting() {
    let p = prior(2);
    let e = generate(Setting::ComplexComplex, &p, 1e-3, 0.3, 100, 1).unwrap();
    assert!(matches!(amp_run(&e, &p, &AmpConfig::default()), Err(MmvError::Unsupported(_))));
}
