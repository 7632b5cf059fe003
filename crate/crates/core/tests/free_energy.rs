mod common;

use common::{free_energy_mc, Terms};
use mmv_core::model::{from_db, mmse_scalar, PriorParams, ProblemParams};
use mmv_core::replica::{free_energy, mmse, mmse_window, profile};

fn params(rho: f64, j: usize, delta: f64, rate: f64) -> ProblemParams {
    ProblemParams::new(PriorParams::new(rho, j).unwrap(), delta, rate).unwrap()
}

/// Gauss-Hermite nodes and weights for the weight `exp(-x^2)`. Nodes are
/// the eigenvalues of the Jacobi matrix (zero diagonal, off-diagonal
/// `sqrt(k / 2)`), isolated by Sturm-count bisection; weights come from
/// the orthonormal Hermite recurrence.
fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let below = |x: f64| {
        let mut count = 0;
        let mut d = -x;
        for k in 0..n {
            if k > 0 {
                let b2 = k as f64 / 2.0;
                d = -x - b2 / if d == 0.0 { f64::MIN_POSITIVE } else { d };
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    let bound = (2.0 * n as f64).sqrt() + 1.0;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    (0..n)
        .map(|i| {
            let (mut lo, mut hi) = (-bound, bound);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if below(mid) > i {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let z = 0.5 * (lo + hi);
            let (mut p1, mut p2) = (pim4, 0.0);
            for k in 0..n {
                let p3 = p2;
                p2 = p1;
                let kf = (k + 1) as f64;
                p1 = z * (2.0 / kf).sqrt() * p2 - (k as f64 / kf).sqrt() * p3;
            }
            let pp = (2.0 * n as f64).sqrt() * p2;
            (z, 2.0 / (pp * pp))
        })
        .collect()
}

fn free_energy_hermite(p: &ProblemParams, e: f64, nodes: &[(f64, f64)]) -> f64 {
    assert_eq!(p.vectors(), 1);
    let t = Terms::new(p, e);
    let norm = std::f64::consts::PI.sqrt();
    let expect = |rate: f64| {
        nodes
            .iter()
            .map(|&(x, w)| w * t.log_mix(rate, 2.0 * x * x))
            .sum::<f64>()
            / norm
    };
    t.constant + p.rho() * expect(t.slab_rate) + (1.0 - p.rho()) * expect(t.spike_rate)
}

#[test]
fn hermite_rule_integrates_moments() {
    let nodes = gauss_hermite(400);
    let norm = std::f64::consts::PI.sqrt();
    let moment = |k: i32| nodes.iter().map(|&(x, w)| w * (2f64.sqrt() * x).powi(k)).sum::<f64>() / norm;
    assert!((moment(0) - 1.0).abs() < 1e-13);
    assert!((moment(2) - 1.0).abs() < 1e-13);
    assert!((moment(4) - 3.0).abs() < 1e-12);
    assert!((moment(8) - 105.0).abs() < 1e-9);
}

/// Trapezoid rule on the real line; spectrally accurate for analytic
/// integrands with Gaussian decay.
fn free_energy_trapezoid(p: &ProblemParams, e: f64, h: f64) -> f64 {
    assert_eq!(p.vectors(), 1);
    let t = Terms::new(p, e);
    let half = (40.0 / h) as i64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let expect = |rate: f64| {
        (-half..=half)
            .map(|k| {
                let x = k as f64 * h;
                h * phi(x) * t.log_mix(rate, x * x)
            })
            .sum::<f64>()
    };
    t.constant + p.rho() * expect(t.slab_rate) + (1.0 - p.rho()) * expect(t.spike_rate)
}

#[test]
fn single_vector_matches_gauss_hermite() {
    // Hermite rules converge slowly on the log-mixture, so only smooth
    // points (wide transition in |g|) are checked this way.
    let nodes = gauss_hermite(400);
    for (rho, delta, rate, e) in [(0.1, 1e-3, 0.2, 0.05), (0.3, 1e-2, 0.5, 0.1), (0.5, 0.1, 1.0, 0.3), (0.1, 1e-2, 0.1, 0.08)] {
        let p = params(rho, 1, delta, rate);
        let ours = free_energy(&p, e).unwrap();
        let reference = free_energy_hermite(&p, e, &nodes);
        assert!(
            (ours - reference).abs() < 1e-9,
            "rho={rho} delta={delta} R={rate} E={e}: {ours} vs {reference}"
        );
    }
}

#[test]
fn single_vector_matches_trapezoid() {
    for (rho, delta, rate, e) in [
        (0.1, 1e-3, 0.2, 0.05),
        (0.1, 1e-3, 0.2, 5e-3),
        (0.05, 1e-4, 0.15, 2e-3),
        (0.1, 1e-6, 0.12, 1e-5),
        (0.9, 1e-2, 2.0, 0.2),
    ] {
        let p = params(rho, 1, delta, rate);
        let ours = free_energy(&p, e).unwrap();
        let reference = free_energy_trapezoid(&p, e, 2e-3);
        assert!(
            (ours - reference).abs() < 1e-9,
            "rho={rho} delta={delta} R={rate} E={e}: {ours} vs {reference}"
        );
    }
}

#[test]
fn matches_monte_carlo_oracle() {
    for (k, (rho, j, delta_db, rate, e)) in [
        (0.1, 3, -35.0, 0.2, 0.05),
        (0.1, 1, -20.0, 0.3, 1e-3),
        (0.2, 5, -40.0, 0.12, 0.01),
        (0.05, 2, -30.0, 0.5, 3e-4),
    ]
    .into_iter()
    .enumerate()
    {
        let p = params(rho, j, from_db(delta_db), rate);
        let ours = free_energy(&p, e).unwrap();
        let (mc, se) = free_energy_mc(&p, e, 1_000_000, 100 + k as u64);
        assert!((ours - mc).abs() < 3.0 * se, "point {k}: {ours} vs {mc} +- {se}");
    }
}

#[test]
fn maxima_are_stationary_points_of_the_state_evolution_map() {
    for (j, delta_db, rate) in [(1, -35.0, 0.25), (3, -35.0, 0.14), (3, -35.0, 0.13), (5, -45.0, 0.11), (3, -20.0, 0.3)] {
        let p = params(0.1, j, from_db(delta_db), rate);
        let (lo, hi) = mmse_window(&p);
        let prof = profile(&p, lo, hi, 256).unwrap();
        for m in prof.local_maxima.iter().filter(|m| !m.at_boundary) {
            let image = mmse_scalar(&p.prior(), p.effective_noise(m.e)).unwrap();
            assert!((image - m.e).abs() < 1e-5 * m.e.max(1e-3), "J={j} {delta_db} dB R={rate}: {} -> {image}", m.e);
        }
    }
}

#[test]
fn mmse_is_stable_under_grid_refinement() {
    for (j, delta_db, rate) in [(1, -35.0, 0.2), (3, -35.0, 0.14), (3, -50.0, 0.12), (5, -25.0, 0.18)] {
        let p = params(0.1, j, from_db(delta_db), rate);
        let (lo, hi) = mmse_window(&p);
        let coarse = profile(&p, lo, hi, 128).unwrap();
        let fine = profile(&p, lo, hi, 512).unwrap();
        assert_eq!(coarse.local_maxima.len(), fine.local_maxima.len());
        let (a, b) = (coarse.global_max().e, fine.global_max().e);
        assert!((a - b).abs() < 1e-6 * b.max(1e-3), "J={j} {delta_db} dB R={rate}: {a} vs {b}");
    }
}

#[test]
fn mmse_is_monotone_in_rate_and_noise() {
    for j in [1, 3, 5] {
        let base = params(0.1, j, from_db(-35.0), 0.2);
        let by_rate: Vec<f64> = [0.11, 0.15, 0.2, 0.24]
            .iter()
            .map(|&r| mmse(&base.with_rate(r).unwrap()).unwrap())
            .collect();
        assert!(by_rate.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "J={j}: {by_rate:?}");
        let by_noise: Vec<f64> = [-50.0, -40.0, -30.0, -20.0]
            .iter()
            .map(|&d| mmse(&base.with_delta(from_db(d)).unwrap()).unwrap())
            .collect();
        assert!(by_noise.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-9)), "J={j}: {by_noise:?}");
        assert!(by_rate.iter().chain(&by_noise).all(|&m| m > 0.0 && m <= 0.1));
    }
}

#[test]
fn number_of_maxima_goes_one_two_one_as_rate_falls() {
    let base = params(0.1, 3, from_db(-35.0), 0.2);
    let counts: Vec<usize> = [0.24, 0.145, 0.133, 0.11]
        .iter()
        .map(|&r| {
            let p = base.with_rate(r).unwrap();
            let (lo, hi) = mmse_window(&p);
            profile(&p, lo, hi, 256).unwrap().local_maxima.len()
        })
        .collect();
    assert_eq!(counts, vec![1, 2, 2, 1]);
}
