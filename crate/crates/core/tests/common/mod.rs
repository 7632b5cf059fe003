//! Shared oracles for the integration tests and the acceptance suite.

use mmv_core::model::ProblemParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The closed-form part and the two log-mixture integrands, written out
/// directly in `J` dimensions.
pub struct Terms {
    pub constant: f64,
    pub log_a: f64,
    pub log_b: f64,
    pub slab_rate: f64,
    pub spike_rate: f64,
}

impl Terms {
    pub fn new(p: &ProblemParams, e: f64) -> Self {
        let (rho, j, r, d) = (p.rho(), p.vectors() as f64, p.rate(), p.delta());
        let constant = -0.5 * j * r * ((2.0 * std::f64::consts::PI * (d + e)).ln() + d / (e + d))
            + j * r * (1.0 - rho) / (2.0 * (r + e + d));
        Self {
            constant,
            log_a: rho.ln() + 0.5 * j * ((e + d) / (r + e + d)).ln(),
            log_b: (1.0 - rho).ln(),
            slab_rate: r / (2.0 * (e + d)),
            spike_rate: r / (2.0 * (r + e + d)),
        }
    }

    pub fn log_mix(&self, rate: f64, g2: f64) -> f64 {
        let x = self.log_a;
        let y = self.log_b - rate * g2;
        let m = x.max(y);
        m + ((x - m).exp() + (y - m).exp()).ln()
    }
}

/// Monte Carlo estimate with its standard error; the two integrals use
/// independent draws.
pub fn free_energy_mc(p: &ProblemParams, e: f64, draws: usize, seed: u64) -> (f64, f64) {
    let t = Terms::new(p, e);
    let rho = p.rho();
    let j = p.vectors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moments = |rate: f64| {
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let g2: f64 = (0..j).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
            let v = t.log_mix(rate, g2);
            s1 += v;
            s2 += v * v;
        }
        let n = draws as f64;
        let mean = s1 / n;
        (mean, ((s2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt())
    };
    let (slab, slab_se) = moments(t.slab_rate);
    let (spike, spike_se) = moments(t.spike_rate);
    let value = t.constant + rho * slab + (1.0 - rho) * spike;
    (value, (rho * slab_se).hypot((1.0 - rho) * spike_se))
}
