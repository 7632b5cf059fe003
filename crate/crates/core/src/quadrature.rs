//! Adaptive Gauss–Legendre quadrature and the radial reduction of isotropic
//! Gaussian expectations.
//!
//! For `h ~ N(0, I_J)` and a function `g` of the squared radius, the
//! J-dimensional expectation `E[g(|h|^2)]` collapses onto the chi-square(J)
//! law of `|h|^2`. Substituting `|h|^2 = 2u^2` removes the `r^{J/2-1}`
//! endpoint singularity of the chi-square density, leaving
//!
//! ```text
//! E[g(|h|^2)] = 2 / Gamma(J/2) * \int_0^inf u^{J-1} exp(-u^2) g(2 u^2) du
//! ```
//!
//! whose integrand is smooth on `[0, inf)` for every `J >= 1`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{invalid, MmvError, Result};

const LOW_ORDER: usize = 32;
const HIGH_ORDER: usize = 64;

/// Tolerances for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct QuadratureOptions {
    /// Target error relative to the integral of `|f|`.
    pub rel_tol: f64,
    /// Absolute error floor.
    pub abs_tol: f64,
    /// Equal-width panels the interval is split into before refinement.
    pub initial_panels: usize,
    /// Refinement budget; exceeding it is reported as a failure.
    pub max_panels: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-13,
            abs_tol: 1e-300,
            initial_panels: 4,
            max_panels: 4096,
        }
    }
}

/// Nodes and weights of an n-point Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds the rule by Newton iteration on the Legendre three-term recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let half = n.div_ceil(2);
        for i in 0..half {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Applies the rule to `f` on `[a, b]`, returning `(integral of f, integral of |f|)`.
    fn apply<F: Fn(f64) -> f64>(&self, f: &F, a: f64, b: f64) -> (f64, f64) {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut sum = 0.0;
        let mut abs_sum = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let v = f(mid + half * x);
            sum += w * v;
            abs_sum += w * v.abs();
        }
        (sum * half, abs_sum * half)
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

fn rules() -> &'static (GaussLegendre, GaussLegendre) {
    static RULES: OnceLock<(GaussLegendre, GaussLegendre)> = OnceLock::new();
    RULES.get_or_init(|| (GaussLegendre::new(LOW_ORDER), GaussLegendre::new(HIGH_ORDER)))
}

#[derive(Debug)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    abs_value: f64,
    error: f64,
}

impl Panel {
    fn evaluate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Self {
        let (low, high) = rules();
        let (coarse, _) = low.apply(f, a, b);
        let (value, abs_value) = high.apply(f, a, b);
        Self {
            a,
            b,
            value,
            abs_value,
            error: (value - coarse).abs(),
        }
    }
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.a.total_cmp(&self.a))
    }
}

/// Globally adaptive quadrature of `f` over `[a, b]`.
///
/// Each panel is integrated with 32- and 64-point Gauss–Legendre rules; the
/// panel with the largest disagreement is bisected until the summed estimate
/// falls below `max(abs_tol, rel_tol * \int |f|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, opts: &QuadratureOptions) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) || b <= a {
        return Err(invalid("interval", format!("need finite a < b, got [{a}, {b}]")));
    }
    let n0 = opts.initial_panels.max(1);
    let width = (b - a) / n0 as f64;
    let mut heap = BinaryHeap::with_capacity(2 * n0);
    for i in 0..n0 {
        let lo = a + width * i as f64;
        let hi = if i + 1 == n0 { b } else { lo + width };
        heap.push(Panel::evaluate(&f, lo, hi));
    }
    loop {
        let (mut value, mut abs_value, mut error) = (0.0, 0.0, 0.0);
        for p in heap.iter() {
            value += p.value;
            abs_value += p.abs_value;
            error += p.error;
        }
        if !value.is_finite() || !error.is_finite() {
            return Err(MmvError::NonFinite {
                context: "quadrature integrand",
            });
        }
        let target = opts.abs_tol.max(opts.rel_tol * abs_value);
        if error <= target {
            // Sum in interval order so the result does not depend on heap layout.
            let mut panels = heap.into_vec();
            panels.sort_by(|x, y| x.a.total_cmp(&y.a));
            return Ok(panels.iter().map(|p| p.value).sum());
        }
        if heap.len() >= opts.max_panels {
            return Err(MmvError::QuadratureDiverged {
                panels: heap.len(),
                error,
                target,
            });
        }
        let worst = heap.pop().expect("heap holds at least one panel");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(MmvError::QuadratureDiverged {
                panels: heap.len() + 1,
                error,
                target,
            });
        }
        heap.push(Panel::evaluate(&f, worst.a, mid));
        heap.push(Panel::evaluate(&f, mid, worst.b));
    }
}

/// `Gamma(dim / 2)` for a positive integer `dim`, by the half-integer recurrence.
pub fn half_integer_gamma(dim: usize) -> f64 {
    assert!(dim >= 1);
    let (mut value, mut arg) = if dim % 2 == 0 {
        (1.0, 1.0)
    } else {
        (PI.sqrt(), 0.5)
    };
    let target = dim as f64 / 2.0;
    while arg < target {
        value *= arg;
        arg += 1.0;
    }
    value
}

/// `E[g(|h|^2)]` for `h ~ N(0, I_dim)`, reduced to a 1-D integral against the
/// chi-square(dim) law. `g` receives the squared radius.
pub fn radial_gaussian_expectation<G: Fn(f64) -> f64>(g: G, dim: usize) -> Result<f64> {
    radial_gaussian_expectation_with(g, dim, &QuadratureOptions::default())
}

pub fn radial_gaussian_expectation_with<G: Fn(f64) -> f64>(
    g: G,
    dim: usize,
    opts: &QuadratureOptions,
) -> Result<f64> {
    if dim == 0 {
        return Err(invalid("dim", "dimension must be at least 1"));
    }
    let norm = 2.0 / half_integer_gamma(dim);
    let power = (dim - 1) as i32;
    // exp(-u^2) u^{dim-1} is below 1e-40 of its peak past this radius.
    let upper = (dim as f64 / 2.0).sqrt() + 10.0;
    let integrand = |u: f64| {
        let u2 = u * u;
        if power == 0 {
            (-u2).exp() * g(2.0 * u2)
        } else {
            u.powi(power) * (-u2).exp() * g(2.0 * u2)
        }
    };
    Ok(norm * integrate(integrand, 0.0, upper, opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_integrates_polynomials_exactly() {
        let rule = GaussLegendre::new(LOW_ORDER);
        let total: f64 = rule.weights.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
        // x^62 is within the exactness degree 2n-1 = 63.
        let (v, _) = rule.apply(&|x: f64| x.powi(62), -1.0, 1.0);
        assert!((v - 2.0 / 63.0).abs() < 1e-14);
    }

    #[test]
    fn nodes_are_sorted_and_interior() {
        let rule = GaussLegendre::new(HIGH_ORDER);
        assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
        assert!(rule.nodes.iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn adaptive_handles_sharp_features() {
        // Logistic step of width 1e-4 centred at 0.3.
        let v = integrate(
            |x| 1.0 / (1.0 + ((x - 0.3) / 1e-4).exp()),
            0.0,
            1.0,
            &QuadratureOptions::default(),
        )
        .unwrap();
        assert!((v - 0.3).abs() < 1e-12, "{v}");
    }

    #[test]
    fn bad_interval_is_rejected() {
        assert!(integrate(|x| x, 1.0, 0.0, &QuadratureOptions::default()).is_err());
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let opts = QuadratureOptions {
            max_panels: 4,
            ..Default::default()
        };
        let err = integrate(|x: f64| (1.0 / x.max(1e-300)).sin(), 1e-6, 1.0, &opts).unwrap_err();
        assert!(matches!(err, MmvError::QuadratureDiverged { .. }));
    }

    #[test]
    fn half_integer_gamma_values() {
        assert!((half_integer_gamma(1) - PI.sqrt()).abs() < 1e-15);
        assert!((half_integer_gamma(2) - 1.0).abs() < 1e-15);
        assert!((half_integer_gamma(5) - 0.75 * PI.sqrt()).abs() < 1e-14);
        assert!((half_integer_gamma(8) - 6.0).abs() < 1e-13);
    }

    #[test]
    fn radial_normalization() {
        let v = radial_gaussian_expectation(|_| 1.0, 5).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn radial_chi_square_mean() {
        let v = radial_gaussian_expectation(|r2| r2, 7).unwrap();
        assert!((v - 7.0).abs() < 7e-10);
    }

    #[test]
    fn radial_moment_generating_identity() {
        let t = 0.3;
        let v = radial_gaussian_expectation(|r2| (-t * r2).exp(), 3).unwrap();
        let exact = 1.6f64.powf(-1.5);
        assert!(((v - exact) / exact).abs() < 1e-10);
    }

    #[test]
    fn radial_dim_one_matches_gauss_hermite_free_route() {
        // E[h^4] = 3 for a standard normal.
        let v = radial_gaussian_expectation(|r2| r2 * r2, 1).unwrap();
        assert!((v - 3.0).abs() < 1e-10);
    }

    #[test]
    fn radial_rejects_zero_dim() {
        assert!(radial_gaussian_expectation(|_| 1.0, 0).is_err());
    }
}
