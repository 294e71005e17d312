//! Uncertainty model and the probabilistic objective: Gauss-Legendre
//! quadrature and Monte-Carlo estimators of the compliance moments, and the
//! robust compliance μ_Q + λ·σ_Q.

use crate::fem::CompliancePlan;
use crate::grid::{DensityField, ProblemSpec};
use crate::parallel::par_map;
use crate::{Result, RtoError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform scalar uncertainty on [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertainScalar {
    pub lo: f64,
    pub hi: f64,
}

impl UncertainScalar {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(RtoError::Parameter(format!("empty range [{lo}, {hi}]")));
        }
        Ok(UncertainScalar { lo, hi })
    }
}

/// Expectation rule on [0, 1]: strictly increasing nodes with positive
/// weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// ∫₀¹ f(x) dx approximated by the rule.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// How the compliance moments are estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    Quadrature(QuadratureRule),
    MonteCarlo { n: usize, seed: u64 },
}

/// Robust-objective configuration: Q_rob = μ + λ·σ.
#[derive(Debug, Clone)]
pub struct RobustConfig {
    pub lambda: f64,
    pub estimator: Estimator,
}

impl RobustConfig {
    pub fn quadrature(lambda: f64, points: usize) -> Result<Self> {
        Ok(RobustConfig { lambda, estimator: Estimator::Quadrature(gauss_legendre(points)?) })
    }
}

/// Moments of the compliance under the load uncertainty.
#[derive(Debug, Clone, Copy)]
pub struct RobustCompliance {
    pub q_rob: f64,
    pub mean: f64,
    pub std: f64,
    /// Set when roundoff produced a negative second-moment variance that was
    /// clamped to zero.
    pub variance_clamped: bool,
}

/// m-point Gauss-Legendre rule mapped to [0, 1] with weights renormalized to
/// sum one, i.e. an expectation rule for U[0, 1]. Exact for polynomials up to
/// degree 2m − 1.
pub fn gauss_legendre(m: usize) -> Result<QuadratureRule> {
    if !(1..=64).contains(&m) {
        return Err(RtoError::Parameter(format!("quadrature point count {m} outside 1..=64")));
    }
    let mut nodes = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    // Newton iteration on the roots of the Legendre polynomial P_m on [-1, 1].
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_deriv(m, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_deriv(m, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1, 1] -> [0, 1]; weight total 2 -> 1
        nodes.push(0.5 * (1.0 - x));
        weights.push(0.5 * w);
    }
    let mut pairs: Vec<(f64, f64)> = nodes.into_iter().zip(weights).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(QuadratureRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

fn legendre_with_deriv(m: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=m {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    if m == 0 {
        return (1.0, 0.0);
    }
    let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Draws n realizations of the uncertain scalar, deterministic per seed.
pub fn sample_xi(u: UncertainScalar, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(u.lo..u.hi)).collect()
}

/// Robust compliance of one design: mean, standard deviation and
/// μ + λ·σ under the problem's load uncertainty.
///
/// The per-realization finite element solves fan out in parallel; moments are
/// reduced over a fixed index order so results are bit-reproducible.
pub fn robust_compliance(
    theta: &DensityField,
    spec: &ProblemSpec,
    cfg: &RobustConfig,
) -> Result<RobustCompliance> {
    if cfg.lambda < 0.0 {
        return Err(RtoError::Parameter(format!("lambda {} < 0", cfg.lambda)));
    }
    let (lo, hi) = spec.load_model.xi_range();
    let plan = CompliancePlan::new(theta, spec)?;
    let (xis, weights): (Vec<f64>, Vec<f64>) = match &cfg.estimator {
        Estimator::Quadrature(rule) => (
            rule.nodes.iter().map(|&t| lo + t * (hi - lo)).collect(),
            rule.weights.clone(),
        ),
        Estimator::MonteCarlo { n, seed } => {
            if *n < 2 {
                return Err(RtoError::Parameter("Monte-Carlo sample count < 2".into()));
            }
            let xis = sample_xi(UncertainScalar { lo, hi }, *n, *seed);
            let w = 1.0 / *n as f64;
            (xis, vec![w; *n])
        }
    };
    let qs: Vec<Result<f64>> = par_map(&xis, |&xi| plan.eval(xi).map(|s| s.compliance));
    let mut mean = 0.0;
    let mut second = 0.0;
    for (q, w) in qs.into_iter().zip(&weights) {
        let q = q?;
        mean += w * q;
        second += w * q * q;
    }
    let raw_var = second - mean * mean;
    let variance_clamped = raw_var < 0.0;
    let std = raw_var.max(0.0).sqrt();
    Ok(RobustCompliance { q_rob: mean + cfg.lambda * std, mean, std, variance_clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_l_bracket;

    #[test]
    fn midpoint_rule() {
        let rule = gauss_legendre(1).unwrap();
        assert_eq!(rule.nodes.len(), 1);
        assert!((rule.nodes[0] - 0.5).abs() < 1e-15);
        assert!((rule.weights[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn seven_point_rule_center_node() {
        let rule = gauss_legendre(7).unwrap();
        assert!((rule.nodes[3] - 0.5).abs() < 1e-14);
        assert!((rule.weights[3] - 0.2089795918).abs() < 1e-9);
        let sum: f64 = rule.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-14);
        // symmetric about 0.5, strictly increasing
        for i in 0..7 {
            assert!((rule.nodes[i] + rule.nodes[6 - i] - 1.0).abs() < 1e-13);
            if i > 0 {
                assert!(rule.nodes[i] > rule.nodes[i - 1]);
            }
        }
    }

    #[test]
    fn polynomial_exactness() {
        // m points exact through degree 2m-1 on [0,1]
        for m in 1..=10usize {
            let rule = gauss_legendre(m).unwrap();
            for k in 0..=(2 * m - 1) {
                let approx = rule.integrate(|x| x.powi(k as i32));
                let exact = 1.0 / (k as f64 + 1.0);
                assert!((approx - exact).abs() < 1e-12, "m={m} k={k}");
            }
        }
        let rule = gauss_legendre(2).unwrap();
        assert!((rule.integrate(|x| x * x * x) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn synthetic_linear_objective_moments() {
        // Q(xi) = xi on U[0,1]: mu = 1/2, sigma = sqrt(1/12).
        let rule = gauss_legendre(7).unwrap();
        let mean = rule.integrate(|x| x);
        let second = rule.integrate(|x| x * x);
        let std = (second - mean * mean).sqrt();
        assert!((mean - 0.5).abs() < 1e-13);
        assert!((std - (1.0f64 / 12.0).sqrt()).abs() < 1e-13);
        assert!((mean + std - 0.788675).abs() < 1e-5);
    }

    #[test]
    fn sample_xi_basics() {
        let u = UncertainScalar::new(0.0, std::f64::consts::PI).unwrap();
        let a = sample_xi(u, 1000, 9);
        let b = sample_xi(u, 1000, 9);
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| (0.0..std::f64::consts::PI).contains(&x)));
        let mean = a.iter().sum::<f64>() / 1000.0;
        // 3 standard errors of a U[0, pi] mean at n = 1000
        let se = std::f64::consts::PI / 12f64.sqrt() / 1000f64.sqrt();
        assert!((mean - std::f64::consts::FRAC_PI_2).abs() < 3.0 * se);
    }

    #[test]
    fn lambda_zero_gives_mean() {
        let spec = make_l_bracket(12, 0.4, 1.0).unwrap();
        let theta = DensityField::uniform(spec.grid, 0.5);
        let cfg = RobustConfig::quadrature(0.0, 5).unwrap();
        let r = robust_compliance(&theta, &spec, &cfg).unwrap();
        assert_eq!(r.q_rob, r.mean);
        assert!(r.mean > 0.0);
    }

    #[test]
    fn q_rob_monotone_in_lambda() {
        let spec = make_l_bracket(12, 0.4, 1.0).unwrap();
        let theta = DensityField::uniform(spec.grid, 0.5);
        let mut last = f64::NEG_INFINITY;
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let cfg = RobustConfig::quadrature(lambda, 5).unwrap();
            let r = robust_compliance(&theta, &spec, &cfg).unwrap();
            assert!(r.q_rob >= last);
            last = r.q_rob;
        }
    }

    #[test]
    fn quadrature_close_to_monte_carlo() {
        let spec = make_l_bracket(12, 0.4, 1.0).unwrap();
        let theta = DensityField::uniform(spec.grid, 0.5);
        let quad = robust_compliance(&theta, &spec, &RobustConfig::quadrature(1.0, 7).unwrap())
            .unwrap();
        let mc = robust_compliance(
            &theta,
            &spec,
            &RobustConfig { lambda: 1.0, estimator: Estimator::MonteCarlo { n: 20_000, seed: 4 } },
        )
        .unwrap();
        assert!((quad.mean - mc.mean).abs() / quad.mean < 0.01);
        assert!((quad.std - mc.std).abs() / quad.std < 0.05);
    }

    #[test]
    fn monte_carlo_is_seed_deterministic() {
        let spec = make_l_bracket(10, 0.4, 1.0).unwrap();
        let theta = DensityField::uniform(spec.grid, 0.5);
        let cfg = RobustConfig { lambda: 1.0, estimator: Estimator::MonteCarlo { n: 50, seed: 11 } };
        let a = robust_compliance(&theta, &spec, &cfg).unwrap();
        let b = robust_compliance(&theta, &spec, &cfg).unwrap();
        assert_eq!(a.q_rob.to_bits(), b.q_rob.to_bits());
    }
}
