//! Robust design search in the latent space: gradient descent on the
//! surrogate prediction, differentiated through the frozen decoder, from a
//! handful of brute-force-selected starting points. Final candidates are
//! thresholded to solid/void fields and re-scored with the finite element
//! robust objective, which is the number that decides the winner.

use crate::grid::{DensityField, ProblemSpec};
use crate::nn::Scalar;
use crate::robust::{robust_compliance, RobustCompliance, RobustConfig};
use crate::surrogate::SurrogateModel;
use crate::vae::VaeModel;
use crate::{Result, RtoError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy)]
pub struct DescentConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Descent stalls when |ΔQ| stays below this for `stall_patience`
    /// consecutive iterations.
    pub stall_tol: f64,
    pub stall_patience: usize,
    /// Prior draws scored by the surrogate when picking starting points.
    pub n_init: usize,
    /// How many of the best draws seed independent descents.
    pub n_restarts: usize,
    pub seed: u64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            learning_rate: 0.01,
            max_iters: 500,
            stall_tol: 1e-6,
            stall_patience: 10,
            n_init: 100,
            n_restarts: 3,
            seed: 0,
        }
    }
}

/// One descent run. `surrogate_values` has one entry per evaluated iterate,
/// starting with the initial point.
#[derive(Debug, Clone)]
pub struct DescentTrace<F: Scalar> {
    pub surrogate_values: Vec<f64>,
    /// Latent iterates, aligned with `surrogate_values`.
    pub z_path: Vec<Vec<F>>,
    pub z_best: Vec<F>,
    pub q_best: f64,
    /// Set when a non-finite prediction cut the run short; the best finite
    /// iterate seen so far is still reported.
    pub aborted: bool,
}

/// Scores `n_init` prior draws with the surrogate and returns the latent
/// points sorted by predicted robust compliance, best first.
pub fn brute_force_init<F: Scalar>(
    vae: &VaeModel<F>,
    surrogate: &SurrogateModel<F>,
    n_init: usize,
    seed: u64,
) -> Result<Vec<(Vec<F>, f64)>> {
    if n_init == 0 {
        return Err(RtoError::Parameter("n_init must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = vae.arch.latent_dim;
    let mut scored = Vec::with_capacity(n_init);
    for _ in 0..n_init {
        let z: Vec<F> = (0..latent)
            .map(|_| {
                crate::nn::sc(<StandardNormal as Distribution<f64>>::sample(
                    &StandardNormal,
                    &mut rng,
                ))
            })
            .collect();
        let theta = vae.decode(&z, 1)?;
        let q = surrogate.predict(&theta, 1)?[0];
        scored.push((z, q));
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(scored)
}

/// Gradient descent on z ↦ surrogate(decode(z)) with a backtracking step:
/// a step that would raise the prediction is halved (up to 30 times) until it
/// does not, so the recorded trajectory is non-increasing. Failure to find a
/// descent step, a stall, or the iteration budget ends the run.
pub fn descend<F: Scalar>(
    vae: &VaeModel<F>,
    surrogate: &SurrogateModel<F>,
    z0: &[F],
    config: &DescentConfig,
) -> Result<DescentTrace<F>> {
    if z0.len() != vae.arch.latent_dim {
        return Err(RtoError::Shape("starting point dimension mismatch".into()));
    }
    let mut z = z0.to_vec();
    let eval = |z: &[F]| -> Result<f64> {
        let theta = vae.decode(z, 1)?;
        Ok(surrogate.predict(&theta, 1)?[0])
    };
    let q0 = eval(&z)?;
    if !q0.is_finite() {
        return Err(RtoError::TrainingDiverged(
            "surrogate non-finite at the starting point".into(),
        ));
    }
    let mut trace = DescentTrace {
        surrogate_values: vec![q0],
        z_path: vec![z.clone()],
        z_best: z.clone(),
        q_best: q0,
        aborted: false,
    };
    let mut stalled = 0usize;
    let mut q = q0;
    for _ in 0..config.max_iters {
        let cache = vae.decode_with_cache(&z, 1)?;
        let grad_theta = surrogate.input_gradient(&cache.theta)?;
        let gz = vae.decode_backward(&cache, &grad_theta)?;
        let mut step = config.learning_rate;
        let mut accepted = None;
        for _ in 0..30 {
            let s = crate::nn::sc::<F>(step);
            let z_new: Vec<F> = z.iter().zip(&gz).map(|(&zi, &gi)| zi - s * gi).collect();
            let q_new = eval(&z_new)?;
            if !q_new.is_finite() {
                trace.aborted = true;
                break;
            }
            if q_new <= q {
                accepted = Some((z_new, q_new));
                break;
            }
            step *= 0.5;
        }
        let Some((z_new, q_new)) = accepted else { break };
        z = z_new;
        trace.surrogate_values.push(q_new);
        trace.z_path.push(z.clone());
        if q_new < trace.q_best {
            trace.q_best = q_new;
            trace.z_best = z.clone();
        }
        if (q - q_new).abs() < config.stall_tol {
            stalled += 1;
            if stalled >= config.stall_patience {
                break;
            }
        } else {
            stalled = 0;
        }
        q = q_new;
    }
    Ok(trace)
}

/// Projects a decoded greyscale field onto a solid/void design: the designable
/// pixels with the highest density are set to 1 until the volume budget is
/// met (ties broken by pixel index), the rest drop to θ_min, and passive
/// pixels stay at θ_min.
pub fn threshold_design(theta: &[f64], spec: &ProblemSpec) -> Result<DensityField> {
    let ne = spec.grid.element_count();
    if theta.len() != ne {
        return Err(RtoError::Shape(format!(
            "field length {} != element count {ne}",
            theta.len()
        )));
    }
    let designable: Vec<usize> =
        (0..ne).filter(|&i| !spec.passive.flags[i]).collect();
    let budget = ((spec.volume_fraction * designable.len() as f64).round() as usize)
        .min(designable.len());
    let mut order = designable;
    order.sort_by(|&a, &b| theta[b].total_cmp(&theta[a]).then(a.cmp(&b)));
    let mut values = vec![spec.theta_min; ne];
    for &i in order.iter().take(budget) {
        values[i] = 1.0;
    }
    DensityField::new(spec.grid, values)
}

/// One fully evaluated design candidate.
#[derive(Debug, Clone)]
pub struct Candidate<F: Scalar> {
    pub z: Vec<F>,
    pub surrogate_q: f64,
    pub design: DensityField,
    pub fe: RobustCompliance,
    /// Trace of the descent that produced this candidate; `None` for raw
    /// starting points.
    pub trace: Option<DescentTrace<F>>,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult<F: Scalar> {
    /// All verified candidates, the winner first.
    pub candidates: Vec<Candidate<F>>,
}

impl<F: Scalar> OptimizeResult<F> {
    pub fn best(&self) -> &Candidate<F> {
        &self.candidates[0]
    }
}

/// Full search: pick starts by brute force, descend from each, then threshold
/// every start and every descent endpoint and rank them by the finite element
/// robust compliance.
pub fn optimize<F: Scalar>(
    spec: &ProblemSpec,
    robust: &RobustConfig,
    vae: &VaeModel<F>,
    surrogate: &SurrogateModel<F>,
    config: &DescentConfig,
) -> Result<OptimizeResult<F>> {
    if config.n_restarts == 0 || config.n_restarts > config.n_init {
        return Err(RtoError::Parameter(format!(
            "n_restarts {} outside 1..=n_init ({})",
            config.n_restarts, config.n_init
        )));
    }
    let starts = brute_force_init(vae, surrogate, config.n_init, config.seed)?;
    let mut candidates = Vec::new();
    let mut verify = |z: Vec<F>, q: f64, trace: Option<DescentTrace<F>>| -> Result<()> {
        let theta: Vec<f64> =
            vae.decode(&z, 1)?.iter().map(|v| v.to_f64().unwrap()).collect();
        let design = threshold_design(&theta, spec)?;
        let fe = robust_compliance(&design, spec, robust)?;
        candidates.push(Candidate { z, surrogate_q: q, design, fe, trace });
        Ok(())
    };
    for (z, q) in starts.into_iter().take(config.n_restarts) {
        let trace = descend(vae, surrogate, &z, config)?;
        verify(z, q, None)?;
        let (zb, qb) = (trace.z_best.clone(), trace.q_best);
        verify(zb, qb, Some(trace))?;
    }
    candidates.sort_by(|a, b| a.fe.q_rob.total_cmp(&b.fe.q_rob));
    Ok(OptimizeResult { candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_l_bracket;
    use crate::nn::Activation;
    use crate::surrogate::SurrogateModel;
    use crate::vae::{VaeArchitecture, VaeModel};

    fn tiny_models(n: usize) -> (VaeModel<f64>, SurrogateModel<f64>) {
        let arch = VaeArchitecture {
            height: n,
            width: n,
            latent_dim: 2,
            hidden: vec![16, 8],
            pool_window: 3,
        };
        let vae = VaeModel::init(arch, 1).unwrap();
        let surr = SurrogateModel::init_with_hidden(n * n, &[12], 2).unwrap();
        (vae, surr)
    }

    #[test]
    fn brute_force_is_sorted_and_seeded() {
        let (vae, surr) = tiny_models(6);
        let a = brute_force_init(&vae, &surr, 20, 7).unwrap();
        let b = brute_force_init(&vae, &surr, 20, 7).unwrap();
        assert_eq!(a.len(), 20);
        for w in a.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        assert_eq!(a[0], b[0]);
        assert_eq!(a[19], b[19]);
    }

    #[test]
    fn descent_does_not_worsen_the_best_value() {
        let (vae, surr) = tiny_models(6);
        let config = DescentConfig { max_iters: 50, learning_rate: 0.05, ..Default::default() };
        let z0 = vec![0.3, -0.4];
        let trace = descend(&vae, &surr, &z0, &config).unwrap();
        assert!(trace.q_best <= trace.surrogate_values[0]);
        assert!(!trace.aborted);
        for w in trace.surrogate_values.windows(2) {
            assert!(w[1] <= w[0], "trajectory increased: {} -> {}", w[0], w[1]);
        }
        let min = trace
            .surrogate_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(trace.q_best, min);
    }

    #[test]
    fn descent_reduces_a_convex_surrogate() {
        // identity-free check: a surrogate with hand-set positive weights on a
        // linear decoder behaves like a smooth bowl, so descent must move down
        let (vae, mut surr) = tiny_models(4);
        for layer in &mut surr.net.layers {
            for w in &mut layer.weights {
                *w = w.abs() + 0.05;
            }
        }
        surr.label_std = 1.0;
        let config = DescentConfig {
            max_iters: 200,
            learning_rate: 0.1,
            stall_patience: 200,
            ..Default::default()
        };
        let trace = descend(&vae, &surr, &[1.0, 1.0], &config).unwrap();
        let first = trace.surrogate_values[0];
        assert!(trace.q_best < first, "no progress: {first} -> {}", trace.q_best);
    }

    #[test]
    fn descent_stops_on_stall() {
        let (vae, mut surr) = tiny_models(4);
        // constant surrogate: zero weights everywhere
        for layer in &mut surr.net.layers {
            for w in &mut layer.weights {
                *w = 0.0;
            }
        }
        let config = DescentConfig { max_iters: 500, ..Default::default() };
        let trace = descend(&vae, &surr, &[0.0, 0.0], &config).unwrap();
        assert!(trace.surrogate_values.len() <= config.stall_patience + 2);
    }

    #[test]
    fn threshold_respects_budget_passive_and_ties() {
        let spec = make_l_bracket(10, 0.4, 1.0).unwrap();
        let ne = spec.grid.element_count();
        // uniform field: ties everywhere, broken by index
        let theta = vec![0.5; ne];
        let design = threshold_design(&theta, &spec).unwrap();
        let designable = spec.passive.designable_count();
        let budget = (spec.volume_fraction * designable as f64).round() as usize;
        let solid = design.values.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(solid, budget);
        // passive elements stay at theta_min
        for (i, &f) in spec.passive.flags.iter().enumerate() {
            if f {
                assert_eq!(design.values[i], spec.theta_min);
            }
        }
        // ties by index: the first `budget` designable cells are the solid ones
        let first_designable: Vec<usize> =
            (0..ne).filter(|&i| !spec.passive.flags[i]).take(budget).collect();
        for &i in &first_designable {
            assert_eq!(design.values[i], 1.0);
        }
        // a graded field keeps exactly the top pixels
        let graded: Vec<f64> = (0..ne).map(|i| i as f64 / ne as f64).collect();
        let design = threshold_design(&graded, &spec).unwrap();
        let mut ranked: Vec<usize> = (0..ne).filter(|&i| !spec.passive.flags[i]).collect();
        ranked.sort_by(|&a, &b| graded[b].total_cmp(&graded[a]));
        for &i in ranked.iter().take(budget) {
            assert_eq!(design.values[i], 1.0);
        }
        for &i in ranked.iter().skip(budget) {
            assert_eq!(design.values[i], spec.theta_min);
        }
    }

    #[test]
    fn threshold_rejects_wrong_length() {
        let spec = make_l_bracket(10, 0.4, 1.0).unwrap();
        assert!(threshold_design(&[0.5; 3], &spec).is_err());
    }

    #[test]
    fn optimize_returns_verified_sorted_candidates() {
        let spec = make_l_bracket(10, 0.4, 1.0).unwrap();
        let robust = RobustConfig::quadrature(1.0, 3).unwrap();
        let (vae, surr) = tiny_models(10);
        let config = DescentConfig {
            n_init: 8,
            n_restarts: 2,
            max_iters: 20,
            ..Default::default()
        };
        let result = optimize(&spec, &robust, &vae, &surr, &config).unwrap();
        assert_eq!(result.candidates.len(), 4);
        for w in result.candidates.windows(2) {
            assert!(w[0].fe.q_rob <= w[1].fe.q_rob);
        }
        assert!(result.best().fe.q_rob.is_finite());
        // the winning design satisfies the volume budget on designable pixels
        let design = &result.best().design;
        let solid = design.values.iter().filter(|&&v| v == 1.0).count();
        let budget =
            (spec.volume_fraction * spec.passive.designable_count() as f64).round() as usize;
        assert_eq!(solid, budget);
    }

    #[test]
    fn optimize_is_deterministic() {
        let spec = make_l_bracket(10, 0.4, 1.0).unwrap();
        let robust = RobustConfig::quadrature(1.0, 3).unwrap();
        let (vae, surr) = tiny_models(10);
        let config = DescentConfig { n_init: 6, n_restarts: 2, max_iters: 10, ..Default::default() };
        let a = optimize(&spec, &robust, &vae, &surr, &config).unwrap();
        let b = optimize(&spec, &robust, &vae, &surr, &config).unwrap();
        assert_eq!(a.best().design.values, b.best().design.values);
        assert_eq!(a.best().fe.q_rob.to_bits(), b.best().fe.q_rob.to_bits());
    }
}
