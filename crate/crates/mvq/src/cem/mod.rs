//! Cross-entropy method over the hybrid action space: per-axis Gaussians for
//! the displacement, independent Bernoullis for the three binary switches.
//! Serves both rollout action selection and the max over next actions in
//! Bellman targets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{embed_obs, q_from_embedding, QNetworkParams, ViewMask};
use crate::geometry::Vec3;
use crate::render::MultiViewObservation;
use crate::sim::{ActionCommand, MAX_STEP_DISPLACEMENT};
use crate::{Error, Result};

/// Lower bound on the refit standard deviations.
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CemConfig {
    pub n_samples: usize,
    pub n_elites: usize,
    pub n_iterations: usize,
    pub initial_std: Vec3,
    pub epsilon_exploration: f64,
}

impl Default for CemConfig {
    fn default() -> CemConfig {
        CemConfig {
            n_samples: 64,
            n_elites: 6,
            n_iterations: 2,
            initial_std: Vec3::new(
                MAX_STEP_DISPLACEMENT / 2.0,
                MAX_STEP_DISPLACEMENT / 2.0,
                MAX_STEP_DISPLACEMENT / 2.0,
            ),
            epsilon_exploration: 0.0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_elites < 1 || self.n_elites > self.n_samples || self.n_iterations < 1 {
            return Err(Error::Config(format!(
                "bad CEM config: samples={} elites={} iterations={}",
                self.n_samples, self.n_elites, self.n_iterations
            )));
        }
        Ok(())
    }
}

/// Sampling distribution over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec3,
    pub std: Vec3,
    pub p_open: f64,
    pub p_close: f64,
    pub p_terminate: f64,
}

impl ActionDistribution {
    pub fn initial(config: &CemConfig) -> ActionDistribution {
        ActionDistribution {
            mean: Vec3::ZERO,
            std: config.initial_std,
            p_open: 0.25,
            p_close: 0.25,
            p_terminate: 0.25,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> ActionCommand {
        let mut gauss = |mean: f64, std: f64| {
            // Box-Muller; one draw per call keeps the stream simple.
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        ActionCommand {
            displacement: Vec3::new(
                gauss(self.mean.x, self.std.x),
                gauss(self.mean.y, self.std.y),
                gauss(self.mean.z, self.std.z),
            ),
            gripper_open: rng.random_bool(self.p_open.clamp(0.0, 1.0)),
            gripper_close: rng.random_bool(self.p_close.clamp(0.0, 1.0)),
            terminate: rng.random_bool(self.p_terminate.clamp(0.0, 1.0)),
        }
        .sanitized()
    }

    /// Refit Gaussian moments and Bernoulli frequencies to the elites.
    fn refit(&mut self, elites: &[&ActionCommand]) {
        let n = elites.len() as f64;
        let mut mean = Vec3::ZERO;
        for a in elites {
            mean += a.displacement * (1.0 / n);
        }
        let mut var = Vec3::ZERO;
        for a in elites {
            let d = a.displacement - mean;
            var += Vec3::new(d.x * d.x, d.y * d.y, d.z * d.z) * (1.0 / n);
        }
        self.mean = mean;
        self.std = Vec3::new(
            var.x.sqrt().max(STD_FLOOR),
            var.y.sqrt().max(STD_FLOOR),
            var.z.sqrt().max(STD_FLOOR),
        );
        self.p_open = elites.iter().filter(|a| a.gripper_open).count() as f64 / n;
        self.p_close = elites.iter().filter(|a| a.gripper_close).count() as f64 / n;
        self.p_terminate = elites.iter().filter(|a| a.terminate).count() as f64 / n;
    }
}

/// Derivative-free maximization of a batched Q evaluator over actions.
/// Returns the best concrete sample seen across all iterations.
pub fn cem_maximize<F>(
    q: F,
    config: &CemConfig,
    seed: u64,
) -> Result<(ActionCommand, f64)>
where
    F: Fn(&[ActionCommand]) -> Result<Vec<f64>>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dist = ActionDistribution::initial(config);
    let mut best: Option<(ActionCommand, f64)> = None;
    for _ in 0..config.n_iterations {
        let actions: Vec<ActionCommand> =
            (0..config.n_samples).map(|_| dist.sample(&mut rng)).collect();
        let qs = q(&actions)?;
        let mut scored: Vec<(usize, f64)> = qs
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (i, v))
            .collect();
        if scored.is_empty() {
            return Err(Error::Optimizer(
                "all sampled actions evaluated to non-finite Q".into(),
            ));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let (top_i, top_q) = scored[0];
        if best.as_ref().is_none_or(|(_, bq)| top_q > *bq) {
            best = Some((actions[top_i], top_q));
        }
        let elites: Vec<&ActionCommand> = scored
            .iter()
            .take(config.n_elites)
            .map(|&(i, _)| &actions[i])
            .collect();
        dist.refit(&elites);
    }
    Ok(best.unwrap())
}

/// Batched Q evaluator for a fixed observation; the vision and gripper
/// embeddings are computed once and shared across all candidate actions.
pub fn q_evaluator<'a>(
    params: &'a QNetworkParams,
    obs: &MultiViewObservation,
    mask: Option<&ViewMask>,
) -> Result<impl Fn(&[ActionCommand]) -> Result<Vec<f64>> + 'a> {
    let emb = embed_obs(params, obs, mask)?;
    Ok(move |actions: &[ActionCommand]| {
        actions
            .iter()
            .map(|a| q_from_embedding(params, &emb, a).map(|e| e.q_value))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMode {
    Greedy,
    EpsilonGreedy,
}

/// Probability that an exploration action raises the terminate flag. A
/// uniform 0.5 draw would truncate epsilon-greedy episodes after a handful of
/// steps (at epsilon 0.5 every step would carry a 25% chance of ending the
/// episode), starving the buffer of long exploratory trajectories; terminate
/// is kept rare so exploration noise perturbs motion, not episode length.
pub const EXPLORE_P_TERMINATE: f64 = 0.05;

/// A random draw over the action space for epsilon-greedy exploration:
/// uniform displacement, gripper switches at the CEM prior rate, terminate
/// rare (see [`EXPLORE_P_TERMINATE`]).
pub fn uniform_random_action(rng: &mut ChaCha8Rng) -> ActionCommand {
    let m = MAX_STEP_DISPLACEMENT;
    ActionCommand {
        displacement: Vec3::new(
            rng.random_range(-m..=m),
            rng.random_range(-m..=m),
            rng.random_range(-m..=m),
        ),
        gripper_open: rng.random_bool(0.25),
        gripper_close: rng.random_bool(0.25),
        terminate: rng.random_bool(EXPLORE_P_TERMINATE),
    }
    .sanitized()
}

/// Policy extraction: CEM argmax, optionally epsilon-mixed with a uniform
/// random action.
pub fn select_action(
    params: &QNetworkParams,
    obs: &MultiViewObservation,
    config: &CemConfig,
    mode: SelectionMode,
    seed: u64,
) -> Result<ActionCommand> {
    if mode == SelectionMode::EpsilonGreedy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        if rng.random_range(0.0..1.0) < config.epsilon_exploration {
            return Ok(uniform_random_action(&mut rng));
        }
    }
    let q = q_evaluator(params, obs, None)?;
    Ok(cem_maximize(q, config, seed)?.0)
}

/// Best achievable Q against a target-network snapshot for one observation.
/// Terminal handling (returning zero) is the caller's job.
pub fn max_q_next(
    params_target: &QNetworkParams,
    next_obs: &MultiViewObservation,
    config: &CemConfig,
    seed: u64,
) -> Result<f64> {
    let q = q_evaluator(params_target, next_obs, None)?;
    Ok(cem_maximize(q, config, seed)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(d_star: Vec3) -> impl Fn(&[ActionCommand]) -> Result<Vec<f64>> {
        move |actions| {
            Ok(actions
                .iter()
                .map(|a| {
                    let d = a.displacement - d_star;
                    -(d.dot(d))
                })
                .collect())
        }
    }

    #[test]
    fn quadratic_optimum_is_found() {
        let mut hits = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
            let d_star = Vec3::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            );
            let (a, _) = cem_maximize(quadratic(d_star), &CemConfig::default(), seed).unwrap();
            if (a.displacement - d_star).norm() < 1e-2 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 seeds within 1e-2");
    }

    #[test]
    fn degenerate_cem_returns_its_single_sample() {
        let cfg = CemConfig {
            n_samples: 1,
            n_elites: 1,
            n_iterations: 1,
            ..CemConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = ActionDistribution::initial(&cfg);
        let expect = dist.sample(&mut rng);
        let (a, q) = cem_maximize(|acts| Ok(vec![7.5; acts.len()]), &cfg, 3).unwrap();
        assert_eq!(a, expect);
        assert_eq!(q, 7.5);
    }

    #[test]
    fn constant_q_returns_valid_action_and_constant() {
        let (a, q) = cem_maximize(|acts| Ok(vec![1.25; acts.len()]), &CemConfig::default(), 9)
            .unwrap();
        assert_eq!(q, 1.25);
        assert!(a.displacement.x.abs() <= MAX_STEP_DISPLACEMENT);
        assert!(!(a.gripper_open && a.gripper_close));
    }

    #[test]
    fn all_non_finite_q_is_an_error() {
        let r = cem_maximize(
            |acts| Ok(vec![f64::NAN; acts.len()]),
            &CemConfig::default(),
            1,
        );
        assert!(matches!(r, Err(Error::Optimizer(_))));
    }

    #[test]
    fn returned_actions_satisfy_invariants() {
        for seed in 0..50 {
            let (a, _) =
                cem_maximize(quadratic(Vec3::ZERO), &CemConfig::default(), seed).unwrap();
            for c in a.displacement.to_array() {
                assert!(c.abs() <= MAX_STEP_DISPLACEMENT);
            }
            assert!(!(a.gripper_open && a.gripper_close));
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let f = quadratic(Vec3::new(0.01, 0.0, -0.01));
        let a = cem_maximize(&f, &CemConfig::default(), 77).unwrap();
        let b = cem_maximize(&f, &CemConfig::default(), 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positive_scaling_preserves_argmax() {
        let f = quadratic(Vec3::new(0.012, -0.008, 0.004));
        let scaled = |acts: &[ActionCommand]| f(acts).map(|v| v.iter().map(|q| 3.5 * q).collect());
        let (a, _) = cem_maximize(&f, &CemConfig::default(), 21).unwrap();
        let (b, _) = cem_maximize(scaled, &CemConfig::default(), 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn elite_refit_moves_mean_along_linear_landscape() {
        let w = Vec3::new(1.0, -2.0, 0.5);
        let cfg = CemConfig {
            n_iterations: 1,
            ..CemConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dist = ActionDistribution::initial(&cfg);
        let actions: Vec<ActionCommand> =
            (0..cfg.n_samples).map(|_| dist.sample(&mut rng)).collect();
        let mut scored: Vec<(usize, f64)> = actions
            .iter()
            .enumerate()
            .map(|(i, a)| (i, w.dot(a.displacement)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let elites: Vec<&ActionCommand> = scored
            .iter()
            .take(cfg.n_elites)
            .map(|&(i, _)| &actions[i])
            .collect();
        dist.refit(&elites);
        assert!(dist.mean.dot(w) > 0.0);
    }

    #[test]
    fn more_samples_never_hurt_in_expectation() {
        // Order statistics: the max over a superset of samples dominates.
        let f = quadratic(Vec3::new(0.015, 0.01, -0.005));
        let cfg_small = CemConfig {
            n_samples: 16,
            n_iterations: 1,
            n_elites: 4,
            ..CemConfig::default()
        };
        let cfg_big = CemConfig {
            n_samples: 128,
            n_iterations: 1,
            n_elites: 4,
            ..CemConfig::default()
        };
        let (mut small_sum, mut big_sum) = (0.0, 0.0);
        for seed in 0..100 {
            small_sum += cem_maximize(&f, &cfg_small, seed).unwrap().1;
            big_sum += cem_maximize(&f, &cfg_big, seed).unwrap().1;
        }
        assert!(big_sum >= small_sum);
    }
}
