//! The closed training loop: demo seeding, epsilon-greedy collection, Bellman
//! targets against a lagged target network, Huber TD loss with momentum SGD,
//! and periodic checkpoints plus a metrics CSV.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arch::{
    backward_train, forward_train, sample_view_mask, save_checkpoint, ArchitectureId,
    QNetworkParams, ViewMask,
};
use crate::arch::q_value;
use crate::cem::{cem_maximize, max_q_next, q_evaluator, select_action, CemConfig, SelectionMode};
use crate::config::TrainConfig;
use crate::nn::{ParamSet, SgdMomentum};
use crate::render::{nominal_cameras, observe, perturb_cameras};
use crate::replay::{EpisodeRecord, ReplayBuffer, Transition, TransitionSource};
use crate::sim::{
    check_success, reset_episode, scripted_policy, scripted_policy_with_noise, step, ActionCommand,
    TaskConfig,
};
use crate::{Error, Result};

/// Fixed chunking for gradient accumulation. Chunk boundaries depend only on
/// the batch size, so the f64 summation order — and therefore the result —
/// is identical whether chunks run serially or in parallel.
const GRAD_CHUNKS: usize = 8;

/// Splitmix64-style seed derivation; distinct salts give independent streams.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const SALT_CAMERAS: u64 = 1;
const SALT_DEMO: u64 = 2;
const SALT_POLICY: u64 = 3;
const SALT_SAMPLE: u64 = 4;
const SALT_TARGET: u64 = 5;
const SALT_MASK: u64 = 6;
const SALT_EXPLORE: u64 = 7;

#[derive(Debug, Clone, Copy)]
pub enum PolicySource<'a> {
    Scripted,
    /// Scripted demonstrator with its own noise level, and with terminate
    /// requests replaced by no-ops so a successful episode idles at the goal
    /// state until the step cap (where success still pays out). Used for
    /// exploration collection: each success then contributes a dozen-plus
    /// goal-region transitions instead of a single terminal one, which is
    /// what teaches the value ladder near the goal.
    ScriptedNoTerminate { noise: f64 },
    Learned {
        params: &'a QNetworkParams,
        epsilon: f64,
    },
}

/// Learner state: online parameters, two lagged target snapshots (the
/// current and the previous sync), and optimizer state. Two snapshots allow
/// clipped double-Q Bellman targets.
pub struct TrainState {
    pub online: QNetworkParams,
    pub target: QNetworkParams,
    pub target_prev: QNetworkParams,
    pub step: usize,
    pub optimizer: SgdMomentum,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> TrainState {
        let online = QNetworkParams::init(cfg.arch, cfg.n_views, cfg.resolution, cfg.seed);
        TrainState {
            target: online.clone(),
            target_prev: online.clone(),
            online,
            step: 0,
            optimizer: SgdMomentum::new(cfg.learning_rate, cfg.momentum),
        }
    }
}

/// Roll out one episode to terminal and record every transition with rendered
/// observations. Camera poses get fresh per-episode noise.
pub fn collect_episode(
    source: PolicySource,
    task_cfg: &TaskConfig,
    cem: &CemConfig,
    resolution: usize,
    with_depth: bool,
    seed: u64,
) -> Result<EpisodeRecord> {
    let mut state = reset_episode(task_cfg, seed)?;
    let cameras = perturb_cameras(&nominal_cameras(), mix(seed, SALT_CAMERAS));
    let mut obs = observe(&state, &cameras, with_depth, resolution);
    let mut transitions = Vec::new();
    let success = loop {
        let step_seed = mix(seed, 100 + state.step_count as u64);
        let (action, tag) = match source {
            PolicySource::Scripted => (
                scripted_policy(&state, task_cfg, step_seed),
                TransitionSource::Demo,
            ),
            PolicySource::ScriptedNoTerminate { noise } => {
                let mut a = scripted_policy_with_noise(&state, task_cfg, step_seed, noise);
                if a.terminate {
                    a = ActionCommand::noop();
                }
                (a, TransitionSource::Demo)
            }
            PolicySource::Learned { params, epsilon } => {
                let mut c = cem.clone();
                c.epsilon_exploration = epsilon;
                let mode = if epsilon > 0.0 {
                    SelectionMode::EpsilonGreedy
                } else {
                    SelectionMode::Greedy
                };
                (
                    select_action(params, &obs, &c, mode, step_seed)?,
                    TransitionSource::Policy,
                )
            }
        };
        let out = step(&state, &action, task_cfg);
        let next_obs = observe(&out.state, &cameras, with_depth, resolution);
        transitions.push(Transition {
            obs,
            action,
            reward: out.reward,
            next_obs: next_obs.clone(),
            terminal: out.terminal,
            source: tag,
        });
        obs = next_obs;
        if out.terminal {
            break check_success(&out.state, task_cfg);
        }
        state = out.state;
    };
    Ok(EpisodeRecord {
        transitions,
        success,
        task: task_cfg.task,
        seed,
        cameras,
    })
}

/// TD target: reward, plus the discounted CEM maximum of the target network
/// on the next observation for non-terminal transitions. Terminal transitions
/// never touch the network.
pub fn bellman_target(
    t: &Transition,
    target_params: &QNetworkParams,
    cem: &CemConfig,
    gamma: f64,
    seed: u64,
) -> Result<f64> {
    let v = if t.terminal {
        t.reward
    } else {
        t.reward + gamma * max_q_next(target_params, &t.next_obs, cem, seed)?
    };
    if !v.is_finite() {
        return Err(Error::Divergence(format!("non-finite Bellman target {v}")));
    }
    Ok(v)
}

/// Production TD target: clipped double-Q against two lagged target
/// snapshots.
///
/// A single `max_a' Q(s', a')` via CEM systematically inflates targets: the
/// max over dozens of candidates of a noisily fit Q picks up a positive bias
/// every backup, and the loop `Q ≈ r + γ(Q + bias)` settles at a fixed point
/// where aimless wandering scores higher than finishing the task. Taking the
/// CEM argmax on one snapshot but the minimum of both snapshots' values at
/// that action cancels the bias where the two disagree; the target is then
/// clipped to the achievable discounted-return range.
///
/// Episodes cut off by the step cap (terminal but without the agent's
/// terminate flag and without success) are bootstrapped: observations carry
/// no step counter, so a reward-only target there would teach an ordinary
/// state/action pair that the future is worthless.
pub fn bellman_target_clipped_double(
    t: &Transition,
    target: &QNetworkParams,
    target_prev: &QNetworkParams,
    cem: &CemConfig,
    gamma: f64,
    bounds: (f64, f64),
    seed: u64,
) -> Result<f64> {
    let truncated = t.terminal && !t.action.terminate && t.reward < 0.0;
    let v = if t.terminal && !truncated {
        t.reward
    } else {
        let q1 = q_evaluator(target, &t.next_obs, None)?;
        let (a_star, v1) = cem_maximize(q1, cem, seed)?;
        let v2 = q_value(target_prev, &t.next_obs, &a_star, None)?.q_value;
        t.reward + gamma * v1.min(v2)
    };
    if !v.is_finite() {
        return Err(Error::Divergence(format!("non-finite Bellman target {v}")));
    }
    Ok(v.clamp(bounds.0, bounds.1))
}

/// Huber loss and its derivative with respect to the prediction.
pub fn huber(residual: f64, delta: f64) -> (f64, f64) {
    if residual.abs() <= delta {
        (0.5 * residual * residual, residual)
    } else {
        (
            delta * (residual.abs() - 0.5 * delta),
            delta * residual.signum(),
        )
    }
}

/// One optimizer step on a batch against fixed targets. Returns the new state
/// and the batch-mean Huber loss.
pub fn train_step(
    mut state: TrainState,
    batch: &[Transition],
    targets: &[f64],
    cfg: &TrainConfig,
) -> Result<(TrainState, f64)> {
    if batch.len() != targets.len() || batch.is_empty() {
        return Err(Error::Contract("batch and target lengths differ".into()));
    }
    // One dropout mask per batch, drawn from the step counter.
    let mask: Option<ViewMask> = (cfg.arch == ArchitectureId::MvDropout).then(|| {
        sample_view_mask(
            cfg.n_views,
            mix(cfg.seed, mix(state.step as u64, SALT_MASK)),
        )
    });
    let n = batch.len();
    let chunk = n.div_ceil(GRAD_CHUNKS);
    let n_chunks = n.div_ceil(chunk);
    let online = &state.online;
    let partials: Vec<(f64, QNetworkParams)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut grads = online.zeros_like();
            let mut loss = 0.0;
            for i in c * chunk..(c * chunk + chunk).min(n) {
                let rec = forward_train(online, &batch[i].obs, &batch[i].action, mask.as_ref())?;
                let (l, dl) = huber(rec.q() - targets[i], cfg.huber_delta);
                loss += l;
                let g = backward_train(online, &rec, dl / n as f64)?;
                grads.axpy(1.0, &g);
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = online.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        grads.axpy(1.0, g);
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss}")));
    }
    state.online = state.optimizer.step(state.online, &grads)?;
    state.step += 1;
    Ok((state, loss))
}

/// Replace the target parameters with a copy of the online parameters,
/// keeping the outgoing snapshot as the second (older) double-Q target.
pub fn sync_target(mut state: TrainState) -> TrainState {
    state.target_prev = std::mem::replace(&mut state.target, state.online.clone());
    state
}

#[derive(Debug)]
pub struct RunSummary {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub steps_completed: usize,
    pub episodes_collected: usize,
    pub recent_success_rate: Option<f64>,
}

fn epsilon_at(cfg: &TrainConfig, step: usize) -> f64 {
    let half = (cfg.max_gradient_steps / 2).max(1);
    if step >= half {
        cfg.epsilon_final
    } else {
        cfg.epsilon_start
            + (cfg.epsilon_final - cfg.epsilon_start) * step as f64 / half as f64
    }
}

/// Window for the recent-success metric and the early-stop check.
const SUCCESS_WINDOW: usize = 100;

/// Minimum share of collection episodes driven by the scripted demonstrator.
/// The share follows the epsilon schedule but never drops below this floor:
/// with a FIFO episode buffer, a fully decayed scripted share would leave
/// almost no successful outcomes in replay (the retained seed demos aside),
/// and the sparse +1 signal would wash out again.
const SCRIPTED_EXPLORE_FLOOR: f64 = 0.25;

/// Per-step noise half-range for the exploration demonstrator (succeeds
/// ~93% of the time, vs ~20% for the deliberately noisy evaluation
/// baseline). Exploration needs the goal region visited often enough that
/// its value survives uniform replay sampling; the baseline the learner is
/// measured against keeps the default noise.
const EXPLORE_SCRIPTED_NOISE: f64 = 0.008;

/// Full training orchestration: demo seeding, interleaved collection and
/// gradient steps, target syncs, metrics, checkpoints.
pub fn run_training(cfg: &TrainConfig) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.cfg"), cfg.to_text())?;
    let checkpoint_path = cfg.out_dir.join("checkpoint.ckpt");
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(
        metrics,
        "step,loss,buffer_episodes,success_rate_recent,episodes_per_hour"
    )?;

    let task_cfg = cfg.task_config();
    let with_depth = cfg.arch.requires_depth();
    let greedy_cem = cfg.cem(0.0);
    // Achievable discounted-return range for target clipping.
    let return_bounds = (
        -task_cfg.step_penalty / (1.0 - cfg.gamma).max(1e-9),
        task_cfg.success_reward,
    );
    let mut state = TrainState::new(cfg);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);

    let demos: Vec<EpisodeRecord> = (0..cfg.n_demo_episodes)
        .into_par_iter()
        .map(|i| {
            collect_episode(
                PolicySource::Scripted,
                &task_cfg,
                &greedy_cem,
                cfg.resolution,
                with_depth,
                mix(cfg.seed, mix(i as u64, SALT_DEMO)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for d in demos {
        buffer.push(d);
    }
    let mut episodes_collected = cfg.n_demo_episodes;

    let started = Instant::now();
    let mut rng_sample = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_SAMPLE));
    let mut stopped_early = false;
    let mut recent_learned: std::collections::VecDeque<bool> =
        std::collections::VecDeque::with_capacity(SUCCESS_WINDOW);
    let learned_rate = |q: &std::collections::VecDeque<bool>| {
        (!q.is_empty()).then(|| q.iter().filter(|s| **s).count() as f64 / q.len() as f64)
    };
    while state.step < cfg.max_gradient_steps {
        let step_now = state.step;
        if step_now % cfg.collect_interval == 0 && cfg.n_actor > 0 {
            let epsilon = epsilon_at(cfg, step_now);
            let online = &state.online;
            let fresh: Vec<(bool, EpisodeRecord)> = (0..cfg.n_actor)
                .into_par_iter()
                .map(|k| {
                    let idx = (episodes_collected + k) as u64;
                    // Episode-level exploration: with probability epsilon the
                    // collection slot runs the scripted demonstrator instead
                    // of the learned policy, so positive outcomes keep flowing
                    // into replay while the learner is still blind. These
                    // episodes are tagged Policy: only the initial demo set
                    // gets eviction protection, and rolling collection stays
                    // FIFO.
                    let coin = mix(cfg.seed, mix(idx, SALT_EXPLORE)) as f64
                        / u64::MAX as f64;
                    let scripted = coin < epsilon.max(SCRIPTED_EXPLORE_FLOOR);
                    let mut ep = if scripted {
                        collect_episode(
                            PolicySource::ScriptedNoTerminate {
                                noise: EXPLORE_SCRIPTED_NOISE,
                            },
                            &task_cfg,
                            &greedy_cem,
                            cfg.resolution,
                            with_depth,
                            mix(cfg.seed, mix(idx, SALT_POLICY)),
                        )?
                    } else {
                        collect_episode(
                            PolicySource::Learned {
                                params: online,
                                epsilon,
                            },
                            &task_cfg,
                            &greedy_cem,
                            cfg.resolution,
                            with_depth,
                            mix(cfg.seed, mix(idx, SALT_POLICY)),
                        )?
                    };
                    for t in &mut ep.transitions {
                        t.source = TransitionSource::Policy;
                    }
                    Ok((scripted, ep))
                })
                .collect::<Result<Vec<_>>>()?;
            for (scripted, e) in fresh {
                // The stop rule and the reported success rate track only
                // episodes the learned policy actually drove; exploration
                // episodes driven by the demonstrator don't count.
                if !scripted {
                    if recent_learned.len() == SUCCESS_WINDOW {
                        recent_learned.pop_front();
                    }
                    recent_learned.push_back(e.success);
                }
                buffer.push(e);
            }
            episodes_collected += cfg.n_actor;
        }

        let batch: Vec<Transition> = (0..cfg.batch_size)
            .map(|_| buffer.sample_transition(&mut rng_sample).clone())
            .collect();
        let (target_params, target_prev) = (&state.target, &state.target_prev);
        let targets: Vec<f64> = batch
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                bellman_target_clipped_double(
                    t,
                    target_params,
                    target_prev,
                    &greedy_cem,
                    cfg.gamma,
                    return_bounds,
                    mix(
                        cfg.seed,
                        mix((step_now * cfg.batch_size + i) as u64, SALT_TARGET),
                    ),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (new_state, loss) = train_step(state, &batch, &targets, cfg)?;
        state = new_state;
        if state.step % cfg.target_sync_interval == 0 {
            state = sync_target(state);
        }

        let last = state.step == cfg.max_gradient_steps;
        if state.step % cfg.log_interval == 0 || last {
            let recent = learned_rate(&recent_learned);
            let hours = started.elapsed().as_secs_f64() / 3600.0;
            writeln!(
                metrics,
                "{},{:.6},{},{},{:.1}",
                state.step,
                loss,
                buffer.len_episodes(),
                recent.map_or(String::new(), |r| format!("{r:.4}")),
                episodes_collected as f64 / hours.max(1e-9),
            )?;
            metrics.flush()?;
            if cfg.success_stop >= 0.0 && recent.is_some_and(|r| r >= cfg.success_stop) {
                stopped_early = true;
            }
        }
        if state.step % cfg.checkpoint_interval == 0 || last || stopped_early {
            save_checkpoint(&state.online, &checkpoint_path)?;
        }
        if stopped_early {
            break;
        }
    }
    save_checkpoint(&state.online, &checkpoint_path)?;
    metrics.flush()?;
    Ok(RunSummary {
        checkpoint_path,
        metrics_path,
        steps_completed: state.step,
        episodes_collected,
        recent_success_rate: learned_rate(&recent_learned),
    })
}
