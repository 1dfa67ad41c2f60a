//! Scripted sub-optimal demonstration policy.
//!
//! A stateless proportional servo over ground truth: approach the nearest
//! source block, grasp, carry over the target, descend, release, terminate.
//! Uniform action noise keeps it deliberately imprecise; the noise scale is
//! calibrated so Insertion success lands near 20%.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Vec3;

/// Half-range of the per-axis uniform displacement noise (meters).
pub const SCRIPTED_NOISE: f64 = 0.019;

const APPROACH_XY_THRESH: f64 = 0.04;
const CRUISE_CLEARANCE: f64 = 0.08;

fn servo_toward(from: Vec3, to: Vec3) -> Vec3 {
    to - from
}

/// Where the carried block should be released.
fn place_target(state: &WorldState, config: &TaskConfig, carried: usize) -> Vec3 {
    match config.task {
        Task::StackingI | Task::StackingII => {
            let left = state.left_bin();
            let base = state
                .blocks
                .iter()
                .enumerate()
                .filter(|&(i, b)| i != carried && !b.attached && left.contains_xy(b.position))
                .min_by(|(_, a), (_, b)| {
                    a.position
                        .horizontal_distance(left.center)
                        .partial_cmp(&b.position.horizontal_distance(left.center))
                        .unwrap()
                })
                .map(|(_, b)| *b);
            match base {
                Some(b) => Vec3::new(
                    b.position.x,
                    b.position.y,
                    b.top() + config.block_edge / 2.0,
                ),
                None => Vec3::new(
                    left.center.x,
                    left.center.y,
                    left.floor_z() + config.block_edge / 2.0,
                ),
            }
        }
        Task::Insertion => match &state.fixture {
            Some(f) => {
                let hole = f.middle_hole();
                Vec3::new(hole.x, hole.y, f.top() + config.block_edge / 2.0)
            }
            None => state.left_bin().center,
        },
    }
}

/// Which block to go pick up next.
fn pick_target(state: &WorldState, config: &TaskConfig) -> Option<usize> {
    let g = state.gripper_position;
    let in_right: Vec<usize> = state
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.attached && state.right_bin().contains_xy(b.position))
        .map(|(i, _)| i)
        .collect();
    let candidates = if !in_right.is_empty() {
        in_right
    } else {
        // Everything left the source bin; retry with any loose block that is
        // not serving as the stacking base.
        let left = state.left_bin();
        let base = match config.task {
            Task::StackingI | Task::StackingII => state
                .blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| !b.attached && left.contains_xy(b.position))
                .min_by(|(_, a), (_, b)| {
                    a.position
                        .horizontal_distance(left.center)
                        .partial_cmp(&b.position.horizontal_distance(left.center))
                        .unwrap()
                })
                .map(|(i, _)| i),
            Task::Insertion => None,
        };
        state
            .blocks
            .iter()
            .enumerate()
            .filter(|&(i, b)| !b.attached && Some(i) != base)
            .map(|(i, _)| i)
            .collect()
    };
    candidates.into_iter().min_by(|&a, &b| {
        state.blocks[a]
            .position
            .distance(g)
            .partial_cmp(&state.blocks[b].position.distance(g))
            .unwrap()
    })
}

/// One noisy servo action toward the current subgoal, recomputed from ground
/// truth every call.
pub fn scripted_policy(state: &WorldState, config: &TaskConfig, seed: u64) -> ActionCommand {
    scripted_policy_with_noise(state, config, seed, SCRIPTED_NOISE)
}

pub fn scripted_policy_with_noise(
    state: &WorldState,
    config: &TaskConfig,
    seed: u64,
    noise: f64,
) -> ActionCommand {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut action = ActionCommand::noop();
    let g = state.gripper_position;

    if check_success(state, config) {
        action.terminate = true;
        return action;
    }

    if let Some(carried) = state.attached_block() {
        let place = place_target(state, config, carried);
        let horiz = g.horizontal_distance(place);
        let open_thresh = match config.task {
            Task::Insertion => config.hole_clearance * 2.5,
            _ => config.block_edge * 0.4,
        };
        if horiz <= open_thresh && (g.z - place.z).abs() < 0.03 {
            // Release in place; where the noisy approach happened to stop is
            // exactly what makes the demonstrator imprecise.
            action.gripper_open = true;
            return action;
        }
        if horiz > 0.05 {
            // Travel at cruise height until roughly above the target.
            action.displacement =
                servo_toward(g, Vec3::new(place.x, place.y, place.z + CRUISE_CLEARANCE));
        } else {
            action.displacement = servo_toward(g, place);
        }
    } else if state.gripper_aperture == Aperture::Closed {
        // Empty-handed with closed fingers: a grasp missed, reopen.
        action.gripper_open = true;
        return action;
    } else if let Some(i) = pick_target(state, config) {
        let b = state.blocks[i].position;
        let horiz = g.horizontal_distance(b);
        if horiz < GRASP_RADIUS * 0.8 && (g.z - b.z).abs() < GRASP_HEIGHT * 0.75 {
            // Close without moving, so the grasp envelope check is exact.
            action.gripper_close = true;
            return action;
        }
        if horiz > APPROACH_XY_THRESH {
            action.displacement =
                servo_toward(g, Vec3::new(b.x, b.y, b.z + CRUISE_CLEARANCE.max(g.z - b.z)));
        } else {
            action.displacement = servo_toward(g, b);
        }
    } else {
        action.terminate = true;
        return action;
    }

    action.displacement += Vec3::new(
        rng.random_range(-noise..=noise),
        rng.random_range(-noise..=noise),
        rng.random_range(-noise..=noise),
    );
    action.sanitized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::reset_episode;

    #[test]
    fn far_from_block_servos_toward_it() {
        let cfg = TaskConfig::new(Task::Insertion);
        let s = reset_episode(&cfg, 42).unwrap();
        let a = scripted_policy(&s, &cfg, 0);
        assert!(!a.gripper_open && !a.gripper_close && !a.terminate);
        let target = s.blocks[pick_target(&s, &cfg).unwrap()].position;
        let toward = target - s.gripper_position;
        // Horizontal movement points at the block (noise is smaller than the
        // clamped step here).
        let dot = a.displacement.x * toward.x + a.displacement.y * toward.y;
        assert!(dot > 0.0);
    }

    #[test]
    fn at_block_closes_gripper() {
        let cfg = TaskConfig::new(Task::Insertion);
        let mut s = reset_episode(&cfg, 42).unwrap();
        s.gripper_position = s.blocks[0].position;
        let a = scripted_policy(&s, &cfg, 0);
        assert!(a.gripper_close);
    }

    #[test]
    fn success_state_terminates() {
        let cfg = TaskConfig::new(Task::Insertion);
        let mut s = reset_episode(&cfg, 42).unwrap();
        let f = s.fixture.unwrap();
        s.blocks[0].position = Vec3::new(
            f.position.x,
            f.position.y,
            f.inserted_center_z(cfg.block_edge),
        );
        let a = scripted_policy(&s, &cfg, 0);
        assert!(a.terminate);
    }

    /// Roll episodes with the scripted policy and report the success rate.
    pub(crate) fn scripted_success_rate(task: Task, episodes: u64, seed0: u64) -> f64 {
        scripted_success_rate_with_noise(task, episodes, seed0, SCRIPTED_NOISE)
    }

    fn scripted_success_rate_with_noise(
        task: Task,
        episodes: u64,
        seed0: u64,
        noise: f64,
    ) -> f64 {
        let cfg = TaskConfig::new(task);
        let mut wins = 0u64;
        for e in 0..episodes {
            let mut state = reset_episode(&cfg, seed0 + e).unwrap();
            loop {
                let step_seed = (seed0 + e) * 1000 + state.step_count as u64;
                let a = scripted_policy_with_noise(&state, &cfg, step_seed, noise);
                let out = step(&state, &a, &cfg);
                if out.terminal {
                    if check_success(&out.state, &cfg) {
                        wins += 1;
                    }
                    break;
                }
                state = out.state;
            }
        }
        wins as f64 / episodes as f64
    }

    /// Manual helper for re-calibrating `SCRIPTED_NOISE`: run with
    /// `cargo test -- --ignored --nocapture noise_sweep`.
    #[test]
    #[ignore = "manual calibration sweep"]
    fn noise_sweep() {
        for noise in [0.004, 0.006, 0.008, 0.010, 0.012, 0.0145, 0.017, 0.019, 0.021, 0.023] {
            for task in [Task::Insertion, Task::StackingI, Task::StackingII] {
                let rate = scripted_success_rate_with_noise(task, 300, 40_000, noise);
                println!("noise {noise:.4} -> {} success {rate:.3}", task.tag());
            }
        }
    }

    #[test]
    fn insertion_success_rate_is_suboptimal() {
        let rate = scripted_success_rate(Task::Insertion, 700, 10_000);
        assert!(
            (0.15..=0.30).contains(&rate),
            "scripted Insertion success {rate:.3} outside [0.15, 0.30]"
        );
    }
}
