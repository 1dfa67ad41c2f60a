//! Episode lifecycle: reset, step, success check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Vec3;
use crate::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Result of one simulator step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub reward: f64,
    pub terminal: bool,
}

fn uniform_pm(rng: &mut ChaCha8Rng, half_range: f64) -> f64 {
    if half_range == 0.0 {
        0.0
    } else {
        rng.random_range(-half_range..=half_range)
    }
}

fn blocks_overlap_xy(a: Vec3, ea: f64, b: Vec3, eb: f64) -> bool {
    let half = (ea + eb) / 2.0;
    (a.x - b.x).abs() < half && (a.y - b.y).abs() < half
}

/// Sample a block center on the bin floor, keeping the whole block inside the
/// bin footprint and clear of every position already placed.
fn place_block(
    rng: &mut ChaCha8Rng,
    bin: &BinPose,
    edge: f64,
    placed: &[(Vec3, f64)],
    avoid_fixture: Option<&Fixture>,
) -> Result<Vec3> {
    let hx = BIN_SIZE_X / 2.0 - edge / 2.0;
    let hy = BIN_SIZE_Y / 2.0 - edge / 2.0;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let p = Vec3::new(
            bin.center.x + rng.random_range(-hx..=hx),
            bin.center.y + rng.random_range(-hy..=hy),
            bin.floor_z() + edge / 2.0,
        );
        let clear = placed
            .iter()
            .all(|&(q, eq)| !blocks_overlap_xy(p, edge, q, eq));
        let clear_fixture = avoid_fixture.is_none_or(|f| {
            (p.x - f.position.x).abs() > (edge + FIXTURE_SIZE_X) / 2.0
                || (p.y - f.position.y).abs() > (edge + FIXTURE_SIZE_Y) / 2.0
        });
        if clear && clear_fixture {
            return Ok(p);
        }
    }
    Err(Error::Placement {
        blocks: placed.len() + 1,
        attempts: PLACEMENT_ATTEMPTS,
    })
}

fn random_color(rng: &mut ChaCha8Rng) -> BlockColor {
    if rng.random_bool(0.5) {
        BlockColor::Blue
    } else {
        BlockColor::Orange
    }
}

/// Start a fresh episode: noisy bin poses, blocks scattered in their bins,
/// gripper at the home pose with the fingers open.
pub fn reset_episode(config: &TaskConfig, seed: u64) -> Result<WorldState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = config.bin_noise_ranges;
    let bin_at = |nominal: Vec3, rng: &mut ChaCha8Rng| BinPose {
        center: Vec3::new(
            nominal.x + uniform_pm(rng, noise.x),
            nominal.y + uniform_pm(rng, noise.y),
            (nominal.z + uniform_pm(rng, noise.z)).max(0.0),
        ),
    };
    let left = bin_at(LEFT_BIN_NOMINAL, &mut rng);
    let right = bin_at(RIGHT_BIN_NOMINAL, &mut rng);

    let mut blocks = Vec::new();
    let mut fixture = None;

    // Left-bin contents first: a lone block for stacking, the fixture for
    // insertion.
    match config.task {
        Task::StackingI | Task::StackingII => {
            let p = place_block(&mut rng, &left, config.block_edge, &[], None)?;
            blocks.push(Block {
                position: p,
                edge_length: config.block_edge,
                color: random_color(&mut rng),
                attached: false,
            });
        }
        Task::Insertion => {
            let hx = (BIN_SIZE_X - FIXTURE_SIZE_X) / 2.0;
            let hy = (BIN_SIZE_Y - FIXTURE_SIZE_Y) / 2.0;
            fixture = Some(Fixture {
                position: Vec3::new(
                    left.center.x + rng.random_range(-hx..=hx),
                    left.center.y + rng.random_range(-hy..=hy),
                    left.floor_z() + FIXTURE_HEIGHT / 2.0,
                ),
                hole_clearance: config.hole_clearance,
            });
        }
    }

    let mut placed: Vec<(Vec3, f64)> = Vec::new();
    for _ in 0..config.n_right_blocks {
        let p = place_block(&mut rng, &right, config.block_edge, &placed, None)?;
        placed.push((p, config.block_edge));
        blocks.push(Block {
            position: p,
            edge_length: config.block_edge,
            color: random_color(&mut rng),
            attached: false,
        });
    }

    Ok(WorldState {
        gripper_position: GRIPPER_HOME,
        gripper_aperture: Aperture::Opened,
        blocks,
        fixture: None.or(fixture),
        bins: [left, right],
        step_count: 0,
    })
}

/// Highest surface under `p` that can support a block: another block's top,
/// the fixture top or a fixture hole, or the bin/workspace floor.
/// Returns the resting z for the released block's center.
fn settle_center_z(state: &WorldState, released: usize, p: Vec3, edge: f64) -> f64 {
    let mut best = WORKSPACE_MIN.z + edge / 2.0;
    for bin in &state.bins {
        if bin.contains_xy(p) {
            best = best.max(bin.floor_z() + edge / 2.0);
        }
    }
    if let Some(f) = &state.fixture {
        let over_body = (p.x - f.position.x).abs() <= FIXTURE_SIZE_X / 2.0
            && (p.y - f.position.y).abs() <= FIXTURE_SIZE_Y / 2.0;
        if over_body {
            let hole = f.middle_hole();
            if p.horizontal_distance(Vec3::new(hole.x, hole.y, 0.0)) < f.hole_clearance {
                best = best.max(f.inserted_center_z(edge));
            } else {
                best = best.max(f.top() + edge / 2.0);
            }
        }
    }
    for (i, b) in state.blocks.iter().enumerate() {
        if i == released || b.attached {
            continue;
        }
        let over = (p.x - b.position.x).abs() <= b.edge_length / 2.0
            && (p.y - b.position.y).abs() <= b.edge_length / 2.0;
        // Only a surface at or below the release point can catch the block.
        if over && b.top() <= p.z - edge / 2.0 + REST_TOL {
            best = best.max(b.top() + edge / 2.0);
        }
    }
    best
}

/// Advance the world one step. The displacement is clamped, the gripper moves,
/// gripper commands execute, and the reward/terminal flags follow the sparse
/// success-plus-step-penalty scheme.
pub fn step(state: &WorldState, action: &ActionCommand, config: &TaskConfig) -> StepOutcome {
    debug_assert!(state.step_count < config.max_episode_steps);
    let action = action.sanitized();
    let mut next = state.clone();

    next.gripper_position =
        (next.gripper_position + action.displacement).clamp(WORKSPACE_MIN, WORKSPACE_MAX);
    if let Some(i) = next.attached_block() {
        next.blocks[i].position = next.gripper_position;
    }

    if action.gripper_open {
        if let Some(i) = next.attached_block() {
            next.blocks[i].attached = false;
            let p = next.blocks[i].position;
            let edge = next.blocks[i].edge_length;
            next.blocks[i].position.z = settle_center_z(&next, i, p, edge);
        }
        next.gripper_aperture = Aperture::Opened;
    } else if action.gripper_close {
        if next.gripper_aperture == Aperture::Opened {
            next.gripper_aperture = Aperture::Closed;
            let g = next.gripper_position;
            let grabbed = next
                .blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| {
                    b.position.horizontal_distance(g) < GRASP_RADIUS
                        && (b.position.z - g.z).abs() < GRASP_HEIGHT
                })
                .min_by(|(_, a), (_, b)| {
                    a.position
                        .distance(g)
                        .partial_cmp(&b.position.distance(g))
                        .unwrap()
                })
                .map(|(i, _)| i);
            if let Some(i) = grabbed {
                next.blocks[i].attached = true;
                next.blocks[i].position = g;
            }
        }
    }

    next.step_count += 1;
    let terminal = action.terminate || next.step_count >= config.max_episode_steps;
    let reward = if terminal && check_success(&next, config) {
        config.success_reward
    } else {
        -config.step_penalty
    };
    StepOutcome {
        state: next,
        reward,
        terminal,
    }
}

/// Task-specific success predicate. Depends only on the world state, never on
/// the step counter.
pub fn check_success(state: &WorldState, config: &TaskConfig) -> bool {
    let left = state.left_bin();
    match config.task {
        Task::StackingI | Task::StackingII => {
            let in_left: Vec<&Block> = state
                .blocks
                .iter()
                .filter(|b| !b.attached && left.contains_xy(b.position))
                .collect();
            for lower in &in_left {
                for upper in &in_left {
                    if std::ptr::eq(*lower, *upper) {
                        continue;
                    }
                    let resting = (upper.bottom() - lower.top()).abs() < 1e-6;
                    let offset = upper.position.horizontal_distance(lower.position);
                    if resting && offset < config.block_edge / 2.0 {
                        return true;
                    }
                }
            }
            false
        }
        Task::Insertion => {
            let Some(f) = &state.fixture else {
                return false;
            };
            if !left.contains_xy(f.position) {
                return false;
            }
            let hole = f.middle_hole();
            state.blocks.iter().any(|b| {
                !b.attached
                    && b.position
                        .horizontal_distance(Vec3::new(hole.x, hole.y, 0.0))
                        < f.hole_clearance
                    && (b.position.z - f.inserted_center_z(b.edge_length)).abs() < 1e-6
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn insertion_config() -> TaskConfig {
        TaskConfig::new(Task::Insertion)
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = insertion_config();
        let a = reset_episode(&cfg, 7).unwrap();
        let b = reset_episode(&cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reset_insertion_layout() {
        let cfg = insertion_config();
        let s = reset_episode(&cfg, 3).unwrap();
        assert_eq!(s.blocks.len(), 3);
        assert!(s.fixture.is_some());
        let right = *s.right_bin();
        for b in &s.blocks {
            assert!(right.contains_xy(b.position), "block outside right bin");
        }
        assert!(s.left_bin().contains_xy(s.fixture.unwrap().position));
    }

    #[test]
    fn reset_zero_noise_puts_bins_at_nominal() {
        let mut cfg = TaskConfig::new(Task::StackingI);
        cfg.bin_noise_ranges = Vec3::ZERO;
        let s = reset_episode(&cfg, 11).unwrap();
        assert_eq!(s.left_bin().center, LEFT_BIN_NOMINAL);
        assert_eq!(s.right_bin().center, RIGHT_BIN_NOMINAL);
    }

    #[test]
    fn identity_action_only_bumps_step_count() {
        let cfg = insertion_config();
        let s = reset_episode(&cfg, 1).unwrap();
        let out = step(&s, &ActionCommand::noop(), &cfg);
        assert!(!out.terminal);
        assert_eq!(out.reward, -cfg.step_penalty);
        let mut expect = s.clone();
        expect.step_count += 1;
        assert_eq!(out.state, expect);
    }

    #[test]
    fn close_near_block_attaches_it() {
        let cfg = insertion_config();
        let mut s = reset_episode(&cfg, 2).unwrap();
        let target = s.blocks[0].position;
        // Grasp point 1 mm above the block center.
        s.gripper_position = target + Vec3::new(0.0, 0.0, 0.001);
        let mut a = ActionCommand::noop();
        a.gripper_close = true;
        let out = step(&s, &a, &cfg);
        assert!(out.state.blocks[0].attached);
        assert_eq!(out.state.gripper_aperture, Aperture::Closed);
        // Brute-force check that block 0 really was the geometric candidate.
        let g = s.gripper_position;
        assert!(target.horizontal_distance(g) < GRASP_RADIUS);
        assert!((target.z - g.z).abs() < GRASP_HEIGHT);
    }

    #[test]
    fn terminate_without_success_pays_step_penalty() {
        let cfg = insertion_config();
        let s = reset_episode(&cfg, 4).unwrap();
        let mut a = ActionCommand::noop();
        a.terminate = true;
        let out = step(&s, &a, &cfg);
        assert!(out.terminal);
        assert_eq!(out.reward, -cfg.step_penalty);
    }

    #[test]
    fn stacked_blocks_with_small_offset_succeed() {
        let cfg = TaskConfig::new(Task::StackingI);
        let mut s = reset_episode(&cfg, 5).unwrap();
        let lower = s.blocks[0];
        assert!(s.left_bin().contains_xy(lower.position));
        s.blocks[1].position = Vec3::new(
            lower.position.x + 0.01,
            lower.position.y,
            lower.top() + cfg.block_edge / 2.0,
        );
        assert!(check_success(&s, &cfg));
        // AABB oracle: the two footprints genuinely overlap.
        assert!(blocks_overlap_xy(
            s.blocks[0].position,
            cfg.block_edge,
            s.blocks[1].position,
            cfg.block_edge
        ));
    }

    #[test]
    fn side_by_side_blocks_do_not_succeed() {
        let cfg = TaskConfig::new(Task::StackingI);
        let mut s = reset_episode(&cfg, 5).unwrap();
        let lower = s.blocks[0];
        s.blocks[1].position = Vec3::new(
            lower.position.x + cfg.block_edge + 0.01,
            lower.position.y,
            lower.position.z,
        );
        assert!(!check_success(&s, &cfg));
    }

    #[test]
    fn insertion_requires_hole_clearance() {
        let cfg = insertion_config();
        let mut s = reset_episode(&cfg, 6).unwrap();
        let f = s.fixture.unwrap();
        let depth = f.inserted_center_z(cfg.block_edge);
        // 10 mm off center: outside the 9 mm clearance.
        s.blocks[0].position = Vec3::new(f.position.x + 0.010, f.position.y, depth);
        assert!(!check_success(&s, &cfg));
        // 5 mm off center at depth: inserted.
        s.blocks[0].position = Vec3::new(f.position.x + 0.005, f.position.y, depth);
        assert!(check_success(&s, &cfg));
    }

    #[test]
    fn release_settles_onto_highest_support() {
        let cfg = TaskConfig::new(Task::StackingI);
        let mut s = reset_episode(&cfg, 8).unwrap();
        let lower = s.blocks[0];
        // Carry block 1 above block 0 and release it.
        s.blocks[1].attached = true;
        s.gripper_aperture = Aperture::Closed;
        s.gripper_position = Vec3::new(lower.position.x, lower.position.y, lower.top() + 0.1);
        s.blocks[1].position = s.gripper_position;
        let mut a = ActionCommand::noop();
        a.gripper_open = true;
        let out = step(&s, &a, &cfg);
        let dropped = out.state.blocks[1];
        assert!(!dropped.attached);
        assert!((dropped.bottom() - lower.top()).abs() < 1e-9);
        assert!(check_success(&out.state, &cfg));
    }

    #[test]
    fn open_and_close_tie_breaks_to_open() {
        let a = ActionCommand {
            displacement: Vec3::new(0.1, -0.1, 0.0),
            gripper_open: true,
            gripper_close: true,
            terminate: false,
        }
        .sanitized();
        assert!(a.gripper_open && !a.gripper_close);
        assert_eq!(a.displacement.x, MAX_STEP_DISPLACEMENT);
        assert_eq!(a.displacement.y, -MAX_STEP_DISPLACEMENT);
    }

    #[test]
    fn attachment_exclusivity_and_block_conservation() {
        let cfg = insertion_config();
        let mut state = reset_episode(&cfg, 9).unwrap();
        let n = state.blocks.len();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        loop {
            let a = ActionCommand {
                displacement: Vec3::new(
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                ),
                gripper_open: rng.random_bool(0.2),
                gripper_close: rng.random_bool(0.2),
                terminate: false,
            };
            let out = step(&state, &a, &cfg);
            state = out.state;
            assert!(state.blocks.iter().filter(|b| b.attached).count() <= 1);
            assert_eq!(state.blocks.len(), n);
            for b in &state.blocks {
                assert!(b.position.x >= WORKSPACE_MIN.x && b.position.x <= WORKSPACE_MAX.x);
                assert!(b.position.z >= WORKSPACE_MIN.z && b.position.z <= WORKSPACE_MAX.z);
            }
            if out.terminal {
                break;
            }
        }
    }
}
