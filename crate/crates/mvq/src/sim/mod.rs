//! Kinematic block world: two bins on a desk, axis-aligned blocks, a
//! point-servo gripper, and three tasks (Stacking I, Stacking II, Insertion).
//!
//! Physics is attach/settle: closing the gripper near a block grabs it,
//! opening releases it and it drops straight down onto the highest surface
//! under its center. No dynamics, no rotation.

mod scripted;
mod world;

pub use scripted::{scripted_policy, scripted_policy_with_noise, SCRIPTED_NOISE};
pub use world::{check_success, reset_episode, step, StepOutcome};

use crate::geometry::Vec3;
use crate::{Error, Result};

/// Workspace bounding box (meters). Two bins sit side by side on the floor.
pub const WORKSPACE_MIN: Vec3 = Vec3 {
    x: -0.4,
    y: -0.3,
    z: 0.0,
};
pub const WORKSPACE_MAX: Vec3 = Vec3 {
    x: 0.4,
    y: 0.3,
    z: 0.4,
};

/// Bin footprint: 0.3 m wide (x) by 0.4 m deep (y).
pub const BIN_SIZE_X: f64 = 0.3;
pub const BIN_SIZE_Y: f64 = 0.4;
/// Nominal bin floor height; per-episode noise moves it by up to ±0.05.
pub const BIN_NOMINAL_Z: f64 = 0.05;
pub const LEFT_BIN_NOMINAL: Vec3 = Vec3 {
    x: -0.175,
    y: 0.0,
    z: BIN_NOMINAL_Z,
};
pub const RIGHT_BIN_NOMINAL: Vec3 = Vec3 {
    x: 0.175,
    y: 0.0,
    z: BIN_NOMINAL_Z,
};

/// Fixture body dimensions; three hole positions along x, the middle one is
/// the insertion target.
pub const FIXTURE_SIZE_X: f64 = 0.17;
pub const FIXTURE_SIZE_Y: f64 = 0.08;
pub const FIXTURE_HEIGHT: f64 = 0.04;
pub const FIXTURE_HOLE_SPACING: f64 = 0.06;

/// Gripper grasp envelope around the grasp point.
pub const GRASP_RADIUS: f64 = 0.015;
pub const GRASP_HEIGHT: f64 = 0.02;

pub const MAX_STEP_DISPLACEMENT: f64 = 0.03;
pub const GRIPPER_HOME: Vec3 = Vec3 {
    x: 0.0,
    y: 0.0,
    z: 0.25,
};

pub const DEFAULT_MAX_EPISODE_STEPS: u32 = 40;
pub const DEFAULT_STEP_PENALTY: f64 = 0.01;
pub const DEFAULT_SUCCESS_REWARD: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 0.9;

/// Vertical tolerance for "resting on" checks after settling.
pub const REST_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aperture {
    Opened,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockColor {
    Blue,
    Orange,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub position: Vec3,
    pub edge_length: f64,
    pub color: BlockColor,
    pub attached: bool,
}

impl Block {
    pub fn top(&self) -> f64 {
        self.position.z + self.edge_length / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.position.z - self.edge_length / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixture {
    pub position: Vec3,
    pub hole_clearance: f64,
}

impl Fixture {
    /// Center of the middle (target) hole in the xy plane.
    pub fn middle_hole(&self) -> Vec3 {
        self.position
    }

    pub fn top(&self) -> f64 {
        self.position.z + FIXTURE_HEIGHT / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.position.z - FIXTURE_HEIGHT / 2.0
    }

    /// Resting height for a block center when the block is inserted in a hole.
    pub fn inserted_center_z(&self, edge_length: f64) -> f64 {
        self.bottom() + edge_length / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinPose {
    pub center: Vec3,
}

impl BinPose {
    pub fn contains_xy(&self, p: Vec3) -> bool {
        (p.x - self.center.x).abs() <= BIN_SIZE_X / 2.0
            && (p.y - self.center.y).abs() <= BIN_SIZE_Y / 2.0
    }

    pub fn floor_z(&self) -> f64 {
        self.center.z
    }
}

/// Full simulator ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper_position: Vec3,
    pub gripper_aperture: Aperture,
    pub blocks: Vec<Block>,
    pub fixture: Option<Fixture>,
    /// `bins[0]` is the left (target) bin, `bins[1]` the right (source) bin.
    pub bins: [BinPose; 2],
    pub step_count: u32,
}

impl WorldState {
    pub fn left_bin(&self) -> &BinPose {
        &self.bins[0]
    }

    pub fn right_bin(&self) -> &BinPose {
        &self.bins[1]
    }

    pub fn attached_block(&self) -> Option<usize> {
        self.blocks.iter().position(|b| b.attached)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    StackingI,
    StackingII,
    Insertion,
}

impl Task {
    pub fn tag(&self) -> &'static str {
        match self {
            Task::StackingI => "stacking1",
            Task::StackingII => "stacking2",
            Task::Insertion => "insertion",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Task> {
        match tag {
            "stacking1" => Ok(Task::StackingI),
            "stacking2" => Ok(Task::StackingII),
            "insertion" => Ok(Task::Insertion),
            other => Err(Error::Config(format!("unknown task tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub task: Task,
    pub block_edge: f64,
    pub n_right_blocks: usize,
    /// Only meaningful for Insertion.
    pub hole_clearance: f64,
    pub bin_noise_ranges: Vec3,
    pub max_episode_steps: u32,
    pub step_penalty: f64,
    pub success_reward: f64,
}

impl TaskConfig {
    pub fn new(task: Task) -> TaskConfig {
        let (block_edge, n_right_blocks, hole_clearance) = match task {
            Task::StackingI => (0.05, 1, 0.0),
            Task::StackingII => (0.038, 6, 0.0),
            Task::Insertion => (0.05, 3, 0.009),
        };
        TaskConfig {
            task,
            block_edge,
            n_right_blocks,
            hole_clearance,
            bin_noise_ranges: Vec3::new(0.025, 0.05, 0.05),
            max_episode_steps: DEFAULT_MAX_EPISODE_STEPS,
            step_penalty: DEFAULT_STEP_PENALTY,
            success_reward: DEFAULT_SUCCESS_REWARD,
        }
    }

    pub fn reward_spec(&self) -> RewardSpec {
        RewardSpec {
            gamma: DEFAULT_GAMMA,
            step_penalty: self.step_penalty,
            success_reward: self.success_reward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub gamma: f64,
    pub step_penalty: f64,
    pub success_reward: f64,
}

/// One gripper command: a displacement plus three binary switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionCommand {
    pub displacement: Vec3,
    pub gripper_open: bool,
    pub gripper_close: bool,
    pub terminate: bool,
}

impl ActionCommand {
    pub fn noop() -> ActionCommand {
        ActionCommand {
            displacement: Vec3::ZERO,
            gripper_open: false,
            gripper_close: false,
            terminate: false,
        }
    }

    /// Clamp the displacement per axis and break an open+close tie to open.
    pub fn sanitized(mut self) -> ActionCommand {
        let m = MAX_STEP_DISPLACEMENT;
        self.displacement = self.displacement.clamp(Vec3::new(-m, -m, -m), Vec3::new(m, m, m));
        if self.gripper_open && self.gripper_close {
            self.gripper_close = false;
        }
        self
    }

    /// Flat 6-vector encoding used by network inputs and the episode log:
    /// displacement normalized to [-1, 1], then the three binaries.
    pub fn encode(&self) -> [f64; 6] {
        [
            self.displacement.x / MAX_STEP_DISPLACEMENT,
            self.displacement.y / MAX_STEP_DISPLACEMENT,
            self.displacement.z / MAX_STEP_DISPLACEMENT,
            self.gripper_open as u8 as f64,
            self.gripper_close as u8 as f64,
            self.terminate as u8 as f64,
        ]
    }
}
