//! Experiment configuration: a flat `key = value` text file with every
//! training default as a key, plus `--set key=value` overrides from the CLI.

use std::path::{Path, PathBuf};

use crate::arch::ArchitectureId;
use crate::cem::CemConfig;
use crate::sim::{Task, TaskConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub arch: ArchitectureId,
    pub seed: u64,
    pub resolution: usize,
    pub n_views: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub huber_delta: f64,
    pub replay_capacity: usize,
    pub n_demo_episodes: usize,
    pub epsilon_start: f64,
    pub epsilon_final: f64,
    pub max_gradient_steps: usize,
    pub target_sync_interval: usize,
    /// Policy episodes collected per collection cycle (0 = demos only).
    pub n_actor: usize,
    /// Gradient steps between collection cycles.
    pub collect_interval: usize,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub cem_samples: usize,
    pub cem_elites: usize,
    pub cem_iterations: usize,
    /// Stop early once the recent policy success rate reaches this value;
    /// negative disables the stop.
    pub success_stop: f64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            task: Task::Insertion,
            arch: ArchitectureId::MvDropout,
            seed: 0,
            resolution: 32,
            n_views: 3,
            gamma: 0.9,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            huber_delta: 1.0,
            replay_capacity: 2000,
            n_demo_episodes: 300,
            epsilon_start: 0.5,
            epsilon_final: 0.05,
            max_gradient_steps: 200_000,
            target_sync_interval: 500,
            n_actor: 1,
            collect_interval: 10,
            checkpoint_interval: 10_000,
            log_interval: 100,
            cem_samples: 64,
            cem_elites: 6,
            cem_iterations: 2,
            success_stop: -1.0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    /// Apply one `key=value` pair. Unknown keys and unparsable values are
    /// config errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {what}"));
        macro_rules! num {
            ($field:ident) => {
                self.$field = value.parse().map_err(|_| bad(key))?
            };
        }
        match key {
            "task" => self.task = Task::from_tag(value)?,
            "arch" => self.arch = ArchitectureId::from_tag(value)?,
            "seed" => num!(seed),
            "resolution" => num!(resolution),
            "n_views" => num!(n_views),
            "gamma" => num!(gamma),
            "batch_size" => num!(batch_size),
            "learning_rate" => num!(learning_rate),
            "momentum" => num!(momentum),
            "huber_delta" => num!(huber_delta),
            "replay_capacity" => num!(replay_capacity),
            "n_demo_episodes" => num!(n_demo_episodes),
            "epsilon_start" => num!(epsilon_start),
            "epsilon_final" => num!(epsilon_final),
            "max_gradient_steps" => num!(max_gradient_steps),
            "target_sync_interval" => num!(target_sync_interval),
            "n_actor" => num!(n_actor),
            "collect_interval" => num!(collect_interval),
            "checkpoint_interval" => num!(checkpoint_interval),
            "log_interval" => num!(log_interval),
            "cem_samples" => num!(cem_samples),
            "cem_elites" => num!(cem_elites),
            "cem_iterations" => num!(cem_iterations),
            "success_stop" => num!(success_stop),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Apply a CLI-style `key=value` override string.
    pub fn apply_set(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        self.apply(key.trim(), value.trim())
    }

    /// Parse a config file of `key = value` lines; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_set(line).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.replay_capacity == 0
            || self.target_sync_interval == 0
            || self.collect_interval == 0
            || self.log_interval == 0
            || self.checkpoint_interval == 0
        {
            return Err(Error::Config("intervals and sizes must be positive".into()));
        }
        if self.resolution < 16 || self.resolution > crate::render::MAX_RESOLUTION {
            return Err(Error::Config(format!(
                "resolution {} outside [16, {}]",
                self.resolution,
                crate::render::MAX_RESOLUTION
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start)
            || !(0.0..=1.0).contains(&self.epsilon_final)
        {
            return Err(Error::Config("epsilon values must be in [0, 1]".into()));
        }
        self.cem(0.0).validate()?;
        if self.arch.is_single_view() && self.n_views != 1 && self.n_views != 3 {
            return Err(Error::Config(format!("n_views {} unsupported", self.n_views)));
        }
        Ok(())
    }

    /// The CEM settings with a given exploration epsilon.
    pub fn cem(&self, epsilon: f64) -> CemConfig {
        CemConfig {
            n_samples: self.cem_samples,
            n_elites: self.cem_elites,
            n_iterations: self.cem_iterations,
            epsilon_exploration: epsilon,
            ..CemConfig::default()
        }
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig::new(self.task)
    }

    /// Serialize back to the flat key=value format.
    pub fn to_text(&self) -> String {
        format!(
            "task = {}\narch = {}\nseed = {}\nresolution = {}\nn_views = {}\n\
             gamma = {}\nbatch_size = {}\nlearning_rate = {}\nmomentum = {}\n\
             huber_delta = {}\nreplay_capacity = {}\nn_demo_episodes = {}\n\
             epsilon_start = {}\nepsilon_final = {}\nmax_gradient_steps = {}\n\
             target_sync_interval = {}\nn_actor = {}\ncollect_interval = {}\n\
             checkpoint_interval = {}\nlog_interval = {}\ncem_samples = {}\n\
             cem_elites = {}\ncem_iterations = {}\nsuccess_stop = {}\nout_dir = {}\n",
            self.task.tag(),
            self.arch.tag(),
            self.seed,
            self.resolution,
            self.n_views,
            self.gamma,
            self.batch_size,
            self.learning_rate,
            self.momentum,
            self.huber_delta,
            self.replay_capacity,
            self.n_demo_episodes,
            self.epsilon_start,
            self.epsilon_final,
            self.max_gradient_steps,
            self.target_sync_interval,
            self.n_actor,
            self.collect_interval,
            self.checkpoint_interval,
            self.log_interval,
            self.cem_samples,
            self.cem_elites,
            self.cem_iterations,
            self.success_stop,
            self.out_dir.display(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn file_round_trip() {
        let cfg = {
            let mut c = TrainConfig::default();
            c.apply_set("arch=MV_Towers").unwrap();
            c.apply_set("learning_rate=0.01").unwrap();
            c.apply_set("task=stacking2").unwrap();
            c
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, cfg.to_text()).unwrap();
        assert_eq!(TrainConfig::from_file(&path).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, "# experiment\n\nseed = 9 # inline\n").unwrap();
        assert_eq!(TrainConfig::from_file(&path).unwrap().seed, 9);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_set("learning_rat=0.1").is_err());
        assert!(cfg.apply_set("no_equals_sign").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_set("gamma=1.5").is_ok()); // applied...
        assert!(cfg.validate().is_err()); // ...but fails validation
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_set("batch_size=abc").is_err());
        assert!(cfg.apply_set("task=stacking9").is_err());
    }
}
