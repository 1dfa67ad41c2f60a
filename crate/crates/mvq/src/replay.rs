//! Replay storage: transitions grouped into episodes, FIFO eviction that
//! spares demonstration episodes, uniform transition sampling, and a
//! length-prefixed binary episode log that round-trips bit-exactly.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Vec3;
use crate::render::{CameraPose, MultiViewObservation, ViewImage};
use crate::sim::{ActionCommand, Aperture, Task};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionSource {
    Demo,
    Policy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: MultiViewObservation,
    pub action: ActionCommand,
    pub reward: f64,
    pub next_obs: MultiViewObservation,
    pub terminal: bool,
    pub source: TransitionSource,
}

/// One rolled-out episode. Invariants: non-empty, exactly one terminal
/// transition at the end, and `transitions[i+1].obs == transitions[i].next_obs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
    pub success: bool,
    pub task: Task,
    pub seed: u64,
    pub cameras: Vec<CameraPose>,
}

impl EpisodeRecord {
    pub fn source(&self) -> TransitionSource {
        self.transitions[0].source
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Episode-granularity ring buffer. Eviction at capacity removes the oldest
/// policy episode first; demo episodes go only when no policy episode is left.
#[derive(Debug)]
pub struct ReplayBuffer {
    pub capacity_episodes: usize,
    /// Metadata only; sampling stays uniform over all stored transitions.
    pub demo_fraction_target: f64,
    episodes: VecDeque<EpisodeRecord>,
    total_transitions: usize,
}

impl ReplayBuffer {
    pub fn new(capacity_episodes: usize) -> ReplayBuffer {
        ReplayBuffer {
            capacity_episodes,
            demo_fraction_target: 0.0,
            episodes: VecDeque::new(),
            total_transitions: 0,
        }
    }

    pub fn len_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn len_transitions(&self) -> usize {
        self.total_transitions
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    pub fn demo_episodes(&self) -> usize {
        self.episodes
            .iter()
            .filter(|e| e.source() == TransitionSource::Demo)
            .count()
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        debug_assert!(!episode.transitions.is_empty());
        debug_assert!(episode.transitions.last().unwrap().terminal);
        debug_assert!(episode
            .transitions
            .iter()
            .take(episode.transitions.len() - 1)
            .all(|t| !t.terminal));
        if self.episodes.len() == self.capacity_episodes {
            let victim = self
                .episodes
                .iter()
                .position(|e| e.source() == TransitionSource::Policy)
                .unwrap_or(0);
            let evicted = self.episodes.remove(victim).unwrap();
            self.total_transitions -= evicted.transitions.len();
        }
        self.total_transitions += episode.transitions.len();
        self.episodes.push_back(episode);
    }

    /// Uniform draw over every stored transition.
    pub fn sample_transition(&self, rng: &mut ChaCha8Rng) -> &Transition {
        debug_assert!(self.total_transitions > 0);
        let mut idx = rng.random_range(0..self.total_transitions);
        for ep in &self.episodes {
            if idx < ep.transitions.len() {
                return &ep.transitions[idx];
            }
            idx -= ep.transitions.len();
        }
        unreachable!("index within total_transitions")
    }

    /// Success rate over the most recent `n` policy episodes.
    pub fn recent_policy_success_rate(&self, n: usize) -> Option<f64> {
        let recent: Vec<&EpisodeRecord> = self
            .episodes
            .iter()
            .rev()
            .filter(|e| e.source() == TransitionSource::Policy)
            .take(n)
            .collect();
        if recent.is_empty() {
            None
        } else {
            Some(recent.iter().filter(|e| e.success).count() as f64 / recent.len() as f64)
        }
    }
}

// --- episode log ------------------------------------------------------------

const LOG_MAGIC: &[u8; 4] = b"MVQL";
const LOG_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_vec3(out: &mut Vec<u8>, v: Vec3) {
    put_f64(out, v.x);
    put_f64(out, v.y);
    put_f64(out, v.z);
}

fn encode_episode(ep: &EpisodeRecord) -> Vec<u8> {
    let mut out = Vec::new();
    let tag = ep.task.tag().as_bytes();
    put_u32(&mut out, tag.len() as u32);
    out.extend_from_slice(tag);
    out.extend_from_slice(&ep.seed.to_le_bytes());
    out.push(ep.success as u8);
    out.push(match ep.source() {
        TransitionSource::Demo => 0,
        TransitionSource::Policy => 1,
    });
    put_u32(&mut out, ep.cameras.len() as u32);
    for c in &ep.cameras {
        put_vec3(&mut out, c.position);
        put_vec3(&mut out, c.look_at);
        put_vec3(&mut out, c.up);
        put_f64(&mut out, c.fov_degrees);
    }
    let first = &ep.transitions[0].obs;
    let res = first.views[0].resolution;
    let channels = first.views[0].channels;
    put_u32(&mut out, res as u32);
    put_u32(&mut out, channels as u32);

    // Observation sequence: first obs, then every next_obs.
    let n_obs = ep.transitions.len() + 1;
    put_u32(&mut out, n_obs as u32);
    let write_obs = |o: &MultiViewObservation, out: &mut Vec<u8>| {
        out.push((o.gripper_aperture == Aperture::Closed) as u8);
        for v in &o.views {
            out.extend_from_slice(&v.data);
        }
    };
    write_obs(first, &mut out);
    for t in &ep.transitions {
        write_obs(&t.next_obs, &mut out);
    }

    put_u32(&mut out, ep.transitions.len() as u32);
    for t in &ep.transitions {
        put_vec3(&mut out, t.action.displacement);
        out.push(t.action.gripper_open as u8);
        out.push(t.action.gripper_close as u8);
        out.push(t.action.terminate as u8);
        put_f64(&mut out, t.reward);
        out.push(t.terminal as u8);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: "episode log".into(),
                reason: "truncated record".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

fn decode_episode(bytes: &[u8]) -> Result<EpisodeRecord> {
    let mut c = Cursor { bytes, pos: 0 };
    let tag_len = c.u32()? as usize;
    let tag = std::str::from_utf8(c.take(tag_len)?)
        .map_err(|_| Error::Format {
            path: "episode log".into(),
            reason: "bad task tag".into(),
        })?
        .to_string();
    let task = Task::from_tag(&tag)?;
    let seed = c.u64()?;
    let success = c.u8()? != 0;
    let source = if c.u8()? == 0 {
        TransitionSource::Demo
    } else {
        TransitionSource::Policy
    };
    let n_cameras = c.u32()? as usize;
    let mut cameras = Vec::with_capacity(n_cameras);
    for _ in 0..n_cameras {
        cameras.push(CameraPose {
            position: c.vec3()?,
            look_at: c.vec3()?,
            up: c.vec3()?,
            fov_degrees: c.f64()?,
        });
    }
    let res = c.u32()? as usize;
    let channels = c.u32()? as usize;
    let n_obs = c.u32()? as usize;
    let mut obs_seq = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        let aperture = if c.u8()? != 0 {
            Aperture::Closed
        } else {
            Aperture::Opened
        };
        let mut views = Vec::with_capacity(n_cameras);
        for view_id in 0..n_cameras {
            let data = c.take(res * res * channels)?.to_vec();
            views.push(ViewImage {
                resolution: res,
                channels,
                data: Arc::new(data),
                view_id,
            });
        }
        obs_seq.push(MultiViewObservation {
            views,
            gripper_aperture: aperture,
        });
    }
    let n_transitions = c.u32()? as usize;
    if n_transitions + 1 != n_obs {
        return Err(Error::Format {
            path: "episode log".into(),
            reason: "observation/transition count mismatch".into(),
        });
    }
    let mut transitions = Vec::with_capacity(n_transitions);
    for i in 0..n_transitions {
        let displacement = c.vec3()?;
        let gripper_open = c.u8()? != 0;
        let gripper_close = c.u8()? != 0;
        let terminate = c.u8()? != 0;
        let reward = c.f64()?;
        let terminal = c.u8()? != 0;
        transitions.push(Transition {
            obs: obs_seq[i].clone(),
            action: ActionCommand {
                displacement,
                gripper_open,
                gripper_close,
                terminate,
            },
            reward,
            next_obs: obs_seq[i + 1].clone(),
            terminal,
            source,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            path: "episode log".into(),
            reason: "trailing bytes in record".into(),
        });
    }
    Ok(EpisodeRecord {
        transitions,
        success,
        task,
        seed,
        cameras,
    })
}

/// Streaming writer for the episode log.
pub struct EpisodeLogWriter {
    out: BufWriter<std::fs::File>,
}

impl EpisodeLogWriter {
    pub fn create(path: &Path) -> Result<EpisodeLogWriter> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        out.write_all(LOG_MAGIC)?;
        out.write_all(&LOG_VERSION.to_le_bytes())?;
        Ok(EpisodeLogWriter { out })
    }

    pub fn write_episode(&mut self, ep: &EpisodeRecord) -> Result<()> {
        let payload = encode_episode(ep);
        self.out.write_all(&(payload.len() as u32).to_le_bytes())?;
        self.out.write_all(&payload)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_episode_log(path: &Path, episodes: &[EpisodeRecord]) -> Result<()> {
    let mut w = EpisodeLogWriter::create(path)?;
    for ep in episodes {
        w.write_episode(ep)?;
    }
    w.finish()
}

pub fn read_episode_log(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut bytes = Vec::new();
    BufReader::new(std::fs::File::open(path)?).read_to_end(&mut bytes)?;
    let err = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[0..4] != LOG_MAGIC {
        return Err(err("bad magic"));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != LOG_VERSION {
        return Err(err("unsupported version"));
    }
    let mut pos = 8;
    let mut episodes = Vec::new();
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(err("truncated record header"));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + len > bytes.len() {
            return Err(err("truncated record"));
        }
        episodes.push(decode_episode(&bytes[pos..pos + len])?);
        pos += len;
    }
    Ok(episodes)
}
