//! Multi-view Q-learning for precise block manipulation.
//!
//! A desk-scale pipeline: a deterministic kinematic block world observed
//! through several noisy software-rendered cameras, a family of Q-function
//! architectures that fuse the views in different ways, cross-entropy-method
//! action selection, and a replay-driven trainer plus evaluation tools for
//! measuring robustness to missing camera views.

pub mod arch;
pub mod cem;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod render;
pub mod replay;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
