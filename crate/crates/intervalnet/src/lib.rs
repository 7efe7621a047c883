//! Continual learning with interval arithmetic.
//!
//! A point-weight hypernetwork maps hyperrectangular task embeddings to
//! hyperrectangles in a target classifier's weight space. Training drives the
//! worst-case loss over each task's weight box while regularizing the
//! hypernetwork output at frozen prior embeddings; the intersection of all
//! task embedding intervals yields a universal embedding whose center
//! produces a single weight vector serving every task.
//!
//! Module map:
//! - [`interval`]: interval tensors and bound-propagation primitives
//! - [`autodiff`]: tape-based reverse-mode differentiation for the losses
//! - [`target_net`]: the interval MLP classifier (point / interval / relaxed)
//! - [`hypernet`]: interval-input hypernetwork and regularization snapshots
//! - [`embedding`]: task embedding materialization, schedules, intersection
//! - [`trainer`]: the continual training loop, losses, Adam
//! - [`eval`]: task-/domain-/class-incremental evaluation and metrics
//! - [`data`]: IDX parsing, task-stream construction, synthetic benchmarks
//! - [`checkpoint`]: binary checkpoints for resumable experiments
//! - [`verify`]: seeded property suites backing the CLI `verify` command
//! - [`report`]: interval-length histograms and run summaries

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hypernet;
pub mod interval;
pub mod kernels;
pub mod report;
pub mod rng;
pub mod target_net;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use interval::IntervalTensor;
