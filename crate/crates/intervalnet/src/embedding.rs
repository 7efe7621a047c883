//! Task embeddings: trainable pre-embedding vectors materialized into
//! interval embeddings, the radius warm-up schedule, and the universal
//! embedding (coordinatewise intersection across tasks).
//!
//! Under cos or tanh nesting the center is `(gamma/M) * f(pre)` so every
//! center lies within `gamma/M` of the origin, while the radius is
//! `gamma * softmax(logits)`; with the logits frozen to ones the radius is
//! exactly `gamma/M` per coordinate, which makes the T-fold intersection
//! nonempty for arbitrary pre-embeddings (a single point in the worst case).

use ndarray::{Array1, ArrayD};
use rand::Rng;

use crate::error::Result;
use crate::hypernet::Mode;
use crate::interval::{self, IntervalTensor};
use crate::rng;

/// Center mapping applied to the pre-embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nesting {
    Cos,
    Tanh,
    None,
}

/// Trainable state of one task's embedding.
#[derive(Debug, Clone)]
pub struct TaskEmbeddingState {
    /// Pre-embedding vector (size M), trainable while the task is active.
    pub pre: Array1<f64>,
    /// Perturbation logits (size M); trainable when `trainable_radius`,
    /// otherwise held fixed (all ones).
    pub logits: Array1<f64>,
    pub gamma: f64,
    pub nesting: Nesting,
    pub trainable_radius: bool,
    pub frozen: bool,
}

impl TaskEmbeddingState {
    pub fn dim(&self) -> usize {
        self.pre.len()
    }

    /// Embedding center: `(gamma/M) cos(pre)`, `(gamma/M) tanh(pre)`, or the
    /// raw pre-embedding when no nesting is used.
    pub fn center(&self) -> Array1<f64> {
        let m = self.dim() as f64;
        match self.nesting {
            Nesting::Cos => self.pre.mapv(|a| (self.gamma / m) * a.cos()),
            Nesting::Tanh => self.pre.mapv(|a| (self.gamma / m) * a.tanh()),
            Nesting::None => self.pre.clone(),
        }
    }

    /// Radius for a given effective perturbation value:
    /// `effective_gamma * softmax(logits)`.
    pub fn radius(&self, effective_gamma: f64) -> Array1<f64> {
        let sm = softmax(&self.logits);
        sm.mapv(|p| effective_gamma * p)
    }
}

/// Numerically stabilized softmax.
pub fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = x.mapv(|t| (t - m).exp());
    let s = e.sum();
    e.mapv(|t| t / s)
}

/// Radius warm-up: linear ramp to `gamma` over the first half of training,
/// constant afterwards. `i` is the 1-based iteration index.
pub fn epsilon_schedule(i: usize, n: usize, gamma: f64) -> f64 {
    assert!(i >= 1 && i <= n, "iteration index out of range");
    let half = n / 2;
    if half == 0 || i > half {
        gamma
    } else {
        (i as f64 / half as f64) * gamma
    }
}

/// Materializes an interval embedding: center (always at full gamma) plus
////minus the scheduled radius.
pub fn materialize(state: &TaskEmbeddingState, effective_gamma: f64) -> IntervalTensor {
    assert!(effective_gamma >= 0.0, "effective gamma must be nonnegative");
    let c = state.center().into_dyn();
    let r = state.radius(effective_gamma).into_dyn();
    IntervalTensor::from_mid_rad(&c, &r).expect("radius is nonnegative")
}

/// Coordinatewise intersection of all task embedding intervals. With cos or
/// tanh nesting and frozen uniform radii this is guaranteed nonempty; with
/// trainable radii it may be empty, which is reported, not patched over.
pub fn universal_embedding(intervals: &[IntervalTensor]) -> Result<IntervalTensor> {
    assert!(!intervals.is_empty(), "universal embedding of an empty task list");
    let mut acc = intervals[0].clone();
    for iv in &intervals[1..] {
        acc = interval::intersect(&acc, iv)?;
    }
    Ok(acc)
}

/// Fresh embedding state for the next task.
///
/// Known-identity modes draw a fresh random pre-embedding with trainable
/// uniform-start logits; the domain-incremental mode copies the previous
/// task's state (when available) and keeps the radius fixed at ones.
pub fn init_next_task(
    prev: Option<&TaskEmbeddingState>,
    mode: Mode,
    m: usize,
    gamma: f64,
    nesting: Nesting,
    seed: u64,
    task: usize,
) -> TaskEmbeddingState {
    let trainable_radius = match mode {
        Mode::Til | Mode::Cil => true,
        Mode::Dil => false,
    };
    match (mode, prev) {
        (Mode::Dil, Some(p)) => TaskEmbeddingState {
            pre: p.pre.clone(),
            logits: p.logits.clone(),
            gamma,
            nesting,
            trainable_radius,
            frozen: false,
        },
        _ => {
            let mut rng = rng::substream(seed, &format!("embed.init.task{task}"));
            let pre: Array1<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let logits = match mode {
                // fixed radius: vector of ones (uniform softmax)
                Mode::Dil => Array1::ones(m),
                // trainable radius: zero logits start at the uniform softmax
                Mode::Til | Mode::Cil => Array1::zeros(m),
            };
            TaskEmbeddingState {
                pre,
                logits,
                gamma,
                nesting,
                trainable_radius,
                frozen: false,
            }
        }
    }
}

/// Width of each coordinate of the hypernetwork input box a state generates
/// at full gamma; used by reports.
pub fn full_width(state: &TaskEmbeddingState) -> ArrayD<f64> {
    materialize(state, state.gamma).width()
}
