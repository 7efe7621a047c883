//! Synthetic Gaussian continual benchmarks: isotropic blobs at seeded
//! centers, shifted into the nonnegative orthant and clipped to `[0,1]^dim`,
//! with an 80/20 train/test split per class.
//!
//! Two builders: generic per-task blobs (per-task heads), and a
//! shared-solution stream where every task's classes are separated by the
//! same hyperplane, so that a single weight vector can solve all tasks.
//! Tasks in the shared-solution stream shift both class centers along a
//! direction orthogonal to the separating normal, which leaves the optimal
//! separator unchanged.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::rng;
use crate::target_net::HeadLayout;

use super::{ContinualBenchmark, DataSource, SampleSet, TaskDataset};

/// Blob standard deviation in box coordinates. The `separation` argument is
/// expressed in units of this sigma.
const SIGMA: f64 = 0.05;

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; consumes exactly two uniforms per draw.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_direction(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct TaskBlobs {
    /// Class centers, one row per class.
    centers: Vec<Vec<f64>>,
}

fn sample_task(
    blobs: &TaskBlobs,
    n_per_class: usize,
    rng: &mut ChaCha12Rng,
) -> (Array2<f64>, Vec<u8>) {
    let dim = blobs.centers[0].len();
    let k = blobs.centers.len();
    let total = n_per_class * k;
    let mut x = Array2::zeros((total, dim));
    let mut y = Vec::with_capacity(total);
    for (class, center) in blobs.centers.iter().enumerate() {
        for s in 0..n_per_class {
            let row = class * n_per_class + s;
            for j in 0..dim {
                x[[row, j]] = (center[j] + SIGMA * gauss(rng)).clamp(0.0, 1.0);
            }
            y.push(class as u8);
        }
    }
    (x, y)
}

fn make_task(task_id: usize, blobs: &TaskBlobs, n_per_class: usize, rng: &mut ChaCha12Rng) -> TaskDataset {
    // 80/20 split: sample 125% of the requested train size, hold out the
    // tail per class.
    let k = blobs.centers.len();
    let total_per_class = n_per_class + n_per_class.div_ceil(4);
    let (x, y) = sample_task(blobs, total_per_class, rng);
    let data = Arc::new(x);
    let mut train_idx = Vec::new();
    let mut train_lab = Vec::new();
    let mut test_idx = Vec::new();
    let mut test_lab = Vec::new();
    for class in 0..k {
        for s in 0..total_per_class {
            let row = (class * total_per_class + s) as u32;
            if s < n_per_class {
                train_idx.push(row);
                train_lab.push(y[row as usize]);
            } else {
                test_idx.push(row);
                test_lab.push(y[row as usize]);
            }
        }
    }
    TaskDataset {
        task_id,
        classes: (task_id * k..(task_id + 1) * k).collect(),
        train: SampleSet::new(
            DataSource::F64 { data: Arc::clone(&data) },
            train_idx,
            train_lab,
        ),
        test: SampleSet::new(DataSource::F64 { data }, test_idx, test_lab),
    }
}

/// Independent Gaussian blob tasks with per-task heads. Class centers within
/// a task sit `separation * SIGMA` apart along a random direction.
pub fn synthetic_gaussian_tasks(
    num_tasks: usize,
    classes_per_task: usize,
    dim: usize,
    separation: f64,
    n_per_class: usize,
    seed: u64,
) -> ContinualBenchmark {
    assert!(separation > 0.0, "separation must be positive");
    assert!(classes_per_task >= 2 && dim >= 1 && num_tasks >= 1);
    let mut rng = rng::substream(seed, "synthetic.gaussian");
    let mut tasks = Vec::with_capacity(num_tasks);
    for task_id in 0..num_tasks {
        let dir = unit_direction(&mut rng, dim);
        let mid: Vec<f64> = (0..dim).map(|_| 0.35 + 0.3 * rng.random::<f64>()).collect();
        let centers = (0..classes_per_task)
            .map(|k| {
                let offset = (k as f64 - (classes_per_task as f64 - 1.0) / 2.0) * separation * SIGMA;
                (0..dim).map(|j| (mid[j] + offset * dir[j]).clamp(0.0, 1.0)).collect()
            })
            .collect();
        tasks.push(make_task(task_id, &TaskBlobs { centers }, n_per_class, &mut rng));
    }
    ContinualBenchmark {
        name: "synthetic".into(),
        input_dim: dim,
        head: HeadLayout::MultiHead {
            classes_per_task: vec![classes_per_task; num_tasks],
        },
        tasks,
    }
}

/// Binary tasks sharing one optimal separator: all tasks use the same
/// class-splitting direction; per-task shifts move both centers orthogonally
/// to it, so one linear rule (hence one weight vector) solves every task.
pub fn synthetic_shared_solution_tasks(
    num_tasks: usize,
    dim: usize,
    separation: f64,
    n_per_class: usize,
    seed: u64,
) -> ContinualBenchmark {
    assert!(dim >= 2, "shared-solution stream needs dim >= 2");
    assert!(separation > 0.0);
    let mut rng = rng::substream(seed, "synthetic.shared");
    let mut tasks = Vec::with_capacity(num_tasks);
    // Split along the first axis; shift tasks along the remaining axes.
    for task_id in 0..num_tasks {
        let mut mid = vec![0.5; dim];
        for coord in mid.iter_mut().skip(1) {
            *coord = 0.35 + 0.3 * rng.random::<f64>();
        }
        let half = separation * SIGMA / 2.0;
        let mut lo_center = mid.clone();
        let mut hi_center = mid;
        lo_center[0] = (0.5 - half).clamp(0.0, 1.0);
        hi_center[0] = (0.5 + half).clamp(0.0, 1.0);
        let blobs = TaskBlobs { centers: vec![lo_center, hi_center] };
        let mut task = make_task(task_id, &blobs, n_per_class, &mut rng);
        task.classes = vec![0, 1]; // shared label space
        tasks.push(task);
    }
    ContinualBenchmark {
        name: "synthetic_shared".into(),
        input_dim: dim,
        head: HeadLayout::Shared,
        tasks,
    }
}
