//! Benchmark construction: IDX-format parsing, split/permuted task streams
//! over a shared image store, and synthetic Gaussian continual benchmarks.
//!
//! Sample storage stays compact (u8 pixels, one copy shared across tasks);
//! batches are materialized to `f64` in `[0,1]` on demand, applying the
//! task's pixel permutation if any.

pub mod idx;
pub mod synthetic;

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::target_net::HeadLayout;
use crate::trainer::BatchProvider;

/// Backing storage for one benchmark's samples.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Byte pixels scaled to [0,1] on fetch, with an optional pixel
    /// permutation applied first.
    U8 {
        data: Arc<Array2<u8>>,
        permutation: Option<Arc<Vec<u32>>>,
    },
    /// Already-normalized real vectors.
    F64 { data: Arc<Array2<f64>> },
}

impl DataSource {
    fn width(&self) -> usize {
        match self {
            DataSource::U8 { data, .. } => data.ncols(),
            DataSource::F64 { data } => data.ncols(),
        }
    }
}

/// A view onto the source: which rows belong to this set and their
/// within-task labels.
#[derive(Debug, Clone)]
pub struct SampleSet {
    source: DataSource,
    indices: Vec<u32>,
    labels: Vec<u8>,
}

impl SampleSet {
    pub fn new(source: DataSource, indices: Vec<u32>, labels: Vec<u8>) -> Self {
        assert_eq!(indices.len(), labels.len());
        Self { source, indices, labels }
    }

    pub fn input_dim(&self) -> usize {
        self.source.width()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// CSV dump (label, then feature columns) for inspection.
    pub fn to_csv(&self) -> String {
        let d = self.input_dim();
        let mut out = String::from("label");
        for i in 0..d {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        let all: Vec<usize> = (0..self.len()).collect();
        let (x, y) = self.fetch(&all);
        for (row, &label) in y.iter().enumerate() {
            out.push_str(&label.to_string());
            for c in 0..d {
                out.push_str(&format!(",{}", x[[row, c]]));
            }
            out.push('\n');
        }
        out
    }
}

impl BatchProvider for SampleSet {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn fetch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let d = self.input_dim();
        let mut x = Array2::zeros((indices.len(), d));
        let mut y = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let src_row = self.indices[i] as usize;
            match &self.source {
                DataSource::U8 { data, permutation } => {
                    let src = data.row(src_row);
                    match permutation {
                        Some(p) => {
                            for c in 0..d {
                                x[[row, c]] = src[p[c] as usize] as f64 / 255.0;
                            }
                        }
                        None => {
                            for c in 0..d {
                                x[[row, c]] = src[c] as f64 / 255.0;
                            }
                        }
                    }
                }
                DataSource::F64 { data } => {
                    x.row_mut(row).assign(&data.row(src_row));
                }
            }
            y.push(self.labels[i] as usize);
        }
        (x, y)
    }
}

/// One task's train/test split plus its class list.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: usize,
    /// Original class ids covered by this task's head.
    pub classes: Vec<usize>,
    pub train: SampleSet,
    pub test: SampleSet,
}

/// An ordered task stream with a fixed head layout.
#[derive(Debug, Clone)]
pub struct ContinualBenchmark {
    pub name: String,
    pub input_dim: usize,
    pub head: HeadLayout,
    pub tasks: Vec<TaskDataset>,
}

impl ContinualBenchmark {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

/// The canonical digit pairing: (0,1), (2,3), (4,5), (6,7), (8,9).
pub fn default_split_pairs() -> Vec<Vec<usize>> {
    (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect()
}

/// Splits a labeled image set into tasks by class lists. Labels are
/// remapped to within-task indices; `shared_head` lays all tasks over one
/// output slice (all class lists must then have equal length).
pub fn split_tasks(
    train: (Arc<Array2<u8>>, &[u8]),
    test: (Arc<Array2<u8>>, &[u8]),
    pairs: &[Vec<usize>],
    shared_head: bool,
    subset_cap: Option<usize>,
) -> Result<ContinualBenchmark> {
    if pairs.is_empty() {
        return Err(Error::BadSplit("no class lists".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for list in pairs {
        if list.is_empty() {
            return Err(Error::BadSplit("empty class list".into()));
        }
        for &c in list {
            if !seen.insert(c) {
                return Err(Error::BadSplit(format!("class {c} appears in two tasks")));
            }
        }
    }
    if shared_head {
        let k = pairs[0].len();
        if pairs.iter().any(|p| p.len() != k) {
            return Err(Error::BadSplit(
                "shared head requires equal class counts per task".into(),
            ));
        }
    }

    let input_dim = train.0.ncols();
    let mut tasks = Vec::with_capacity(pairs.len());
    for (task_id, classes) in pairs.iter().enumerate() {
        let select = |data: &Arc<Array2<u8>>, labels: &[u8], cap: Option<usize>| {
            let mut indices = Vec::new();
            let mut within = Vec::new();
            for (i, &lab) in labels.iter().enumerate() {
                if let Some(pos) = classes.iter().position(|&c| c == lab as usize) {
                    indices.push(i as u32);
                    within.push(pos as u8);
                    if let Some(cap) = cap {
                        if indices.len() >= cap {
                            break;
                        }
                    }
                }
            }
            SampleSet::new(
                DataSource::U8 { data: Arc::clone(data), permutation: None },
                indices,
                within,
            )
        };
        tasks.push(TaskDataset {
            task_id,
            classes: classes.clone(),
            train: select(&train.0, train.1, subset_cap),
            test: select(&test.0, test.1, None),
        });
    }
    let head = if shared_head {
        HeadLayout::Shared
    } else {
        HeadLayout::MultiHead { classes_per_task: pairs.iter().map(|p| p.len()).collect() }
    };
    Ok(ContinualBenchmark {
        name: "split".into(),
        input_dim,
        head,
        tasks,
    })
}

/// Pixel-permutation task stream: task 0 uses the identity permutation,
/// later tasks independent seeded permutations. All tasks share the label
/// space (one shared head).
pub fn permuted_tasks(
    train: (Arc<Array2<u8>>, &[u8]),
    test: (Arc<Array2<u8>>, &[u8]),
    num_tasks: usize,
    seed: u64,
    subset_cap: Option<usize>,
) -> Result<ContinualBenchmark> {
    use rand::seq::SliceRandom;

    assert!(num_tasks >= 1);
    let input_dim = train.0.ncols();
    let n_classes = 1 + train.1.iter().cloned().max().unwrap_or(0) as usize;
    let mut tasks = Vec::with_capacity(num_tasks);
    for task_id in 0..num_tasks {
        let permutation = if task_id == 0 {
            None
        } else {
            let mut p: Vec<u32> = (0..input_dim as u32).collect();
            let mut rng = crate::rng::substream(seed, &format!("permute.task{task_id}"));
            p.shuffle(&mut rng);
            Some(Arc::new(p))
        };
        let make = |data: &Arc<Array2<u8>>, labels: &[u8], cap: Option<usize>| {
            let n = match cap {
                Some(c) => c.min(labels.len()),
                None => labels.len(),
            };
            SampleSet::new(
                DataSource::U8 {
                    data: Arc::clone(data),
                    permutation: permutation.clone(),
                },
                (0..n as u32).collect(),
                labels[..n].to_vec(),
            )
        };
        tasks.push(TaskDataset {
            task_id,
            classes: (0..n_classes).collect(),
            train: make(&train.0, train.1, subset_cap),
            test: make(&test.0, test.1, None),
        });
    }
    Ok(ContinualBenchmark {
        name: "permuted".into(),
        input_dim,
        head: HeadLayout::Shared,
        tasks,
    })
}
