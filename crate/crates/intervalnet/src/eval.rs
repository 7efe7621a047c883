//! Evaluation: known-task (TIL), entropy-inferred task (CIL), and
//! universal-embedding (DIL) accuracy, plus the accuracy matrix bookkeeping.
//!
//! Predictions always come from interval-center logits `(zl + zu)/2` at the
//! frozen task embedding, except the universal evaluation, which runs a
//! single point forward at the intersection center.

use ndarray::{Array1, ArrayView2};

use crate::embedding::{self, TaskEmbeddingState};
use crate::error::{Error, Result};
use crate::hypernet::Hypernet;
use crate::interval::IntervalTensor;
use crate::target_net::{forward_interval_batch_flat, forward_point_batch, TargetArch};
use crate::trainer::BatchProvider;

/// Evaluation chunk size (rows per interval forward).
const EVAL_CHUNK: usize = 512;

/// Everything needed to evaluate a trained model.
pub struct EvalContext<'a> {
    pub arch: &'a TargetArch,
    pub hnet: &'a Hypernet,
    pub states: &'a [TaskEmbeddingState],
}

impl<'a> EvalContext<'a> {
    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.states.len() {
            return Err(Error::UntrainedTask { task, trained: self.states.len() });
        }
        Ok(())
    }

    /// Flat weight bounds the hypernetwork emits for a task's frozen
    /// embedding at full gamma.
    pub fn task_theta_bounds(&self, task: usize) -> Result<(Array1<f64>, Array1<f64>)> {
        self.check_task(task)?;
        let e = embedding::materialize(&self.states[task], self.states[task].gamma);
        self.hnet.forward_interval(&e)
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..z.len() {
        if z[i] > z[best] {
            best = i;
        }
    }
    best
}

/// Natural-log Shannon entropy of the softmax of a logit slice.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&t| (t - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    -exps
        .iter()
        .map(|&e| {
            let p = e / s;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Known-task accuracy: argmax of interval-center logits over the task's
/// head against the within-task labels.
pub fn eval_til(ctx: &EvalContext<'_>, task: usize, data: &dyn BatchProvider) -> Result<f64> {
    let (tl, tu) = ctx.task_theta_bounds(task)?;
    let head = ctx.arch.head_range(task);
    let n = data.len();
    let mut correct = 0usize;
    let mut at = 0usize;
    while at < n {
        let hi = (at + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let (x, y) = data.fetch(&idx);
        let (zl, zu) = forward_interval_batch_flat(ctx.arch, x.view(), tl.view(), tu.view())?;
        for (row, &label) in y.iter().enumerate() {
            let center: Vec<f64> = head
                .clone()
                .map(|c| (zl[[row, c]] + zu[[row, c]]) / 2.0)
                .collect();
            if argmax(&center) == label {
                correct += 1;
            }
        }
        at = hi;
    }
    Ok(correct as f64 / n as f64)
}

/// Entropy-based task inference for a batch: for each candidate task, the
/// interval-center logits over that task's head are converted to a softmax
/// entropy; the task with minimal entropy wins, ties broken by the lowest
/// task index. Returns one task id per row.
pub fn infer_task_entropy(ctx: &EvalContext<'_>, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if ctx.states.is_empty() {
        return Err(Error::UntrainedTask { task: 0, trained: 0 });
    }
    let rows = x.nrows();
    let mut best = vec![0usize; rows];
    let mut best_h = vec![f64::INFINITY; rows];
    for t in 0..ctx.states.len() {
        let (tl, tu) = ctx.task_theta_bounds(t)?;
        let head = ctx.arch.head_range(t);
        let (zl, zu) = forward_interval_batch_flat(ctx.arch, x, tl.view(), tu.view())?;
        for row in 0..rows {
            let center: Vec<f64> = head
                .clone()
                .map(|c| (zl[[row, c]] + zu[[row, c]]) / 2.0)
                .collect();
            let h = softmax_entropy(&center);
            if h < best_h[row] {
                best_h[row] = h;
                best[row] = t;
            }
        }
    }
    Ok(best)
}

/// Global class index of a (task, within-task label) pair: heads are
/// consecutive slices in the multi-head layout, identical in the shared one.
fn global_label(arch: &TargetArch, task: usize, label: usize) -> usize {
    arch.head_range(task).start + label
}

/// Class-incremental accuracy: infer the task per sample by entropy, then
/// predict within the inferred head. A sample counts as correct when the
/// composed global class label matches the truth.
pub fn eval_cil(ctx: &EvalContext<'_>, per_task_data: &[&dyn BatchProvider]) -> Result<f64> {
    if per_task_data.len() != ctx.states.len() {
        return Err(Error::UntrainedTask {
            task: per_task_data.len().saturating_sub(1),
            trained: ctx.states.len(),
        });
    }
    // Pre-compute every candidate's weight bounds once.
    let bounds: Vec<(Array1<f64>, Array1<f64>)> = (0..ctx.states.len())
        .map(|t| ctx.task_theta_bounds(t))
        .collect::<Result<_>>()?;

    let mut correct = 0usize;
    let mut total = 0usize;
    for (true_task, data) in per_task_data.iter().enumerate() {
        let n = data.len();
        total += n;
        let mut at = 0usize;
        while at < n {
            let hi = (at + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (at..hi).collect();
            let (x, y) = data.fetch(&idx);
            let rows = x.nrows();
            // Candidate centers per task head for this chunk.
            let mut best_task = vec![0usize; rows];
            let mut best_h = vec![f64::INFINITY; rows];
            let mut best_pred = vec![0usize; rows];
            for (t, (tl, tu)) in bounds.iter().enumerate() {
                let head = ctx.arch.head_range(t);
                let (zl, zu) =
                    forward_interval_batch_flat(ctx.arch, x.view(), tl.view(), tu.view())?;
                for row in 0..rows {
                    let center: Vec<f64> = head
                        .clone()
                        .map(|c| (zl[[row, c]] + zu[[row, c]]) / 2.0)
                        .collect();
                    let h = softmax_entropy(&center);
                    if h < best_h[row] {
                        best_h[row] = h;
                        best_task[row] = t;
                        best_pred[row] = argmax(&center);
                    }
                }
            }
            for row in 0..rows {
                let truth = global_label(ctx.arch, true_task, y[row]);
                let pred = global_label(ctx.arch, best_task[row], best_pred[row]);
                if truth == pred {
                    correct += 1;
                }
            }
            at = hi;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Universal-embedding evaluation: one point weight vector from the center
/// of the task-interval intersection, evaluated on every task. Returns the
/// per-task accuracies and the exported flat weight vector.
pub fn eval_universal(
    ctx: &EvalContext<'_>,
    per_task_data: &[&dyn BatchProvider],
) -> Result<(Vec<f64>, Array1<f64>)> {
    if ctx.states.is_empty() {
        return Err(Error::UntrainedTask { task: 0, trained: 0 });
    }
    let intervals: Vec<IntervalTensor> = ctx
        .states
        .iter()
        .map(|s| embedding::materialize(s, s.gamma))
        .collect();
    let universal = embedding::universal_embedding(&intervals)?;
    let center = universal.mid_rad().mid;
    let center_flat: Array1<f64> = center.iter().cloned().collect();
    let theta = ctx.hnet.forward_point(center_flat.view())?;
    let accs = eval_point_theta(ctx.arch, theta.view(), per_task_data)?;
    Ok((accs, theta))
}

/// Per-task accuracies of a fixed point weight vector (used for universal
/// evaluation and for standalone re-evaluation of an exported checkpoint).
pub fn eval_point_theta(
    arch: &TargetArch,
    theta: ndarray::ArrayView1<'_, f64>,
    per_task_data: &[&dyn BatchProvider],
) -> Result<Vec<f64>> {
    let mut accs = Vec::with_capacity(per_task_data.len());
    for (task, data) in per_task_data.iter().enumerate() {
        let head = arch.head_range(task);
        let n = data.len();
        let mut correct = 0usize;
        let mut at = 0usize;
        while at < n {
            let hi = (at + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (at..hi).collect();
            let (x, y) = data.fetch(&idx);
            let z = forward_point_batch(arch, x.view(), theta)?;
            for (row, &label) in y.iter().enumerate() {
                let slice: Vec<f64> = head.clone().map(|c| z[[row, c]]).collect();
                if argmax(&slice) == label {
                    correct += 1;
                }
            }
            at = hi;
        }
        accs.push(correct as f64 / n as f64);
    }
    Ok(accs)
}

/// T x T grid: `acc[r][c]` = accuracy on task `c` after training tasks
/// `0..=r`. Only the lower triangle is meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Appends row `r` (accuracies on tasks `0..=r` after training task r).
    pub fn push_row(&mut self, accs: Vec<f64>) {
        assert_eq!(
            accs.len(),
            self.rows.len() + 1,
            "row r must hold r+1 entries"
        );
        assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)));
        self.rows.push(accs);
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.rows.get(row).and_then(|r| r.get(col)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// CSV with task-index headers; absent upper-triangle cells are empty.
    pub fn to_csv(&self) -> String {
        let t = self.rows.len();
        let mut out = String::from("after_task");
        for c in 0..t {
            out.push_str(&format!(",task_{c}"));
        }
        out.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            out.push_str(&r.to_string());
            for c in 0..t {
                out.push(',');
                if c < row.len() {
                    out.push_str(&format!("{:.6}", row[c]));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            let mut row = Vec::new();
            for cell in &cells[1..] {
                if cell.is_empty() {
                    break;
                }
                row.push(cell.parse::<f64>().map_err(|e| Error::Config(e.to_string()))?);
            }
            rows.push(row);
        }
        let m = Self { rows };
        for (r, row) in m.rows.iter().enumerate() {
            if row.len() != r + 1 {
                return Err(Error::IncompleteMatrix { row: r, got: row.len(), expected: r + 1 });
            }
        }
        Ok(m)
    }
}

/// Summary metrics of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// Mean of the final row.
    pub avg_after_all: f64,
    /// Accuracy on the last task right after training it.
    pub last_task: f64,
    /// Per-task forgetting: `acc[t][t] - acc[T-1][t]`.
    pub per_task_drop: Vec<f64>,
}

/// Computes summary metrics; the matrix must hold every row.
pub fn summarize(matrix: &AccuracyMatrix) -> Result<Summary> {
    let t = matrix.num_tasks();
    if t == 0 {
        return Err(Error::IncompleteMatrix { row: 0, got: 0, expected: 1 });
    }
    for (r, row) in matrix.rows().iter().enumerate() {
        if row.len() != r + 1 {
            return Err(Error::IncompleteMatrix { row: r, got: row.len(), expected: r + 1 });
        }
    }
    let last_row = &matrix.rows()[t - 1];
    let avg_after_all = last_row.iter().sum::<f64>() / t as f64;
    let last_task = last_row[t - 1];
    let per_task_drop = (0..t)
        .map(|task| matrix.get(task, task).unwrap() - matrix.get(t - 1, task).unwrap())
        .collect();
    Ok(Summary { avg_after_all, last_task, per_task_drop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Nesting;
    use crate::target_net::HeadLayout;
    use ndarray::{arr1, Array2};
    use rand::Rng;

    struct VecData {
        x: Array2<f64>,
        y: Vec<usize>,
    }

    impl BatchProvider for VecData {
        fn len(&self) -> usize {
            self.y.len()
        }
        fn fetch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
            let mut x = Array2::zeros((indices.len(), self.x.ncols()));
            let mut y = Vec::with_capacity(indices.len());
            for (row, &i) in indices.iter().enumerate() {
                x.row_mut(row).assign(&self.x.row(i));
                y.push(self.y[i]);
            }
            (x, y)
        }
    }

    fn ctx_fixture() -> (TargetArch, Hypernet, Vec<TaskEmbeddingState>) {
        let arch = TargetArch::new(vec![2, 6, 4], HeadLayout::MultiHead {
            classes_per_task: vec![2, 2],
        });
        let hnet = Hypernet::init(&[3, 8, arch.flat_len()], 5);
        let state = |seed: f64| TaskEmbeddingState {
            pre: arr1(&[0.1 * seed, -0.2, 0.3 * seed]),
            logits: arr1(&[0.0, 0.0, 0.0]),
            gamma: 0.5,
            nesting: Nesting::None,
            trainable_radius: true,
            frozen: true,
        };
        (arch, hnet, vec![state(1.0), state(2.0)])
    }

    #[test]
    fn random_logits_near_chance() {
        let (arch, hnet, states) = ctx_fixture();
        let ctx = EvalContext { arch: &arch, hnet: &hnet, states: &states };
        let n = 2000;
        let mut rng = crate::rng::substream(9, "eval.chance");
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            x[[i, 0]] = rng.random::<f64>();
            x[[i, 1]] = rng.random::<f64>();
            y.push(rng.random_range(0..2usize));
        }
        let data = VecData { x, y };
        // labels are independent of inputs: accuracy is chance (0.5) up to
        // binomial noise
        let acc = eval_til(&ctx, 0, &data).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "acc {acc}");
    }

    #[test]
    fn untrained_task_rejected() {
        let (arch, hnet, states) = ctx_fixture();
        let ctx = EvalContext { arch: &arch, hnet: &hnet, states: &states };
        let data = VecData { x: Array2::zeros((1, 2)), y: vec![0] };
        assert!(matches!(
            eval_til(&ctx, 2, &data),
            Err(Error::UntrainedTask { task: 2, trained: 2 })
        ));
    }

    #[test]
    fn entropy_examples() {
        // uniform over 2 classes: ln 2
        let h = softmax_entropy(&[0.3, 0.3]);
        assert!((h - (2.0f64).ln()).abs() < 1e-12);
        // near one-hot: entropy near 0
        let h = softmax_entropy(&[100.0, 0.0]);
        assert!(h < 1e-6);
    }

    #[test]
    fn entropy_tiebreak_is_lowest_task() {
        // identical states for both tasks: every sample must infer task 0
        let (arch, hnet, mut states) = ctx_fixture();
        states[1] = states[0].clone();
        let ctx = EvalContext { arch: &arch, hnet: &hnet, states: &states };
        let x = ndarray::arr2(&[[0.3, 0.6], [0.9, 0.1]]);
        let t = infer_task_entropy(&ctx, x.view()).unwrap();
        assert_eq!(t, vec![0, 0]);
        // and repeated inference is identical (determinism)
        let t2 = infer_task_entropy(&ctx, x.view()).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn universal_single_task_matches_center_eval() {
        // With one task, the universal embedding is the task interval and
        // its center weight equals the point forward at the embedding center.
        let (arch, hnet, states) = ctx_fixture();
        let one = &states[..1];
        let ctx = EvalContext { arch: &arch, hnet: &hnet, states: one };
        let x = ndarray::arr2(&[[0.2, 0.8], [0.6, 0.1], [0.9, 0.9]]);
        let y = vec![0, 1, 0];
        let data = VecData { x: x.clone(), y: y.clone() };
        let providers: Vec<&dyn BatchProvider> = vec![&data];
        let (accs, theta) = eval_universal(&ctx, &providers).unwrap();
        assert_eq!(accs.len(), 1);

        let center = embedding::materialize(&one[0], one[0].gamma).mid_rad().mid;
        let cflat: Array1<f64> = center.iter().cloned().collect();
        let want_theta = hnet.forward_point(cflat.view()).unwrap();
        assert_eq!(theta, want_theta);
        let direct = eval_point_theta(&arch, theta.view(), &providers).unwrap();
        assert_eq!(accs, direct);
    }

    #[test]
    fn summarize_examples() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![1.0]);
        m.push_row(vec![1.0, 1.0]);
        let s = summarize(&m).unwrap();
        assert_eq!(s.avg_after_all, 1.0);
        assert_eq!(s.per_task_drop, vec![0.0, 0.0]);

        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.99]);
        m.push_row(vec![0.97, 0.8]);
        let s = summarize(&m).unwrap();
        assert!((s.avg_after_all - 0.885).abs() < 1e-12);
        assert_eq!(s.last_task, 0.8);
        assert!((s.per_task_drop[0] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9]);
        m.push_row(vec![0.85, 0.95]);
        m.push_row(vec![0.8, 0.9, 0.99]);
        let csv = m.to_csv();
        let m2 = AccuracyMatrix::from_csv(&csv).unwrap();
        for r in 0..3 {
            for c in 0..=r {
                assert!((m.get(r, c).unwrap() - m2.get(r, c).unwrap()).abs() < 1e-9);
            }
        }
    }
}
