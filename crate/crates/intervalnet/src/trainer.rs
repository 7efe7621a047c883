//! The continual training loop: per-iteration loss assembly (interval or
//! relaxed target path), radius and center/worst-case weighting schedules,
//! output regularization against frozen snapshots, and Adam updates.
//!
//! Per task, each iteration materializes the current task's interval
//! embedding at the scheduled radius, propagates it through the hypernetwork
//! into a weight hyperrectangle, runs the target network on a batch, and
//! minimizes
//!
//!   kappa * CE(center logits) + (1 - kappa) * CE(worst-case logits)
//!   + beta * L_output
//!
//! where `L_output` is the mean squared distance between the frozen
//! hypernetwork outputs at prior-task probe embeddings and the current ones.
//! On the first task the regularizer is skipped entirely.

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;

use crate::autodiff::{self, backward, ParamId, ParamStore, Tape};
use crate::embedding::{self, epsilon_schedule, Nesting, TaskEmbeddingState};
use crate::error::{Error, Result};
use crate::hypernet::{snapshot_reg_targets, Hypernet, Mode, RegTargetSet};
use crate::interval::IntervalTensor;
use crate::kernels;
use crate::rng;
use crate::target_net::TargetArch;

/// Training hyperparameters for one experiment.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Regularization strength for the hypernetwork output term.
    pub beta: f64,
    /// Floor of the center/worst-case weighting schedule.
    pub kappa_floor: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Iterations per task.
    pub iterations: usize,
    /// Perturbation value (full radius scale).
    pub gamma: f64,
    /// Embedding dimension M.
    pub m: usize,
    pub nesting: Nesting,
    pub seed: u64,
    /// Use the relaxed (two point forwards) target path instead of the
    /// fully interval one.
    pub relaxed: bool,
}

impl TrainConfig {
    pub fn defaults(mode: Mode, m: usize, gamma: f64, seed: u64) -> Self {
        Self {
            mode,
            beta: 0.01,
            kappa_floor: 0.5,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            iterations: 2000,
            gamma,
            m,
            nesting: match mode {
                Mode::Dil => Nesting::Cos,
                Mode::Til | Mode::Cil => Nesting::None,
            },
            seed,
            relaxed: false,
        }
    }
}

/// Center/worst-case weighting: max(1 - 0.00005 i, floor), i zero-based.
pub fn kappa_schedule(i: usize, kappa_floor: f64) -> f64 {
    (1.0 - 5e-5 * i as f64).max(kappa_floor)
}

/// Adam moment accumulators, one pair per trained parameter.
#[derive(Debug, Clone)]
pub struct OptimState {
    ids: Vec<ParamId>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore, ids: &[ParamId]) -> Self {
        Self {
            ids: ids.to_vec(),
            m: ids.iter().map(|&id| ArrayD::zeros(store.value(id).raw_dim())).collect(),
            v: ids.iter().map(|&id| ArrayD::zeros(store.value(id).raw_dim())).collect(),
            step: 0,
        }
    }
}

/// One Adam step with bias correction over the optimizer's parameter set.
/// Gradients are consumed (zeroed). Aborts on a non-finite gradient,
/// naming the parameter.
pub fn adam_step(
    store: &mut ParamStore,
    optim: &mut OptimState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    for (k, &id) in optim.ids.iter().enumerate() {
        if let Some(bad) = store.grad(id).iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: format!("gradient of {}", store.name(id)),
                value: *bad,
            });
        }
        let _ = k;
    }
    optim.step += 1;
    let bias1 = 1.0 - beta1.powi(optim.step as i32);
    let bias2 = 1.0 - beta2.powi(optim.step as i32);
    for (k, &id) in optim.ids.iter().enumerate() {
        let (p, g) = store.param_and_grad_mut(id);
        kernels::adam_update(
            p.as_slice_mut().unwrap(),
            g.as_slice_mut().unwrap(),
            optim.m[k].as_slice_mut().unwrap(),
            optim.v[k].as_slice_mut().unwrap(),
            lr,
            beta1,
            beta2,
            eps,
            bias1,
            bias2,
        );
    }
    Ok(())
}

/// Batch access used by the trainer; implementations materialize rows on
/// demand (pixel-permuted and u8-backed datasets stay compact in memory).
pub trait BatchProvider {
    fn len(&self) -> usize;
    /// Materializes the given rows as (inputs in [0,1], within-task labels).
    fn fetch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>);
}

/// Inputs to one loss-graph construction.
pub struct GraphSpec<'a> {
    pub arch: &'a TargetArch,
    /// (weight, bias) parameter ids per hypernetwork layer.
    pub hnet_layers: &'a [(ParamId, ParamId)],
    pub embed_pre: ParamId,
    /// Trainable perturbation logits, or a fixed vector when absent.
    pub embed_logits: Option<ParamId>,
    pub fixed_logits: &'a Array1<f64>,
    pub gamma: f64,
    pub nesting: Nesting,
    /// Scheduled radius scale for this iteration.
    pub eff_gamma: f64,
    /// Output columns of the active head.
    pub head: std::ops::Range<usize>,
    pub kappa: f64,
    pub relaxed: bool,
}

/// Node references for the assembled loss and its logged components.
pub struct BuiltLoss {
    pub total: NodeRefs,
}

/// All interesting nodes of one loss graph.
pub struct NodeRefs {
    pub total: autodiff::NodeRef,
    pub current: autodiff::NodeRef,
    pub center_ce: autodiff::NodeRef,
    pub worst_ce: autodiff::NodeRef,
    /// Normalized L_output (present from the second task on).
    pub output_reg: Option<autodiff::NodeRef>,
    /// Center logits over the active head, for accuracy logging.
    pub center_logits: autodiff::NodeRef,
    pub theta_lower: autodiff::NodeRef,
    pub theta_upper: autodiff::NodeRef,
}

/// Builds the embedding -> hypernetwork -> target -> loss graph for one
/// batch. Returns every node needed for logging and backprop.
pub fn build_loss(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &GraphSpec<'_>,
    x: &Array2<f64>,
    y: &[usize],
    reg: Option<(&RegTargetSet, f64)>,
) -> NodeRefs {
    let m = store.value(spec.embed_pre).len() as f64;

    // Embedding center (full gamma) and scheduled radius.
    let pre = tape.param(store, spec.embed_pre);
    let center = match spec.nesting {
        Nesting::Cos => {
            let c = tape.cos(store, pre);
            tape.scale(store, c, spec.gamma / m)
        }
        Nesting::Tanh => {
            let t = tape.tanh(store, pre);
            tape.scale(store, t, spec.gamma / m)
        }
        Nesting::None => pre,
    };
    let logits = match spec.embed_logits {
        Some(id) => tape.param(store, id),
        None => tape.constant(spec.fixed_logits.clone().into_dyn()),
    };
    let sm = tape.softmax(store, logits);
    let radius = tape.scale(store, sm, spec.eff_gamma);

    // Hypernetwork in mid/radius form; identity on the output layer.
    let (mut mu, mut r) = (center, radius);
    let last = spec.hnet_layers.len() - 1;
    for (l, (w_id, b_id)) in spec.hnet_layers.iter().enumerate() {
        let w = tape.param(store, *w_id);
        let b = tape.param(store, *b_id);
        let (mu2, r2) = tape.affine_midrad(store, w, b, mu, r);
        if l != last {
            let (mu3, r3) = tape.relu_midrad(store, mu2, r2);
            mu = mu3;
            r = r3;
        } else {
            mu = mu2;
            r = r2;
        }
    }
    let (theta_mid, theta_rad) = (mu, r);
    let (theta_lower, theta_upper) = tape.bounds_from_midrad(store, theta_mid, theta_rad);

    // Target network on the batch.
    let x_node = tape.constant(x.clone().into_dyn());
    let (mut zl, mut zu) = (x_node, x_node);
    let n_layers = spec.arch.num_layers();
    if spec.relaxed {
        // Two point forwards at the box endpoints, then min/max.
        let mut lo_act = x_node;
        let mut hi_act = x_node;
        for (l, s) in spec.arch.layers().enumerate() {
            let wl = tape.slice_reshape(store, theta_lower, s.w_offset, &[s.out_dim, s.in_dim]);
            let bl = tape.slice_reshape(store, theta_lower, s.b_offset, &[s.out_dim]);
            let wu = tape.slice_reshape(store, theta_upper, s.w_offset, &[s.out_dim, s.in_dim]);
            let bu = tape.slice_reshape(store, theta_upper, s.b_offset, &[s.out_dim]);
            lo_act = tape.point_affine(store, wl, bl, lo_act);
            hi_act = tape.point_affine(store, wu, bu, hi_act);
            if l != n_layers - 1 {
                lo_act = tape.relu(store, lo_act);
                hi_act = tape.relu(store, hi_act);
            }
        }
        zl = tape.min_elem(store, lo_act, hi_act);
        zu = tape.max_elem(store, lo_act, hi_act);
    } else {
        for (l, s) in spec.arch.layers().enumerate() {
            let wl = tape.slice_reshape(store, theta_lower, s.w_offset, &[s.out_dim, s.in_dim]);
            let wu = tape.slice_reshape(store, theta_upper, s.w_offset, &[s.out_dim, s.in_dim]);
            let bl = tape.slice_reshape(store, theta_lower, s.b_offset, &[s.out_dim]);
            let bu = tape.slice_reshape(store, theta_upper, s.b_offset, &[s.out_dim]);
            let (l2, u2) = tape.interval_affine(store, wl, wu, bl, bu, zl, zu);
            if l != n_layers - 1 {
                zl = tape.relu(store, l2);
                zu = tape.relu(store, u2);
            } else {
                zl = l2;
                zu = u2;
            }
        }
    }

    // Head slice and the two loss terms. The center term runs the target as
    // a conventional network with the central weights (the box midpoint);
    // training the midpoint of the propagated bounds instead admits a
    // degenerate optimum where the bounds straddle the answer while no
    // actual weight vector in the box classifies. Under the relaxed path
    // only the two endpoint forwards exist, so the center is their restored
    // midpoint.
    let (hs, hl) = (spec.head.start, spec.head.len());
    let zl_head = tape.slice_cols(store, zl, hs, hl);
    let zu_head = tape.slice_cols(store, zu, hs, hl);
    let center_logits = if spec.relaxed {
        tape.add_scaled(store, zl_head, zu_head, 0.5, 0.5)
    } else {
        let mut act = x_node;
        for (l, s) in spec.arch.layers().enumerate() {
            let wc = tape.slice_reshape(store, theta_mid, s.w_offset, &[s.out_dim, s.in_dim]);
            let bc = tape.slice_reshape(store, theta_mid, s.b_offset, &[s.out_dim]);
            act = tape.point_affine(store, wc, bc, act);
            if l != n_layers - 1 {
                act = tape.relu(store, act);
            }
        }
        tape.slice_cols(store, act, hs, hl)
    };
    let center_ce = tape.cross_entropy_mean(store, center_logits, y);
    let worst = tape.select_by_label(store, zl_head, zu_head, y);
    let worst_ce = tape.cross_entropy_mean(store, worst, y);
    let current = tape.add_scaled(store, center_ce, worst_ce, spec.kappa, 1.0 - spec.kappa);

    // Output regularizer against frozen snapshots.
    let (total, output_reg) = match reg {
        Some((snap, beta)) if snap.probes.nrows() > 0 => {
            let probes = tape.constant(snap.probes.clone().into_dyn());
            let mut act = probes;
            for (l, (w_id, b_id)) in spec.hnet_layers.iter().enumerate() {
                let w = tape.param(store, *w_id);
                let b = tape.param(store, *b_id);
                act = tape.point_affine(store, w, b, act);
                if l != last {
                    act = tape.relu(store, act);
                }
            }
            let sq = tape.sq_l2_diff(store, act, snap.targets.clone().into_dyn());
            let norm = 1.0 / snap.probes.nrows() as f64;
            let reg_node = tape.scale(store, sq, norm);
            let total = tape.add_scaled(store, current, reg_node, 1.0, beta);
            (total, Some(reg_node))
        }
        _ => (current, None),
    };

    NodeRefs {
        total,
        current,
        center_ce,
        worst_ce,
        output_reg,
        center_logits,
        theta_lower,
        theta_upper,
    }
}

/// Per-iteration log record (one CSV row).
#[derive(Debug, Clone)]
pub struct IterLog {
    pub iteration: usize,
    pub l_current: f64,
    pub l_output: f64,
    pub kappa: f64,
    pub eff_radius_scale: f64,
    pub batch_accuracy: f64,
}

/// End-of-task summary.
#[derive(Debug, Clone)]
pub struct TaskSummary {
    pub task: usize,
    pub iterations: usize,
    pub skipped: usize,
    pub final_lr: f64,
    pub final_l_current: f64,
}

/// Continual trainer: owns the parameter store, frozen task states, and
/// regularization snapshots.
pub struct Trainer {
    pub config: TrainConfig,
    pub target_arch: TargetArch,
    pub hnet_layer_sizes: Vec<usize>,
    pub store: ParamStore,
    hnet_param_ids: Vec<(ParamId, ParamId)>,
    pub states: Vec<TaskEmbeddingState>,
    pub reg: Option<RegTargetSet>,
}

impl Trainer {
    /// Initializes the hypernetwork `[M, hidden.., D]` and registers its
    /// parameters.
    pub fn new(config: TrainConfig, target_arch: TargetArch, hnet_hidden: &[usize]) -> Self {
        let d = target_arch.flat_len();
        let mut sizes = vec![config.m];
        sizes.extend_from_slice(hnet_hidden);
        sizes.push(d);
        let hnet = Hypernet::init(&sizes, config.seed);
        let mut store = ParamStore::new();
        let hnet_param_ids = hnet.register_params(&mut store);
        Self {
            config,
            target_arch,
            hnet_layer_sizes: sizes,
            store,
            hnet_param_ids,
            states: Vec::new(),
            reg: None,
        }
    }

    pub fn trained_tasks(&self) -> usize {
        self.states.len()
    }

    /// Current hypernetwork weights (cloned out of the store).
    pub fn hypernet(&self) -> Hypernet {
        Hypernet::from_store(&self.store, &self.hnet_layer_sizes).expect("registered params")
    }

    /// Frozen task embeddings materialized at full gamma.
    pub fn materialized_states(&self) -> Vec<IntervalTensor> {
        self.states
            .iter()
            .map(|s| embedding::materialize(s, s.gamma))
            .collect()
    }

    /// Trains the next task (index `trained_tasks()`), calling `on_iter`
    /// once per iteration with the log record.
    pub fn train_task(
        &mut self,
        data: &dyn BatchProvider,
        mut on_iter: impl FnMut(&IterLog),
    ) -> Result<TaskSummary> {
        let task = self.states.len();
        let cfg = self.config.clone();

        // Snapshot regularization targets from the just-frozen weights.
        if task > 0 {
            let frozen = self.materialized_states();
            let hnet = self.hypernet();
            self.reg = Some(snapshot_reg_targets(&frozen, &hnet, cfg.mode)?);
        }

        // New task embedding state and its store registration.
        let state = embedding::init_next_task(
            self.states.last(),
            cfg.mode,
            cfg.m,
            cfg.gamma,
            cfg.nesting,
            cfg.seed,
            task,
        );
        let pre_id = self.store.register("embed.pre", state.pre.clone().into_dyn());
        let logits_id = if state.trainable_radius {
            Some(self.store.register("embed.logits", state.logits.clone().into_dyn()))
        } else {
            None
        };

        let mut trained: Vec<ParamId> = self
            .hnet_param_ids
            .iter()
            .flat_map(|(w, b)| [*w, *b])
            .collect();
        trained.push(pre_id);
        if let Some(id) = logits_id {
            trained.push(id);
        }
        // Fresh optimizer per task (the trainable set changes with the task).
        let mut optim = OptimState::new(&self.store, &trained);

        let mut data_rng = rng::substream(cfg.seed, &format!("data.task{task}"));
        let head = self.target_arch.head_range(task);
        let mut lr = cfg.lr;
        let mut consecutive_bad = 0usize;
        let mut skipped = 0usize;
        let mut last_current = f64::NAN;

        let n = cfg.iterations;
        for i in 1..=n {
            let kappa = kappa_schedule(i - 1, cfg.kappa_floor);
            let eff = epsilon_schedule(i, n, cfg.gamma);
            let idx: Vec<usize> =
                (0..cfg.batch_size).map(|_| data_rng.random_range(0..data.len())).collect();
            let (bx, by) = data.fetch(&idx);

            let spec = GraphSpec {
                arch: &self.target_arch,
                hnet_layers: &self.hnet_param_ids,
                embed_pre: pre_id,
                embed_logits: logits_id,
                fixed_logits: &state.logits,
                gamma: cfg.gamma,
                nesting: cfg.nesting,
                eff_gamma: eff,
                head: head.clone(),
                kappa,
                relaxed: cfg.relaxed,
            };
            let mut tape = Tape::new();
            let refs = build_loss(
                &mut tape,
                &self.store,
                &spec,
                &bx,
                &by,
                self.reg.as_ref().map(|r| (r, cfg.beta)),
            );
            let total = tape.scalar(&self.store, refs.total);
            if !total.is_finite() {
                let diag = self.diagnose_nonfinite(&tape, &refs);
                skipped += 1;
                consecutive_bad += 1;
                if consecutive_bad > 0 && consecutive_bad % 3 == 0 {
                    lr /= 2.0;
                }
                if consecutive_bad > 10 {
                    return Err(Error::NonFiniteStreak {
                        task,
                        iteration: i,
                        limit: 10,
                        diagnostic: diag,
                    });
                }
                continue;
            }
            consecutive_bad = 0;

            let l_current = tape.scalar(&self.store, refs.current);
            let l_output = refs
                .output_reg
                .map(|r| tape.scalar(&self.store, r))
                .unwrap_or(0.0);
            let acc = batch_accuracy(tape.value(&self.store, refs.center_logits), &by);
            last_current = l_current;
            on_iter(&IterLog {
                iteration: i,
                l_current,
                l_output,
                kappa,
                eff_radius_scale: eff,
                batch_accuracy: acc,
            });

            backward(&mut tape, &mut self.store, refs.total)?;
            adam_step(
                &mut self.store,
                &mut optim,
                lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )?;
        }

        // Freeze the trained embedding.
        let mut frozen = state;
        frozen.pre = self
            .store
            .value(pre_id)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-D embedding");
        if let Some(id) = logits_id {
            frozen.logits = self
                .store
                .value(id)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("1-D logits");
        }
        frozen.frozen = true;
        self.states.push(frozen);

        Ok(TaskSummary {
            task,
            iterations: n,
            skipped,
            final_lr: lr,
            final_l_current: last_current,
        })
    }

    fn diagnose_nonfinite(&self, tape: &Tape, refs: &NodeRefs) -> String {
        let mut parts = Vec::new();
        let check = |name: &str, r: autodiff::NodeRef, parts: &mut Vec<String>| {
            let v = tape.scalar(&self.store, r);
            if !v.is_finite() {
                parts.push(format!("{name}={v}"));
            }
        };
        check("center_ce", refs.center_ce, &mut parts);
        check("worst_ce", refs.worst_ce, &mut parts);
        if let Some(r) = refs.output_reg {
            check("l_output", r, &mut parts);
        }
        if parts.is_empty() {
            "total loss non-finite".to_string()
        } else {
            parts.join(", ")
        }
    }
}

/// Fraction of rows whose argmax matches the label.
pub fn batch_accuracy(logits: &ArrayD<f64>, labels: &[usize]) -> f64 {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let xs = logits.as_slice().unwrap();
    let mut correct = 0usize;
    for (row, &y) in labels.iter().enumerate() {
        let z = &xs[row * c..(row + 1) * c];
        let mut best = 0usize;
        for i in 1..c {
            if z[i] > z[best] {
                best = i;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / b as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target_net::HeadLayout;
    use ndarray::arr1;

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa_schedule(0, 0.5), 1.0);
        assert_eq!(kappa_schedule(10_000, 0.5), 0.5);
        assert_eq!(kappa_schedule(20_000, 0.5), 0.5);
    }

    #[test]
    fn adam_zero_grad_advances_step_only() {
        let mut store = ParamStore::new();
        let id = store.register("p", arr1(&[1.0, -2.0]).into_dyn());
        let mut optim = OptimState::new(&store, &[id]);
        adam_step(&mut store, &mut optim, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(optim.step, 1);
        assert_eq!(store.value(id).as_slice().unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_sign() {
        // With a constant gradient g, bias-corrected Adam steps approach
        // lr * sign(g) in magnitude.
        let mut store = ParamStore::new();
        let id = store.register("p", arr1(&[0.0]).into_dyn());
        let mut optim = OptimState::new(&store, &[id]);
        let lr = 1e-2;
        let mut prev = 0.0;
        let mut step_size = 0.0;
        for _ in 0..200 {
            store.grad_mut(id).fill(2.5); // constant positive gradient
            adam_step(&mut store, &mut optim, lr, 0.9, 0.999, 1e-8).unwrap();
            let cur = store.value(id)[[0]];
            step_size = prev - cur;
            prev = cur;
        }
        assert!((step_size - lr).abs() < 1e-4, "step {step_size}");
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // f(p) = 0.5 * ||p - c||^2, gradient p - c
        let c = [0.3, -0.7, 0.5];
        let mut store = ParamStore::new();
        let id = store.register("p", arr1(&[0.0, 0.0, 0.0]).into_dyn());
        let mut optim = OptimState::new(&store, &[id]);
        for _ in 0..500 {
            let g: Vec<f64> =
                store.value(id).iter().zip(c.iter()).map(|(p, c)| p - c).collect();
            store
                .grad_mut(id)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&g);
            adam_step(&mut store, &mut optim, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        }
        for (p, c) in store.value(id).iter().zip(c.iter()) {
            assert!((p - c).abs() < 1e-3, "{p} vs {c}");
        }
    }

    #[test]
    fn adam_rejects_nonfinite_gradient() {
        let mut store = ParamStore::new();
        let id = store.register("p", arr1(&[1.0]).into_dyn());
        let mut optim = OptimState::new(&store, &[id]);
        store.grad_mut(id).fill(f64::NAN);
        let err = adam_step(&mut store, &mut optim, 0.1, 0.9, 0.999, 1e-8);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    struct ToyData {
        x: Array2<f64>,
        y: Vec<usize>,
    }

    impl BatchProvider for ToyData {
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

    #[test]
    fn loss_current_kappa_identities() {
        // kappa = 1 reduces to center CE; kappa = 0 to worst-case CE;
        // a degenerate embedding makes both terms equal.
        let arch = TargetArch::new(vec![2, 4, 2], HeadLayout::Shared);
        let config = TrainConfig {
            batch_size: 4,
            iterations: 10,
            ..TrainConfig::defaults(Mode::Til, 3, 1.0, 7)
        };
        let mut trainer = Trainer::new(config, arch, &[5]);
        let pre_id = trainer.store.register("embed.pre", arr1(&[0.2, -0.1, 0.4]).into_dyn());
        let fixed = Array1::ones(3);
        let x = ndarray::arr2(&[[0.1, 0.9], [0.8, 0.2]]);
        let y = vec![0, 1];

        let eval = |trainer: &Trainer, kappa: f64, eff: f64| -> (f64, f64, f64) {
            let spec = GraphSpec {
                arch: &trainer.target_arch,
                hnet_layers: &trainer.hnet_param_ids,
                embed_pre: pre_id,
                embed_logits: None,
                fixed_logits: &fixed,
                gamma: 1.0,
                nesting: Nesting::None,
                eff_gamma: eff,
                head: 0..2,
                kappa,
                relaxed: false,
            };
            let mut tape = Tape::new();
            let refs = build_loss(&mut tape, &trainer.store, &spec, &x, &y, None);
            (
                tape.scalar(&trainer.store, refs.current),
                tape.scalar(&trainer.store, refs.center_ce),
                tape.scalar(&trainer.store, refs.worst_ce),
            )
        };

        let (cur, center, _) = eval(&trainer, 1.0, 0.5);
        assert!((cur - center).abs() < 1e-12);
        let (cur, _, worst) = eval(&trainer, 0.0, 0.5);
        assert!((cur - worst).abs() < 1e-12);
        // degenerate embedding: zero radius -> both terms coincide
        let (_, center, worst) = eval(&trainer, 0.3, 0.0);
        assert!((center - worst).abs() < 1e-10);
    }

    #[test]
    fn regularizer_zero_at_snapshot_and_scaling() {
        use crate::hypernet::snapshot_reg_targets;

        let arch = TargetArch::new(vec![2, 3, 4], HeadLayout::MultiHead {
            classes_per_task: vec![2, 2],
        });
        let config = TrainConfig {
            batch_size: 4,
            ..TrainConfig::defaults(Mode::Dil, 3, 1.0, 11)
        };
        let mut trainer = Trainer::new(config, arch, &[6]);
        let pre_id = trainer.store.register("embed.pre", arr1(&[0.1, -0.2, 0.3]).into_dyn());
        let fixed = Array1::ones(3);

        // Two frozen prior tasks.
        let mk_state = |shift: f64| TaskEmbeddingState {
            pre: arr1(&[0.4 + shift, -0.7, 0.2]),
            logits: Array1::ones(3),
            gamma: 1.0,
            nesting: Nesting::Cos,
            trainable_radius: false,
            frozen: true,
        };
        let frozen = vec![
            embedding::materialize(&mk_state(0.0), 1.0),
            embedding::materialize(&mk_state(0.5), 1.0),
        ];
        let hnet = trainer.hypernet();
        let snap = snapshot_reg_targets(&frozen, &hnet, Mode::Dil).unwrap();
        assert_eq!(snap.probes.nrows(), 6); // 2 tasks x 3 probes

        let x = ndarray::arr2(&[[0.1, 0.9], [0.8, 0.2]]);
        let y = vec![0, 1];
        let beta = 0.01;
        let build = |trainer: &Trainer, reg: Option<(&RegTargetSet, f64)>| {
            let spec = GraphSpec {
                arch: &trainer.target_arch,
                hnet_layers: &trainer.hnet_param_ids,
                embed_pre: pre_id,
                embed_logits: None,
                fixed_logits: &fixed,
                gamma: 1.0,
                nesting: Nesting::Cos,
                eff_gamma: 1.0,
                head: 0..2,
                kappa: 0.5,
                relaxed: false,
            };
            let mut tape = Tape::new();
            let refs = build_loss(&mut tape, &trainer.store, &spec, &x, &y, reg);
            let total = tape.scalar(&trainer.store, refs.total);
            let current = tape.scalar(&trainer.store, refs.current);
            let reg_v = refs.output_reg.map(|r| tape.scalar(&trainer.store, r));
            (total, current, reg_v)
        };

        // Unchanged weights: L_output is exactly 0 and total equals current.
        let (total, current, reg_v) = build(&trainer, Some((&snap, beta)));
        assert_eq!(reg_v.unwrap(), 0.0);
        assert_eq!(total, current);

        // Fabricated targets at unit squared distance per probe: the
        // normalized regularizer is exactly 1, and total = current + beta.
        let mut shifted = snap.clone();
        for mut row in shifted.targets.rows_mut() {
            row[0] += 1.0; // squared distance 1 per probe row
        }
        let (total, current, reg_v) = build(&trainer, Some((&shifted, beta)));
        assert!((reg_v.unwrap() - 1.0).abs() < 1e-12);
        assert!((total - (current + beta)).abs() < 1e-12);

        // beta = 0 keeps total = current even with drifted targets.
        let (total, current, _) = build(&trainer, Some((&shifted, 0.0)));
        assert!((total - current).abs() < 1e-15);
    }

    #[test]
    fn train_single_separable_task() {
        // A linearly separable 2-class toy task must reach high batch
        // accuracy at the interval center.
        let mut cfg = TrainConfig::defaults(Mode::Til, 4, 1.0, 3);
        cfg.batch_size = 16;
        cfg.iterations = 500;
        cfg.lr = 5e-3;
        let arch = TargetArch::new(vec![2, 8, 2], HeadLayout::Shared);
        let mut trainer = Trainer::new(cfg, arch, &[8]);

        // blobs at (0.2, 0.2) and (0.8, 0.8)
        let n = 200;
        let mut xs = Array2::zeros((n, 2));
        let mut ys = Vec::with_capacity(n);
        let mut r = crate::rng::substream(42, "toy.data");
        for i in 0..n {
            let class = i % 2;
            let cx = if class == 0 { 0.2 } else { 0.8 };
            for j in 0..2 {
                xs[[i, j]] = (cx as f64 + 0.08 * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0);
            }
            ys.push(class);
        }
        let data = ToyData { x: xs, y: ys };
        let mut last_acc = 0.0;
        trainer
            .train_task(&data, |log| {
                last_acc = log.batch_accuracy;
            })
            .unwrap();
        assert!(last_acc >= 0.99, "final batch accuracy {last_acc}");
        assert_eq!(trainer.trained_tasks(), 1);
        assert!(trainer.states[0].frozen);
    }
}
