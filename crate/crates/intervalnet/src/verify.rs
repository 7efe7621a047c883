//! Seeded property suites: executable instantiations of the containment,
//! worst-case dominance, intersection, Lipschitz, relaxation, gradient, and
//! non-forgetting guarantees. Each suite runs a fixed number of randomized
//! trials and reports counts and worst-case margins; the CLI `verify`
//! subcommand and the acceptance tests drive these directly.

use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{finite_diff_check, ParamStore, Tape};
use crate::embedding::{self, Nesting, TaskEmbeddingState};
use crate::error::{Error, Result};
use crate::eval::{self, EvalContext};
use crate::hypernet::{snapshot_reg_targets, Hypernet, Mode};
use crate::interval::{sample_point, IntervalTensor};
use crate::rng;
use crate::target_net::{
    cross_entropy, forward_interval_batch_flat, forward_point, forward_relaxed_batch,
    worst_case_logits, HeadLayout, TargetArch,
};
use crate::trainer::{build_loss, BatchProvider, GraphSpec, TrainConfig, Trainer};

/// The named verification suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Containment,
    Worstcase,
    Lemma1,
    Lipschitz,
    Relaxation,
    Gradcheck,
    Nonforgetting,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "containment" => Ok(Suite::Containment),
            "worstcase" => Ok(Suite::Worstcase),
            "lemma1" => Ok(Suite::Lemma1),
            "lipschitz" => Ok(Suite::Lipschitz),
            "relaxation" => Ok(Suite::Relaxation),
            "gradcheck" => Ok(Suite::Gradcheck),
            "nonforgetting" => Ok(Suite::Nonforgetting),
            other => Err(Error::UnknownSuite(other.to_string())),
        }
    }
}

impl Suite {
    pub fn all() -> [Suite; 7] {
        [
            Suite::Containment,
            Suite::Worstcase,
            Suite::Lemma1,
            Suite::Lipschitz,
            Suite::Relaxation,
            Suite::Gradcheck,
            Suite::Nonforgetting,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Containment => "containment",
            Suite::Worstcase => "worstcase",
            Suite::Lemma1 => "lemma1",
            Suite::Lipschitz => "lipschitz",
            Suite::Relaxation => "relaxation",
            Suite::Gradcheck => "gradcheck",
            Suite::Nonforgetting => "nonforgetting",
        }
    }
}

/// Outcome of one suite run.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub trials: usize,
    pub failures: usize,
    /// Suite-specific safety margin; nonnegative when passing.
    pub worst_margin: f64,
    pub detail: String,
    pub pass: bool,
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Containment => containment_suite(seed),
        Suite::Worstcase => worstcase_suite(seed),
        Suite::Lemma1 => lemma1_suite(seed),
        Suite::Lipschitz => lipschitz_suite(seed),
        Suite::Relaxation => relaxation_suite(seed),
        Suite::Gradcheck => gradcheck_suite(seed),
        Suite::Nonforgetting => nonforgetting_suite(seed),
    }
}

// ---------------------------------------------------------------------------
// shared random constructions
// ---------------------------------------------------------------------------

fn random_arch(rng: &mut ChaCha12Rng) -> TargetArch {
    let input = rng.random_range(2..=6);
    let hidden_layers = rng.random_range(1..=2usize);
    let mut sizes = vec![input];
    for _ in 0..hidden_layers {
        sizes.push(rng.random_range(2..=16));
    }
    sizes.push(rng.random_range(2..=4));
    TargetArch::new(sizes, HeadLayout::Shared)
}

/// Random weight hyperrectangle around a fan-in-scaled center.
fn random_theta_interval(arch: &TargetArch, rng: &mut ChaCha12Rng) -> (Array1<f64>, Array1<f64>) {
    let d = arch.flat_len();
    let mut lo = Array1::zeros(d);
    let mut hi = Array1::zeros(d);
    for i in 0..d {
        let center: f64 = rng.random_range(-1.0..1.0);
        let radius: f64 = rng.random_range(0.0..0.4);
        lo[i] = center - radius;
        hi[i] = center + radius;
    }
    (lo, hi)
}

fn random_input(dim: usize, rng: &mut ChaCha12Rng) -> Array1<f64> {
    (0..dim).map(|_| rng.random::<f64>()).collect()
}

fn theta_interval_tensor(lo: &Array1<f64>, hi: &Array1<f64>) -> IntervalTensor {
    IntervalTensor::new(lo.clone().into_dyn(), hi.clone().into_dyn()).expect("ordered bounds")
}

// ---------------------------------------------------------------------------
// containment: sampled point weights stay inside the interval logits
// ---------------------------------------------------------------------------

fn containment_suite(seed: u64) -> Result<SuiteReport> {
    const CASES: usize = 50;
    const SAMPLES: usize = 10_000;
    let mut rng = rng::substream(seed, "verify.containment");
    let mut escapes = 0usize;
    let mut worst_margin = f64::INFINITY;
    for case in 0..CASES {
        let arch = random_arch(&mut rng);
        let (lo, hi) = random_theta_interval(&arch, &mut rng);
        let x = random_input(arch.input_dim(), &mut rng);
        let x2 = x.view().insert_axis(ndarray::Axis(0));
        let (zl, zu) = forward_interval_batch_flat(&arch, x2, lo.view(), hi.view())?;
        let box_iv = theta_interval_tensor(&lo, &hi);
        for s in 0..SAMPLES {
            let theta = sample_point(&box_iv, seed ^ (case as u64) << 32 ^ s as u64);
            let flat: Array1<f64> = theta.iter().cloned().collect();
            let z = forward_point(&arch, x.view(), flat.view())?;
            for c in 0..z.len() {
                let slack = 4.0 * f64::EPSILON * z[c].abs().max(1.0);
                let lo_gap = z[c] - zl[[0, c]];
                let hi_gap = zu[[0, c]] - z[c];
                worst_margin = worst_margin.min(lo_gap.min(hi_gap));
                if lo_gap < -slack || hi_gap < -slack {
                    escapes += 1;
                }
            }
        }
    }
    Ok(SuiteReport {
        suite: "containment",
        trials: CASES * SAMPLES,
        failures: escapes,
        worst_margin,
        detail: format!("{CASES} cases x {SAMPLES} sampled weight points"),
        pass: escapes == 0,
    })
}

// ---------------------------------------------------------------------------
// worstcase: worst-case CE dominates every sampled-theta CE
// ---------------------------------------------------------------------------

fn worstcase_suite(seed: u64) -> Result<SuiteReport> {
    const TRIALS: usize = 50;
    const SAMPLES: usize = 10_000;
    let mut rng = rng::substream(seed, "verify.worstcase");
    let mut violations = 0usize;
    let mut worst_margin = f64::INFINITY;
    for trial in 0..TRIALS {
        let arch = random_arch(&mut rng);
        let (lo, hi) = random_theta_interval(&arch, &mut rng);
        let x = random_input(arch.input_dim(), &mut rng);
        let label = rng.random_range(0..arch.output_dim());
        let x2 = x.view().insert_axis(ndarray::Axis(0));
        let (zl, zu) = forward_interval_batch_flat(&arch, x2, lo.view(), hi.view())?;
        let mut one_hot = Array1::zeros(arch.output_dim());
        one_hot[label] = 1.0;
        let zhat = worst_case_logits(zl.row(0), zu.row(0), one_hot.view())?;
        let wc_ce = cross_entropy(zhat.view(), label);

        let box_iv = theta_interval_tensor(&lo, &hi);
        let mut max_sampled = f64::NEG_INFINITY;
        for s in 0..SAMPLES {
            let theta = sample_point(&box_iv, seed ^ 0xabcd ^ (trial as u64) << 32 ^ s as u64);
            let flat: Array1<f64> = theta.iter().cloned().collect();
            let z = forward_point(&arch, x.view(), flat.view())?;
            max_sampled = max_sampled.max(cross_entropy(z.view(), label));
        }
        let margin = wc_ce - max_sampled;
        worst_margin = worst_margin.min(margin);
        if margin < -8.0 * f64::EPSILON * wc_ce.abs().max(1.0) {
            violations += 1;
        }
    }
    Ok(SuiteReport {
        suite: "worstcase",
        trials: TRIALS,
        failures: violations,
        worst_margin,
        detail: format!("{TRIALS} trials x {SAMPLES} sampled weight points"),
        pass: violations == 0,
    })
}

// ---------------------------------------------------------------------------
// lemma1: nested embeddings always intersect; adversarial tangency
// ---------------------------------------------------------------------------

fn lemma1_suite(seed: u64) -> Result<SuiteReport> {
    const TRIALS: usize = 1000;
    let mut rng = rng::substream(seed, "verify.lemma1");
    let ms = [2usize, 24, 72];
    let gammas = [0.5, 1.0, 5.0, 15.0];
    let mut failures = 0usize;
    let mut worst_margin = f64::INFINITY;
    let mut detail = String::new();

    for _ in 0..TRIALS {
        let m = ms[rng.random_range(0..ms.len())];
        let t = rng.random_range(2..=20usize);
        let gamma = gammas[rng.random_range(0..gammas.len())];
        let nesting = if rng.random::<bool>() { Nesting::Cos } else { Nesting::Tanh };
        let intervals: Vec<IntervalTensor> = (0..t)
            .map(|_| {
                let pre: Array1<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
                let st = TaskEmbeddingState {
                    pre,
                    logits: Array1::ones(m),
                    gamma,
                    nesting,
                    trainable_radius: false,
                    frozen: true,
                };
                embedding::materialize(&st, gamma)
            })
            .collect();
        match embedding::universal_embedding(&intervals) {
            Ok(u) => {
                let min_w = u.width().iter().cloned().fold(f64::INFINITY, f64::min);
                worst_margin = worst_margin.min(min_w);
            }
            Err(_) => failures += 1,
        }
    }

    // Adversarial tangency: cos = +1 and -1 on one coordinate with gamma = 1
    // collapses the intersection to a single point there.
    for &m in &ms {
        let mk = |a0: f64| {
            let mut pre = Array1::zeros(m);
            pre[0] = a0;
            TaskEmbeddingState {
                pre,
                logits: Array1::ones(m),
                gamma: 1.0,
                nesting: Nesting::Cos,
                trainable_radius: false,
                frozen: true,
            }
        };
        let e1 = embedding::materialize(&mk(0.0), 1.0);
        let e2 = embedding::materialize(&mk(std::f64::consts::PI), 1.0);
        match embedding::universal_embedding(&[e1, e2]) {
            Ok(u) => {
                let w0 = u.width()[0].abs();
                if w0 > 1e-12 {
                    failures += 1;
                    detail.push_str(&format!("tangency width {w0} at M={m}; "));
                }
            }
            Err(_) => {
                failures += 1;
                detail.push_str(&format!("tangency empty at M={m}; "));
            }
        }
    }

    Ok(SuiteReport {
        suite: "lemma1",
        trials: TRIALS + ms.len(),
        failures,
        worst_margin,
        detail: if detail.is_empty() {
            format!("{TRIALS} random sets (M in {{2,24,72}}, T<=20, cos/tanh) + tangency")
        } else {
            detail
        },
        pass: failures == 0,
    })
}

// ---------------------------------------------------------------------------
// lipschitz: point-pair image diameter bounded by the spectral-norm product
// ---------------------------------------------------------------------------

fn lipschitz_suite(seed: u64) -> Result<SuiteReport> {
    const TRIALS: usize = 100;
    const PAIRS: usize = 256;
    let mut rng = rng::substream(seed, "verify.lipschitz");
    let mut failures = 0usize;
    let mut worst_margin = f64::INFINITY;
    let mut max_box_ratio = 0.0f64;
    for trial in 0..TRIALS {
        let m = rng.random_range(2..=8usize);
        let hidden_layers = rng.random_range(1..=2usize);
        let mut sizes = vec![m];
        for _ in 0..hidden_layers {
            sizes.push(rng.random_range(2..=16));
        }
        sizes.push(rng.random_range(2..=20));
        let hnet = Hypernet::init(&sizes, seed ^ (trial as u64));

        let lo: Array1<f64> = (0..m).map(|_| rng.random_range(-0.5..0.3)).collect();
        let width: Array1<f64> = (0..m).map(|_| rng.random_range(0.0..0.6)).collect();
        let hi = &lo + &width;
        let e = IntervalTensor::new(lo.clone().into_dyn(), hi.clone().into_dyn())?;

        let diam_in = width.iter().map(|w| w * w).sum::<f64>().sqrt();
        let bound = hnet.lipschitz_bound() * diam_in;

        let mut max_pair = 0.0f64;
        for p in 0..PAIRS {
            let a = sample_point(&e, seed ^ 0x51ab ^ ((trial * PAIRS + p) as u64));
            let b = sample_point(&e, seed ^ 0xf00d ^ ((trial * PAIRS + p) as u64));
            let fa: Array1<f64> = a.iter().cloned().collect();
            let fb: Array1<f64> = b.iter().cloned().collect();
            let ha = hnet.forward_point(fa.view())?;
            let hb = hnet.forward_point(fb.view())?;
            let dist = ha
                .iter()
                .zip(hb.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            max_pair = max_pair.max(dist);
        }
        let margin = bound - max_pair;
        worst_margin = worst_margin.min(margin);
        if margin < -1e-9 * bound.max(1.0) {
            failures += 1;
        }

        // Diagnostic: the emitted box diameter can exceed the point-pair
        // bound (the |W| propagation is an overapproximation); report the
        // observed ratio rather than failing on it.
        let (bl, bu) = hnet.forward_interval(&e)?;
        let box_diam = bl
            .iter()
            .zip(bu.iter())
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt();
        if bound > 0.0 {
            max_box_ratio = max_box_ratio.max(box_diam / bound);
        }
    }
    Ok(SuiteReport {
        suite: "lipschitz",
        trials: TRIALS,
        failures,
        worst_margin,
        detail: format!(
            "{TRIALS} trials x {PAIRS} point pairs; max emitted-box/bound ratio {max_box_ratio:.3}"
        ),
        pass: failures == 0,
    })
}

// ---------------------------------------------------------------------------
// relaxation: inclusion always; equality under all-nonnegative boxes
// ---------------------------------------------------------------------------

fn relaxation_suite(seed: u64) -> Result<SuiteReport> {
    const TRIALS: usize = 1000;
    let mut rng = rng::substream(seed, "verify.relaxation");
    let mut failures = 0usize;
    let mut worst_margin = f64::INFINITY;
    for trial in 0..TRIALS {
        let arch = random_arch(&mut rng);
        let x = random_input(arch.input_dim(), &mut rng);
        let x2v = x.view().insert_axis(ndarray::Axis(0));

        // Inclusion with signed boxes.
        let (lo, hi) = random_theta_interval(&arch, &mut rng);
        let (il, iu) = forward_interval_batch_flat(&arch, x2v, lo.view(), hi.view())?;
        let (rl, ru) = forward_relaxed_batch(&arch, x2v, lo.view(), hi.view())?;
        for c in 0..arch.output_dim() {
            let slack = 4.0 * f64::EPSILON * il[[0, c]].abs().max(iu[[0, c]].abs()).max(1.0);
            let lo_gap = rl[[0, c]] - il[[0, c]];
            let hi_gap = iu[[0, c]] - ru[[0, c]];
            worst_margin = worst_margin.min(lo_gap.min(hi_gap));
            if lo_gap < -slack || hi_gap < -slack {
                failures += 1;
            }
        }

        // Equality with all-nonnegative boxes (8 ulp budget).
        let d = arch.flat_len();
        let mut nlo = Array1::zeros(d);
        let mut nhi = Array1::zeros(d);
        for i in 0..d {
            let a: f64 = rng.random_range(0.0..0.8);
            let w: f64 = rng.random_range(0.0..0.3);
            nlo[i] = a;
            nhi[i] = a + w;
        }
        let (il, iu) = forward_interval_batch_flat(&arch, x2v, nlo.view(), nhi.view())?;
        let (rl, ru) = forward_relaxed_batch(&arch, x2v, nlo.view(), nhi.view())?;
        for c in 0..arch.output_dim() {
            let tol_l = 8.0 * f64::EPSILON * il[[0, c]].abs().max(1.0);
            let tol_u = 8.0 * f64::EPSILON * iu[[0, c]].abs().max(1.0);
            if (rl[[0, c]] - il[[0, c]]).abs() > tol_l || (ru[[0, c]] - iu[[0, c]]).abs() > tol_u {
                failures += 1;
            }
        }
        let _ = trial;
    }
    Ok(SuiteReport {
        suite: "relaxation",
        trials: TRIALS,
        failures,
        worst_margin,
        detail: format!("{TRIALS} trials: inclusion (signed) + equality (nonnegative, 8 ulp)"),
        pass: failures == 0,
    })
}

// ---------------------------------------------------------------------------
// gradcheck: analytic gradients match central differences on the full loss
// ---------------------------------------------------------------------------

fn gradcheck_suite(seed: u64) -> Result<SuiteReport> {
    const POINTS: usize = 100;
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const KINK_GUARD: f64 = 1e-3;

    let mut rng = rng::substream(seed, "verify.gradcheck");
    let mut max_rel = 0.0f64;
    let mut failures = 0usize;
    let mut excluded_total = 0usize;
    let mut checked_total = 0usize;

    for point in 0..POINTS {
        // Rotate through the loss variants.
        let relaxed = point % 2 == 1;
        let (mode, nesting) = match point % 3 {
            0 => (Mode::Til, Nesting::None),
            1 => (Mode::Dil, Nesting::Cos),
            _ => (Mode::Cil, Nesting::Tanh),
        };
        let with_reg = point % 4 != 0;

        let arch = TargetArch::new(vec![3, 4, 2], HeadLayout::Shared);
        let m = 4usize;
        let cfg = TrainConfig {
            batch_size: 3,
            iterations: 1,
            relaxed,
            nesting,
            ..TrainConfig::defaults(mode, m, 1.0, seed ^ point as u64)
        };
        let mut trainer = Trainer::new(cfg, arch.clone(), &[5]);

        // Randomize all weights away from the init distribution.
        for id in trainer.store.ids().collect::<Vec<_>>() {
            let v = trainer.store.value_mut(id);
            for x in v.iter_mut() {
                *x = rng.random_range(-0.8..0.8);
            }
        }
        let pre: Array1<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pre_id = trainer.store.register("embed.pre", pre.into_dyn());
        let trainable_radius = mode != Mode::Dil;
        let logits_id = if trainable_radius {
            let lg: Array1<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
            Some(trainer.store.register("embed.logits", lg.into_dyn()))
        } else {
            None
        };
        let fixed_logits = Array1::ones(m);

        // Snapshot against perturbed weights so the regularizer is active.
        let reg = if with_reg {
            let frozen: Vec<IntervalTensor> = (0..2)
                .map(|_| {
                    let p: Array1<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let st = TaskEmbeddingState {
                        pre: p,
                        logits: Array1::ones(m),
                        gamma: 1.0,
                        nesting,
                        trainable_radius: false,
                        frozen: true,
                    };
                    embedding::materialize(&st, 1.0)
                })
                .collect();
            let hnet = trainer.hypernet();
            let mut snap = snapshot_reg_targets(&frozen, &hnet, mode)?;
            for t in snap.targets.iter_mut() {
                *t += rng.random_range(-0.2..0.2);
            }
            Some(snap)
        } else {
            None
        };

        let x = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>());
        let y: Vec<usize> = (0..3).map(|_| rng.random_range(0..2)).collect();
        let hnet_layers: Vec<_> = (0..trainer.hnet_layer_sizes.len() - 1)
            .map(|l| {
                (
                    trainer.store.id(&format!("hnet.w{l}")).unwrap(),
                    trainer.store.id(&format!("hnet.b{l}")).unwrap(),
                )
            })
            .collect();

        let graph = |tape: &mut Tape, store: &ParamStore| {
            let spec = GraphSpec {
                arch: &arch,
                hnet_layers: &hnet_layers,
                embed_pre: pre_id,
                embed_logits: logits_id,
                fixed_logits: &fixed_logits,
                gamma: 1.0,
                nesting,
                eff_gamma: 0.7,
                head: 0..2,
                kappa: 0.4,
                relaxed,
            };
            let refs = build_loss(tape, store, &spec, &x, &y, reg.as_ref().map(|r| (r, 0.05)));
            refs.total
        };

        let report = finite_diff_check(&mut trainer.store, graph, STEP, TOL, KINK_GUARD)?;
        excluded_total += report.excluded;
        checked_total += report.params.iter().map(|p| p.checked).sum::<usize>();
        max_rel = max_rel.max(report.max_rel_err);
        if !report.pass {
            failures += 1;
        }
    }

    Ok(SuiteReport {
        suite: "gradcheck",
        trials: POINTS,
        failures,
        worst_margin: TOL - max_rel,
        detail: format!(
            "{checked_total} coordinates checked, {excluded_total} kink-excluded, max rel err {max_rel:.3e}"
        ),
        pass: failures == 0,
    })
}

// ---------------------------------------------------------------------------
// nonforgetting: sampled universal embeddings all solve every task
// ---------------------------------------------------------------------------

/// Desk-scale instantiation of the non-forgetting guarantee: train three
/// tasks that admit a shared solution, then verify that 100 embeddings
/// sampled from the universal intersection all reach per-task accuracy
/// within 2 points of the intersection center and above the floor.
fn nonforgetting_suite(seed: u64) -> Result<SuiteReport> {
    const SAMPLES: usize = 100;
    const FLOOR: f64 = 0.93;
    const BAND: f64 = 0.02;

    let bench = crate::data::synthetic::synthetic_shared_solution_tasks(3, 4, 8.0, 300, seed);
    let arch = TargetArch::new(vec![4, 16, 16, 2], HeadLayout::Shared);
    let mut cfg = TrainConfig::defaults(Mode::Dil, 8, 1.0, seed);
    cfg.batch_size = 32;
    cfg.iterations = 600;
    cfg.lr = 3e-3;
    let mut trainer = Trainer::new(cfg, arch.clone(), &[16]);
    for task in &bench.tasks {
        trainer.train_task(&task.train, |_| {})?;
    }

    let hnet = trainer.hypernet();
    let ctx = EvalContext { arch: &arch, hnet: &hnet, states: &trainer.states };
    let providers: Vec<&dyn BatchProvider> =
        bench.tasks.iter().map(|t| &t.test as &dyn BatchProvider).collect();

    let intervals = trainer.materialized_states();
    let universal = embedding::universal_embedding(&intervals)?;
    let (center_accs, _) = eval::eval_universal(&ctx, &providers)?;

    let mut failures = 0usize;
    let mut worst_margin = f64::INFINITY;
    for s in 0..SAMPLES {
        let mu = sample_point(&universal, seed ^ 0xbeef ^ s as u64);
        let flat: Array1<f64> = mu.iter().cloned().collect();
        let theta = hnet.forward_point(flat.view())?;
        let accs = eval::eval_point_theta(&arch, theta.view(), &providers)?;
        for (t, (&a, &c)) in accs.iter().zip(center_accs.iter()).enumerate() {
            let band_margin = BAND - (a - c).abs();
            let floor_margin = a - FLOOR;
            worst_margin = worst_margin.min(band_margin.min(floor_margin));
            if band_margin < 0.0 || floor_margin < 0.0 {
                failures += 1;
                let _ = t;
            }
        }
    }

    Ok(SuiteReport {
        suite: "nonforgetting",
        trials: SAMPLES,
        failures,
        worst_margin,
        detail: format!(
            "center accuracies {:?}; {SAMPLES} sampled universal embeddings, floor {FLOOR}, band {BAND}",
            center_accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
        pass: failures == 0,
    })
}
