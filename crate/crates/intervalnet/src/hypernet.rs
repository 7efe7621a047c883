//! The hypernetwork: a point-weight ReLU MLP mapping a task embedding (point
//! or interval) to the target network's flat parameter vector (point or
//! hyperrectangle).
//!
//! Interval propagation runs in mid/radius form per layer: `mu' = W mu + b`,
//! `r' = |W| r`, then the activation is applied to `mu' - r'` and `mu' + r'`.
//! The final layer is identity so target weights can take either sign. A
//! degenerate input produces identically zero radii, hence a degenerate
//! output.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::interval::IntervalTensor;
use crate::kernels;
use crate::rng;
use crate::target_net::{TargetArch, TargetParamsInterval};

/// Point-valued hypernetwork weights: `layer_sizes[0] = M` (embedding
/// dimension), hidden ReLU layers, identity output of width `D`.
#[derive(Debug, Clone)]
pub struct Hypernet {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Hypernet {
    /// Fan-in scaled uniform init: weights in [-1/sqrt(fan_in),
    /// +1/sqrt(fan_in)], biases zero. Small initial weight products keep the
    /// emitted intervals short at the start of training.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Self {
        assert!(layer_sizes.len() >= 2, "hypernet needs at least 2 layer sizes");
        let mut rng = rng::substream(seed, "hypernet.init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Array2::from_shape_vec((fan_out, fan_in), w).unwrap());
            biases.push(Array1::zeros(fan_out));
        }
        Self { layer_sizes: layer_sizes.to_vec(), weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Point forward: `H(e; eta)`, a flat target parameter vector.
    pub fn forward_point(&self, e: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let out = self.forward_point_batch(e.insert_axis(ndarray::Axis(0)))?;
        Ok(out.row(0).to_owned())
    }

    /// Point forward over a batch of embeddings (rows).
    pub fn forward_point_batch(&self, e: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if e.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "hypernet input width",
                expected: vec![self.input_dim()],
                got: vec![e.ncols()],
            });
        }
        let batch = e.nrows();
        let e_std = e.as_standard_layout();
        let mut act: Vec<f64> = e_std.as_slice().unwrap().to_vec();
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (out_dim, in_dim) = self.weights[l].dim();
            let mut out = vec![0.0; batch * out_dim];
            kernels::point_affine_fwd(
                self.weights[l].as_slice().unwrap(),
                self.biases[l].as_slice().unwrap(),
                out_dim,
                in_dim,
                &act,
                batch,
                &mut out,
            );
            if l != last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            act = out;
        }
        Ok(Array2::from_shape_vec((batch, self.output_dim()), act).unwrap())
    }

    /// Interval forward: flat lower/upper bounds of the emitted
    /// hyperrectangle, containing `H(mu; eta)` for every `mu` in the input.
    pub fn forward_interval(&self, e: &IntervalTensor) -> Result<(Array1<f64>, Array1<f64>)> {
        if e.len() != self.input_dim() || e.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "hypernet interval input",
                expected: vec![self.input_dim()],
                got: e.shape().to_vec(),
            });
        }
        let mr = e.mid_rad();
        let mut mu: Vec<f64> = mr.mid.iter().cloned().collect();
        let mut r: Vec<f64> = mr.radius.iter().cloned().collect();
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (out_dim, in_dim) = self.weights[l].dim();
            let mut mu_out = vec![0.0; out_dim];
            let mut r_out = vec![0.0; out_dim];
            kernels::midrad_affine_fwd(
                self.weights[l].as_slice().unwrap(),
                self.biases[l].as_slice().unwrap(),
                out_dim,
                in_dim,
                &mu,
                &r,
                &mut mu_out,
                &mut r_out,
            );
            if l != last {
                // relu on both bounds, then back to mid/rad
                for j in 0..out_dim {
                    let lo = (mu_out[j] - r_out[j]).max(0.0);
                    let hi = (mu_out[j] + r_out[j]).max(0.0);
                    mu_out[j] = (lo + hi) / 2.0;
                    r_out[j] = (hi - lo) / 2.0;
                }
            }
            mu = mu_out;
            r = r_out;
        }
        let d = self.output_dim();
        let lower: Array1<f64> = (0..d).map(|i| mu[i] - r[i]).collect();
        let upper: Array1<f64> = (0..d).map(|i| mu[i] + r[i]).collect();
        Ok((lower, upper))
    }

    /// Interval forward packaged as per-layer target hyperrectangles.
    pub fn forward_interval_params(
        &self,
        e: &IntervalTensor,
        arch: &TargetArch,
    ) -> Result<TargetParamsInterval> {
        let (lower, upper) = self.forward_interval(e)?;
        TargetParamsInterval::from_flat(arch.clone(), lower, upper)
    }

    /// Registers all layer weights/biases in a parameter store under the
    /// canonical names `hnet.w{l}` / `hnet.b{l}` and returns their ids.
    pub fn register_params(&self, store: &mut ParamStore) -> Vec<(ParamId, ParamId)> {
        (0..self.num_layers())
            .map(|l| {
                let w = store.register(&format!("hnet.w{l}"), self.weights[l].clone().into_dyn());
                let b = store.register(&format!("hnet.b{l}"), self.biases[l].clone().into_dyn());
                (w, b)
            })
            .collect()
    }

    /// Reads layer weights/biases back from a parameter store.
    pub fn from_store(store: &ParamStore, layer_sizes: &[usize]) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_sizes.len() - 1 {
            let w = store.value(store.id(&format!("hnet.w{l}"))?).clone();
            let b = store.value(store.id(&format!("hnet.b{l}"))?).clone();
            weights.push(
                w.into_dimensionality::<ndarray::Ix2>()
                    .map_err(|_| Error::Checkpoint("hypernet weight rank".into()))?,
            );
            biases.push(
                b.into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::Checkpoint("hypernet bias rank".into()))?,
            );
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), weights, biases })
    }

    /// Spectral norm product over layer weight matrices (power iteration).
    /// The estimate converges from below, so bounds built from it are
    /// conservative to check against.
    pub fn lipschitz_bound(&self) -> f64 {
        self.weights.iter().map(|w| spectral_norm(w.view())).product()
    }
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: ndarray::ArrayView2<'_, f64>) -> f64 {
    let (rows, cols) = w.dim();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut v: Array1<f64> = Array1::from_elem(cols, 1.0 / (cols as f64).sqrt());
    let mut sigma = 0.0f64;
    for _ in 0..10_000 {
        // u = W v; v' = W^T u
        let u = w.dot(&v);
        let mut v_next = w.t().dot(&u);
        let norm = v_next.dot(&v_next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v_next /= norm;
        let sigma_next = w.dot(&v_next).dot(&w.dot(&v_next)).sqrt();
        if (sigma_next - sigma).abs() <= 1e-13 * sigma_next.max(1.0) {
            return sigma_next;
        }
        sigma = sigma_next;
        v = v_next;
    }
    sigma
}

/// Frozen regularization targets: point-forward hypernet outputs at probe
/// embeddings captured from the previous task's weights.
#[derive(Debug, Clone)]
pub struct RegTargetSet {
    /// Probe embeddings, stacked as rows (P, M).
    pub probes: Array2<f64>,
    /// Stored hypernet outputs at those probes, rows aligned (P, D).
    pub targets: Array2<f64>,
    /// Number of prior tasks the probes cover.
    pub num_tasks: usize,
    /// Probes per task (3 when task identity is unknown at test time, 1
    /// center probe when it is known).
    pub probes_per_task: usize,
}

/// Training mode, deciding head use, nesting defaults, and snapshot probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Task-incremental: task identity known at test time.
    Til,
    /// Domain-incremental: shared label space, universal embedding at the end.
    Dil,
    /// Class-incremental: task identity inferred by entropy at test time.
    Cil,
}

impl Mode {
    pub fn probes_per_task(self) -> usize {
        match self {
            Mode::Til => 1,
            Mode::Dil | Mode::Cil => 3,
        }
    }
}

/// Captures regularization targets for all prior tasks from the frozen
/// hypernetwork. Probe points are the interval endpoints and center
/// (unknown-identity modes) or the center alone (known identity), evaluated
/// with point forwards.
pub fn snapshot_reg_targets(
    embeddings: &[IntervalTensor],
    eta_frozen: &Hypernet,
    mode: Mode,
) -> Result<RegTargetSet> {
    if embeddings.is_empty() {
        return Err(Error::MissingSnapshot(0));
    }
    let m = eta_frozen.input_dim();
    let ppt = mode.probes_per_task();
    let mut probes = Array2::zeros((embeddings.len() * ppt, m));
    for (t, e) in embeddings.iter().enumerate() {
        if e.len() != m {
            return Err(Error::ShapeMismatch {
                context: "snapshot embedding size",
                expected: vec![m],
                got: e.shape().to_vec(),
            });
        }
        let mr = e.mid_rad();
        match mode {
            Mode::Til => {
                for (i, &c) in mr.mid.iter().enumerate() {
                    probes[[t, i]] = c;
                }
            }
            Mode::Dil | Mode::Cil => {
                for i in 0..m {
                    probes[[t * 3, i]] = e.lower()[i];
                    probes[[t * 3 + 1, i]] = mr.mid[i];
                    probes[[t * 3 + 2, i]] = e.upper()[i];
                }
            }
        }
    }
    let targets = eta_frozen.forward_point_batch(probes.view())?;
    Ok(RegTargetSet {
        probes,
        targets,
        num_tasks: embeddings.len(),
        probes_per_task: ppt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn toy_hnet() -> Hypernet {
        // 2 -> 3 -> 4, fixed weights
        Hypernet {
            layer_sizes: vec![2, 3, 4],
            weights: vec![
                arr2(&[[0.5, -0.3], [0.2, 0.8], [-0.6, 0.1]]),
                arr2(&[
                    [0.3, -0.2, 0.5],
                    [-0.4, 0.6, 0.1],
                    [0.2, 0.2, -0.7],
                    [0.9, -0.5, 0.3],
                ]),
            ],
            biases: vec![arr1(&[0.1, -0.2, 0.0]), arr1(&[0.0, 0.05, -0.1, 0.2])],
        }
    }

    /// Straight-line reimplementation of the point forward.
    fn naive_forward(h: &Hypernet, e: &[f64]) -> Vec<f64> {
        let mut act = e.to_vec();
        for l in 0..h.num_layers() {
            let (out_dim, in_dim) = h.weights[l].dim();
            let mut next = vec![0.0; out_dim];
            for j in 0..out_dim {
                let mut s = h.biases[l][j];
                for i in 0..in_dim {
                    s += h.weights[l][[j, i]] * act[i];
                }
                next[j] = if l != h.num_layers() - 1 { s.max(0.0) } else { s };
            }
            act = next;
        }
        act
    }

    #[test]
    fn zero_weights_zero_output() {
        let h = Hypernet {
            layer_sizes: vec![2, 3],
            weights: vec![Array2::zeros((3, 2))],
            biases: vec![Array1::zeros(3)],
        };
        let out = h.forward_point(arr1(&[0.4, -0.9]).view()).unwrap();
        assert_eq!(out, arr1(&[0.0, 0.0, 0.0]));
    }

    #[test]
    fn point_forward_matches_naive() {
        let h = toy_hnet();
        let e = [0.7, -1.2];
        let got = h.forward_point(arr1(&e).view()).unwrap();
        let want = naive_forward(&h, &e);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_interval_matches_point_exactly() {
        let h = toy_hnet();
        let e = arr1(&[0.3, 0.9]);
        let iv = IntervalTensor::from_point(e.clone().into_dyn());
        let (lo, hi) = h.forward_interval(&iv).unwrap();
        let point = h.forward_point(e.view()).unwrap();
        assert_eq!(lo, point);
        assert_eq!(hi, point);
    }

    #[test]
    fn single_layer_radius_is_abs_w_times_r() {
        // W = [[2]], b = [0], e = [-1, 1] -> output [-2, 2]
        let h = Hypernet {
            layer_sizes: vec![1, 1],
            weights: vec![arr2(&[[2.0]])],
            biases: vec![arr1(&[0.0])],
        };
        let iv = IntervalTensor::new(
            arr1(&[-1.0]).into_dyn(),
            arr1(&[1.0]).into_dyn(),
        )
        .unwrap();
        let (lo, hi) = h.forward_interval(&iv).unwrap();
        assert_eq!((lo[0], hi[0]), (-2.0, 2.0));
    }

    #[test]
    fn monte_carlo_containment() {
        let h = Hypernet::init(&[3, 6, 5], 99);
        let e = IntervalTensor::new(
            arr1(&[-0.4, 0.1, -0.2]).into_dyn(),
            arr1(&[0.3, 0.8, 0.0]).into_dyn(),
        )
        .unwrap();
        let (lo, hi) = h.forward_interval(&e).unwrap();
        for trial in 0..1000u64 {
            let p = crate::interval::sample_point(&e, 1_000 + trial);
            let flat: Array1<f64> = p.iter().cloned().collect();
            let out = h.forward_point(flat.view()).unwrap();
            for i in 0..out.len() {
                let slack = 4.0 * f64::EPSILON * out[i].abs().max(1.0);
                assert!(
                    out[i] >= lo[i] - slack && out[i] <= hi[i] + slack,
                    "escape at {i}: {} not in [{}, {}]",
                    out[i],
                    lo[i],
                    hi[i]
                );
            }
        }
    }

    #[test]
    fn monotone_width() {
        let h = Hypernet::init(&[2, 5, 4], 7);
        let narrow = IntervalTensor::new(
            arr1(&[-0.1, 0.2]).into_dyn(),
            arr1(&[0.1, 0.4]).into_dyn(),
        )
        .unwrap();
        let wide = IntervalTensor::new(
            arr1(&[-0.3, 0.1]).into_dyn(),
            arr1(&[0.2, 0.5]).into_dyn(),
        )
        .unwrap();
        let (nl, nu) = h.forward_interval(&narrow).unwrap();
        let (wl, wu) = h.forward_interval(&wide).unwrap();
        for i in 0..nl.len() {
            assert!(wu[i] - wl[i] >= nu[i] - nl[i] - 1e-12);
        }
    }

    #[test]
    fn spectral_norm_known_matrix() {
        // diag(3, 1) has spectral norm 3
        let w = arr2(&[[3.0, 0.0], [0.0, 1.0]]);
        assert!((spectral_norm(w.view()) - 3.0).abs() < 1e-9);
        // rotation-like matrix [[1,-1],[1,1]]/sqrt(2) has norm 1
        let s = 1.0 / 2.0f64.sqrt();
        let w = arr2(&[[s, -s], [s, s]]);
        assert!((spectral_norm(w.view()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn snapshot_probe_counts() {
        let h = toy_hnet();
        let e1 = IntervalTensor::new(
            arr1(&[-0.1, 0.0]).into_dyn(),
            arr1(&[0.1, 0.2]).into_dyn(),
        )
        .unwrap();
        let e2 = IntervalTensor::new(
            arr1(&[0.0, -0.3]).into_dyn(),
            arr1(&[0.4, 0.3]).into_dyn(),
        )
        .unwrap();

        // one prior task, known identity: exactly 1 center probe
        let s = snapshot_reg_targets(std::slice::from_ref(&e1), &h, Mode::Til).unwrap();
        assert_eq!(s.probes.nrows(), 1);
        assert_eq!(s.probes.row(0), arr1(&[0.0, 0.1]));

        // two prior tasks, unknown identity: 2 x 3 probes
        let s = snapshot_reg_targets(&[e1, e2], &h, Mode::Dil).unwrap();
        assert_eq!(s.probes.nrows(), 6);
        assert_eq!(s.targets.nrows(), 6);
        assert_eq!(s.targets.ncols(), h.output_dim());

        // no prior tasks is an error
        assert!(snapshot_reg_targets(&[], &h, Mode::Til).is_err());
    }
}
