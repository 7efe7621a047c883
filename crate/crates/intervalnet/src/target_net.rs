//! The target classifier: a ReLU MLP whose weights arrive as a flat vector
//! (point) or a pair of flat vectors (interval hyperrectangle) produced by
//! the hypernetwork.
//!
//! Flat parameter ordering is layer-major and fixed: `W_1` row-major, then
//! `b_1`, then `W_2`, `b_2`, and so on. The hypernetwork emits its output in
//! this same ordering.
//!
//! Three forward modes:
//! - point: ordinary MLP forward for one flat weight vector
//! - interval: bound propagation through interval weights (the activations
//!   stay nonnegative, which the input precondition and ReLU guarantee)
//! - relaxed: two point forwards at the box endpoints with elementwise
//!   min/max restoring bound order afterwards

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::interval::IntervalTensor;
use crate::kernels;

/// How output units map to tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadLayout {
    /// All tasks share the full output (domain-incremental and permuted
    /// streams: one label space).
    Shared,
    /// One output slice per task, laid out consecutively (split streams in
    /// task- and class-incremental settings).
    MultiHead { classes_per_task: Vec<usize> },
}

/// Architecture of the target MLP: `layer_sizes[0]` inputs, ReLU hidden
/// layers, identity on the final layer (classification logits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetArch {
    pub layer_sizes: Vec<usize>,
    pub head: HeadLayout,
}

/// Flat-layout slice of one layer inside the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlice {
    pub w_offset: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    pub b_offset: usize,
}

impl TargetArch {
    pub fn new(layer_sizes: Vec<usize>, head: HeadLayout) -> Self {
        assert!(layer_sizes.len() >= 2, "target arch needs at least 2 layer sizes");
        if let HeadLayout::MultiHead { classes_per_task } = &head {
            let total: usize = classes_per_task.iter().sum();
            assert_eq!(
                total,
                *layer_sizes.last().unwrap(),
                "multi-head class counts must sum to the output width"
            );
        }
        Self { layer_sizes, head }
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

    /// Total flat parameter count `D`.
    pub fn flat_len(&self) -> usize {
        self.layers().map(|l| l.out_dim * l.in_dim + l.out_dim).sum()
    }

    /// Layer slices in flat order.
    pub fn layers(&self) -> impl Iterator<Item = LayerSlice> + '_ {
        let mut offset = 0usize;
        (0..self.num_layers()).map(move |l| {
            let in_dim = self.layer_sizes[l];
            let out_dim = self.layer_sizes[l + 1];
            let s = LayerSlice {
                w_offset: offset,
                out_dim,
                in_dim,
                b_offset: offset + out_dim * in_dim,
            };
            offset += out_dim * in_dim + out_dim;
            s
        })
    }

    /// Output-column range for a task's head.
    pub fn head_range(&self, task: usize) -> std::ops::Range<usize> {
        match &self.head {
            HeadLayout::Shared => 0..self.output_dim(),
            HeadLayout::MultiHead { classes_per_task } => {
                assert!(task < classes_per_task.len(), "task out of range");
                let start: usize = classes_per_task[..task].iter().sum();
                start..start + classes_per_task[task]
            }
        }
    }
}

/// Per-layer weight and bias hyperrectangles for the target classifier,
/// stored as flat lower/upper vectors in the canonical ordering.
#[derive(Debug, Clone)]
pub struct TargetParamsInterval {
    arch: TargetArch,
    lower: Array1<f64>,
    upper: Array1<f64>,
}

impl TargetParamsInterval {
    pub fn from_flat(arch: TargetArch, lower: Array1<f64>, upper: Array1<f64>) -> Result<Self> {
        let d = arch.flat_len();
        if lower.len() != d || upper.len() != d {
            return Err(Error::ShapeMismatch {
                context: "TargetParamsInterval::from_flat",
                expected: vec![d],
                got: vec![lower.len(), upper.len()],
            });
        }
        for (index, (&l, &u)) in lower.iter().zip(upper.iter()).enumerate() {
            if !(l <= u) {
                return Err(Error::BoundOrder { index, lower: l, upper: u });
            }
        }
        Ok(Self { arch, lower, upper })
    }

    pub fn arch(&self) -> &TargetArch {
        &self.arch
    }

    pub fn lower(&self) -> ArrayView1<'_, f64> {
        self.lower.view()
    }

    pub fn upper(&self) -> ArrayView1<'_, f64> {
        self.upper.view()
    }

    /// Weight hyperrectangle of one layer as an `(out, in)` interval tensor.
    pub fn layer_weights(&self, layer: usize) -> IntervalTensor {
        let s = self.arch.layers().nth(layer).expect("layer index");
        let shp = ndarray::IxDyn(&[s.out_dim, s.in_dim]);
        let lo = self.lower.as_slice().unwrap();
        let hi = self.upper.as_slice().unwrap();
        IntervalTensor::new(
            ndarray::ArrayD::from_shape_vec(
                shp.clone(),
                lo[s.w_offset..s.w_offset + s.out_dim * s.in_dim].to_vec(),
            )
            .unwrap(),
            ndarray::ArrayD::from_shape_vec(
                shp,
                hi[s.w_offset..s.w_offset + s.out_dim * s.in_dim].to_vec(),
            )
            .unwrap(),
        )
        .expect("stored bounds are ordered")
    }

    /// Bias hyperrectangle of one layer.
    pub fn layer_biases(&self, layer: usize) -> IntervalTensor {
        let s = self.arch.layers().nth(layer).expect("layer index");
        let shp = ndarray::IxDyn(&[s.out_dim]);
        let lo = self.lower.as_slice().unwrap();
        let hi = self.upper.as_slice().unwrap();
        IntervalTensor::new(
            ndarray::ArrayD::from_shape_vec(
                shp.clone(),
                lo[s.b_offset..s.b_offset + s.out_dim].to_vec(),
            )
            .unwrap(),
            ndarray::ArrayD::from_shape_vec(shp, hi[s.b_offset..s.b_offset + s.out_dim].to_vec())
                .unwrap(),
        )
        .expect("stored bounds are ordered")
    }
}

fn check_input(arch: &TargetArch, x: ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != arch.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "target input width",
            expected: vec![arch.input_dim()],
            got: vec![x.ncols()],
        });
    }
    Ok(())
}

fn check_nonneg(x: ArrayView2<'_, f64>) -> Result<()> {
    for (index, &v) in x.iter().enumerate() {
        if v < 0.0 {
            return Err(Error::NegativeActivation { index, value: v });
        }
    }
    Ok(())
}

/// Standard MLP forward for a batch: ReLU hidden layers, identity output.
pub fn forward_point_batch(
    arch: &TargetArch,
    x: ArrayView2<'_, f64>,
    theta: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    check_input(arch, x)?;
    if theta.len() != arch.flat_len() {
        return Err(Error::ShapeMismatch {
            context: "forward_point theta length",
            expected: vec![arch.flat_len()],
            got: vec![theta.len()],
        });
    }
    let batch = x.nrows();
    let th = theta.as_slice().expect("contiguous");
    let x_std = x.as_standard_layout();
    let mut act: Vec<f64> = x_std.as_slice().unwrap().to_vec();
    let last = arch.num_layers() - 1;
    for (l, s) in arch.layers().enumerate() {
        let mut out = vec![0.0; batch * s.out_dim];
        kernels::point_affine_fwd(
            &th[s.w_offset..s.w_offset + s.out_dim * s.in_dim],
            &th[s.b_offset..s.b_offset + s.out_dim],
            s.out_dim,
            s.in_dim,
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
    Ok(Array2::from_shape_vec((batch, arch.output_dim()), act).unwrap())
}

/// Single-sample point forward.
pub fn forward_point(
    arch: &TargetArch,
    x: ArrayView1<'_, f64>,
    theta: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let x2 = x.insert_axis(ndarray::Axis(0));
    Ok(forward_point_batch(arch, x2, theta)?.row(0).to_owned())
}

/// Interval forward pass: logit bounds containing `phi(x; theta)` for every
/// theta in the hyperrectangle. Inputs must be nonnegative.
pub fn forward_interval_batch(
    arch: &TargetArch,
    x: ArrayView2<'_, f64>,
    params: &TargetParamsInterval,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_input(arch, x)?;
    check_nonneg(x)?;
    forward_interval_batch_flat(arch, x, params.lower(), params.upper())
}

/// Interval forward from raw flat bound vectors (used by the trainer, which
/// holds tape values rather than a `TargetParamsInterval`).
pub fn forward_interval_batch_flat(
    arch: &TargetArch,
    x: ArrayView2<'_, f64>,
    theta_lower: ArrayView1<'_, f64>,
    theta_upper: ArrayView1<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_input(arch, x)?;
    check_nonneg(x)?;
    let d = arch.flat_len();
    if theta_lower.len() != d || theta_upper.len() != d {
        return Err(Error::ShapeMismatch {
            context: "forward_interval theta length",
            expected: vec![d],
            got: vec![theta_lower.len(), theta_upper.len()],
        });
    }
    let lo = theta_lower.as_slice().expect("contiguous");
    let hi = theta_upper.as_slice().expect("contiguous");
    let batch = x.nrows();
    let x_std = x.as_standard_layout();
    let mut zl: Vec<f64> = x_std.as_slice().unwrap().to_vec();
    let mut zu = zl.clone();
    let last = arch.num_layers() - 1;
    for (l, s) in arch.layers().enumerate() {
        let mut out_l = vec![0.0; batch * s.out_dim];
        let mut out_u = vec![0.0; batch * s.out_dim];
        kernels::interval_affine_fwd(
            &lo[s.w_offset..s.w_offset + s.out_dim * s.in_dim],
            &hi[s.w_offset..s.w_offset + s.out_dim * s.in_dim],
            &lo[s.b_offset..s.b_offset + s.out_dim],
            &hi[s.b_offset..s.b_offset + s.out_dim],
            s.out_dim,
            s.in_dim,
            &zl,
            &zu,
            batch,
            &mut out_l,
            &mut out_u,
        );
        if l != last {
            for v in &mut out_l {
                *v = v.max(0.0);
            }
            for v in &mut out_u {
                *v = v.max(0.0);
            }
        }
        zl = out_l;
        zu = out_u;
    }
    let n = arch.output_dim();
    Ok((
        Array2::from_shape_vec((batch, n), zl).unwrap(),
        Array2::from_shape_vec((batch, n), zu).unwrap(),
    ))
}

/// Single-sample interval forward returning an interval tensor of logits.
pub fn forward_interval(
    arch: &TargetArch,
    x: ArrayView1<'_, f64>,
    params: &TargetParamsInterval,
) -> Result<IntervalTensor> {
    let x2 = x.insert_axis(ndarray::Axis(0));
    let (l, u) = forward_interval_batch(arch, x2, params)?;
    IntervalTensor::new(l.row(0).to_owned().into_dyn(), u.row(0).to_owned().into_dyn())
}

/// Relaxed forward: point passes at both box endpoints, order restored by
/// elementwise min/max. The result is contained in the interval forward.
pub fn forward_relaxed_batch(
    arch: &TargetArch,
    x: ArrayView2<'_, f64>,
    theta_lower: ArrayView1<'_, f64>,
    theta_upper: ArrayView1<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let y_lo = forward_point_batch(arch, x, theta_lower)?;
    let y_hi = forward_point_batch(arch, x, theta_upper)?;
    let l = ndarray::Zip::from(&y_lo).and(&y_hi).map_collect(|&a, &b| a.min(b));
    let u = ndarray::Zip::from(&y_lo).and(&y_hi).map_collect(|&a, &b| a.max(b));
    Ok((l, u))
}

/// Single-sample relaxed forward.
pub fn forward_relaxed(
    arch: &TargetArch,
    x: ArrayView1<'_, f64>,
    theta_lower: ArrayView1<'_, f64>,
    theta_upper: ArrayView1<'_, f64>,
) -> Result<IntervalTensor> {
    let x2 = x.insert_axis(ndarray::Axis(0));
    let (l, u) = forward_relaxed_batch(arch, x2, theta_lower, theta_upper)?;
    IntervalTensor::new(l.row(0).to_owned().into_dyn(), u.row(0).to_owned().into_dyn())
}

/// Adversarial logit selection for the worst-case loss: the true-class
/// coordinate takes its lower bound, every other coordinate its upper bound.
pub fn worst_case_logits(
    lower: ArrayView1<'_, f64>,
    upper: ArrayView1<'_, f64>,
    one_hot: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    if lower.len() != upper.len() || lower.len() != one_hot.len() {
        return Err(Error::ShapeMismatch {
            context: "worst_case_logits",
            expected: vec![lower.len()],
            got: vec![upper.len(), one_hot.len()],
        });
    }
    let ones = one_hot.iter().filter(|&&v| v == 1.0).count();
    let valid = one_hot.iter().all(|&v| v == 0.0 || v == 1.0) && ones == 1;
    if !valid {
        return Err(Error::BadLabel { label: ones, classes: one_hot.len() });
    }
    Ok(ndarray::Zip::from(&lower)
        .and(&upper)
        .and(&one_hot)
        .map_collect(|&l, &u, &y| if y == 1.0 { l } else { u }))
}

/// Stabilized cross-entropy of logits against an integer class label.
pub fn cross_entropy(logits: ArrayView1<'_, f64>, label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&t| (t - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array1};

    fn simple_arch() -> TargetArch {
        TargetArch::new(vec![2, 2], HeadLayout::Shared)
    }

    #[test]
    fn flat_layout_and_lengths() {
        let arch = TargetArch::new(vec![3, 4, 2], HeadLayout::Shared);
        assert_eq!(arch.flat_len(), 3 * 4 + 4 + 4 * 2 + 2);
        let slices: Vec<LayerSlice> = arch.layers().collect();
        assert_eq!(slices[0].w_offset, 0);
        assert_eq!(slices[0].b_offset, 12);
        assert_eq!(slices[1].w_offset, 16);
        assert_eq!(slices[1].b_offset, 24);
    }

    #[test]
    fn head_ranges() {
        let arch = TargetArch::new(
            vec![4, 8, 6],
            HeadLayout::MultiHead { classes_per_task: vec![2, 2, 2] },
        );
        assert_eq!(arch.head_range(0), 0..2);
        assert_eq!(arch.head_range(2), 4..6);
        let shared = TargetArch::new(vec![4, 6], HeadLayout::Shared);
        assert_eq!(shared.head_range(5), 0..6);
    }

    #[test]
    fn zero_weights_zero_logits() {
        let arch = simple_arch();
        let theta = Array1::zeros(arch.flat_len());
        let y = forward_point(&arch, arr1(&[0.3, 0.7]).view(), theta.view()).unwrap();
        assert_eq!(y, arr1(&[0.0, 0.0]));
    }

    #[test]
    fn identity_weights() {
        let arch = simple_arch();
        // W = I, b = 0; single layer so no relu on output
        let theta = arr1(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = forward_point(&arch, arr1(&[1.0, 0.0]).view(), theta.view()).unwrap();
        assert_eq!(y, arr1(&[1.0, 0.0]));
    }

    #[test]
    fn degenerate_interval_equals_point() {
        let arch = TargetArch::new(vec![2, 3, 2], HeadLayout::Shared);
        let d = arch.flat_len();
        let theta: Array1<f64> = (0..d).map(|i| ((i * 37 % 19) as f64 - 9.0) / 7.0).collect();
        let params =
            TargetParamsInterval::from_flat(arch.clone(), theta.clone(), theta.clone()).unwrap();
        let x = arr1(&[0.2, 0.9]);
        let point = forward_point(&arch, x.view(), theta.view()).unwrap();
        let iv = forward_interval(&arch, x.view(), &params).unwrap();
        // bitwise by shared kernel accumulation order
        for i in 0..2 {
            assert_eq!(point[i], iv.lower()[i]);
            assert_eq!(point[i], iv.upper()[i]);
        }
    }

    #[test]
    fn negative_input_rejected() {
        let arch = simple_arch();
        let d = arch.flat_len();
        let params = TargetParamsInterval::from_flat(
            arch.clone(),
            Array1::zeros(d),
            Array1::zeros(d),
        )
        .unwrap();
        let r = forward_interval(&arch, arr1(&[-0.1, 0.5]).view(), &params);
        assert!(matches!(r, Err(Error::NegativeActivation { .. })));
    }

    #[test]
    fn relaxed_restores_order() {
        // lower pass gives (1.0, -2.0), upper pass gives (0.5, 3.0):
        // restored interval is ([0.5, 1.0], [-2.0, 3.0])
        let arch = simple_arch();
        // single 2x2 layer; theta = [w11 w12 w21 w22 b1 b2]
        let th_lo = arr1(&[1.0, 0.0, 0.0, -2.0, 0.0, 0.0]);
        let th_hi = arr1(&[0.5, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let out =
            forward_relaxed(&arch, arr1(&[1.0, 1.0]).view(), th_lo.view(), th_hi.view()).unwrap();
        assert_eq!((out.lower()[0], out.upper()[0]), (0.5, 1.0));
        assert_eq!((out.lower()[1], out.upper()[1]), (-2.0, 3.0));
    }

    #[test]
    fn worst_case_selection() {
        let zl = arr1(&[0.2, -0.5]);
        let zu = arr1(&[0.8, 0.1]);
        let y = arr1(&[1.0, 0.0]);
        let z = worst_case_logits(zl.view(), zu.view(), y.view()).unwrap();
        assert_eq!(z, arr1(&[0.2, 0.1]));

        // degenerate interval: selection is the point itself
        let z = worst_case_logits(zl.view(), zl.view(), y.view()).unwrap();
        assert_eq!(z, zl);

        let bad = arr1(&[1.0, 1.0]);
        assert!(worst_case_logits(zl.view(), zu.view(), bad.view()).is_err());
    }

    #[test]
    fn batch_and_single_agree() {
        let arch = TargetArch::new(vec![3, 5, 4], HeadLayout::Shared);
        let d = arch.flat_len();
        let theta: Array1<f64> = (0..d).map(|i| ((i * 29 % 23) as f64 - 11.0) / 13.0).collect();
        let xs = arr2(&[[0.1, 0.5, 0.9], [0.7, 0.0, 0.3]]);
        let batch = forward_point_batch(&arch, xs.view(), theta.view()).unwrap();
        for r in 0..2 {
            let single = forward_point(&arch, xs.row(r), theta.view()).unwrap();
            assert_eq!(batch.row(r).to_owned(), single);
        }
    }
}
