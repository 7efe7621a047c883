//! Tape-based reverse-mode differentiation for the training losses.
//!
//! A [`Tape`] records tensor-valued primitive operations eagerly during a
//! forward pass; [`backward`] replays them in exact reverse order and
//! accumulates vector-Jacobian products into the gradient buffers of a
//! [`ParamStore`]. The primitive set is exactly what the losses need:
//! affine transforms (point, interval-weight, mid/radius), elementwise
//! add/sub/mul, max-with-zero, absolute value, cos, softmax, log, exp, mean,
//! squared L2 norms, and elementwise min/max of two tensors. Composite
//! graphs are built through typed methods, so an unsupported primitive
//! cannot be recorded by construction.
//!
//! Gradients flow through both interval endpoints: the lower and upper
//! propagation paths share parameters through the `W+`/`W-` and `|W|`
//! decompositions, whose subgradient at zero is defined as zero.

use std::collections::HashMap;

use ndarray::{ArrayD, Dimension, IxDyn};

use crate::error::{Error, Result};
use crate::kernels::{self, IntervalAffineGrads, MidRadGrads};

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter arrays with matching gradient accumulators.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    grads: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; replaces value and zeroes the gradient if the
    /// name already exists (task embeddings are re-seeded this way).
    pub fn register(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            self.grads[i] = ArrayD::zeros(value.raw_dim());
            self.values[i] = value;
            ParamId(i)
        } else {
            let i = self.values.len();
            self.grads.push(ArrayD::zeros(value.raw_dim()));
            self.values.push(value);
            self.names.push(name.to_string());
            self.index.insert(name.to_string(), i);
            ParamId(i)
        }
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    /// Disjoint mutable borrows of a parameter and its gradient buffer.
    pub fn param_and_grad_mut(&mut self, id: ParamId) -> (&mut ArrayD<f64>, &mut ArrayD<f64>) {
        (&mut self.values[id.0], &mut self.grads[id.0])
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }
}

/// Reference to one output slot of a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    node: u32,
    slot: u32,
}

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Constant,
    Add(NodeRef, NodeRef),
    Sub(NodeRef, NodeRef),
    Mul(NodeRef, NodeRef),
    /// alpha * a + beta * b
    AddScaled(NodeRef, NodeRef, f64, f64),
    Scale(NodeRef, f64),
    Cos(NodeRef),
    Tanh(NodeRef),
    Exp(NodeRef),
    Log(NodeRef),
    Abs(NodeRef),
    Relu(NodeRef),
    MinElem(NodeRef, NodeRef),
    MaxElem(NodeRef, NodeRef),
    Softmax(NodeRef),
    Mean(NodeRef),
    SqL2(NodeRef),
    /// ||x - target||^2 summed over all elements; target is a constant.
    SqL2Diff { x: NodeRef, target: ArrayD<f64> },
    MatVec { w: NodeRef, x: NodeRef },
    /// Copy `x[start..start+len]` reshaped to `shape`.
    SliceReshape { x: NodeRef, start: usize },
    /// Column slice of a (B, C) matrix.
    SliceCols { x: NodeRef, start: usize, len: usize },
    /// y = x W^T + b with point weights; x is (B, in) or (in,), w is (out, in).
    PointAffine { w: NodeRef, b: NodeRef, x: NodeRef },
    /// Interval-weight affine on nonnegative interval activations.
    /// Outputs (pre_lower, pre_upper).
    IntervalAffine {
        wl: NodeRef,
        wu: NodeRef,
        bl: NodeRef,
        bu: NodeRef,
        zl: NodeRef,
        zu: NodeRef,
    },
    /// mu' = W mu + b, r' = |W| r. Outputs (mu', r'), 1-D.
    AffineMidRad { w: NodeRef, b: NodeRef, mu: NodeRef, r: NodeRef },
    /// l = relu(mu - r), u = relu(mu + r); outputs ((l+u)/2, (u-l)/2).
    ReluMidRad { mu: NodeRef, r: NodeRef },
    /// Outputs (mu - r, mu + r).
    BoundsFromMidRad { mu: NodeRef, r: NodeRef },
    /// out[b, i] = lower[b, i] if labels[b] == i else upper[b, i].
    SelectByLabel { lower: NodeRef, upper: NodeRef, labels: Vec<usize> },
    /// Mean over the batch of stabilized cross-entropy from logits.
    CrossEntropyMean { logits: NodeRef, labels: Vec<usize> },
}

struct Node {
    op: Op,
    outs: Vec<ArrayD<f64>>,
    needs_grad: bool,
}

/// Ordered record of primitive operations from one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Value of a node output. Parameter nodes read through to the store.
    pub fn value<'a>(&'a self, store: &'a ParamStore, r: NodeRef) -> &'a ArrayD<f64> {
        match &self.nodes[r.node as usize].op {
            Op::Param(id) => store.value(*id),
            _ => &self.nodes[r.node as usize].outs[r.slot as usize],
        }
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, store: &ParamStore, r: NodeRef) -> f64 {
        let v = self.value(store, r);
        assert_eq!(v.len(), 1, "scalar() on a non-scalar node");
        v.iter().next().copied().unwrap()
    }

    fn needs(&self, r: NodeRef) -> bool {
        self.nodes[r.node as usize].needs_grad
    }

    fn push(&mut self, op: Op, outs: Vec<ArrayD<f64>>, needs_grad: bool) -> NodeRef {
        assert!(!self.consumed, "tape already consumed");
        self.nodes.push(Node { op, outs, needs_grad });
        NodeRef { node: (self.nodes.len() - 1) as u32, slot: 0 }
    }

    // -- leaves ------------------------------------------------------------

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeRef {
        let _ = store;
        self.push(Op::Param(id), vec![], true)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeRef {
        self.push(Op::Constant, vec![value], false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeRef {
        self.constant(scalar_arr(v))
    }

    // -- elementwise -------------------------------------------------------

    fn binary_elemwise(
        &mut self,
        store: &ParamStore,
        a: NodeRef,
        b: NodeRef,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> NodeRef {
        let va = self.value(store, a);
        let vb = self.value(store, b);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let out = ndarray::Zip::from(va).and(vb).map_collect(|&x, &y| f(x, y));
        let ng = self.needs(a) || self.needs(b);
        self.push(op, vec![out], ng)
    }

    pub fn add(&mut self, store: &ParamStore, a: NodeRef, b: NodeRef) -> NodeRef {
        self.binary_elemwise(store, a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, store: &ParamStore, a: NodeRef, b: NodeRef) -> NodeRef {
        self.binary_elemwise(store, a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, store: &ParamStore, a: NodeRef, b: NodeRef) -> NodeRef {
        self.binary_elemwise(store, a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scaled(
        &mut self,
        store: &ParamStore,
        a: NodeRef,
        b: NodeRef,
        alpha: f64,
        beta: f64,
    ) -> NodeRef {
        self.binary_elemwise(
            store,
            a,
            b,
            |x, y| alpha * x + beta * y,
            Op::AddScaled(a, b, alpha, beta),
        )
    }

    /// Elementwise minimum; on ties the gradient goes to the first argument.
    pub fn min_elem(&mut self, store: &ParamStore, a: NodeRef, b: NodeRef) -> NodeRef {
        self.binary_elemwise(store, a, b, f64::min, Op::MinElem(a, b))
    }

    /// Elementwise maximum; on ties the gradient goes to the first argument.
    pub fn max_elem(&mut self, store: &ParamStore, a: NodeRef, b: NodeRef) -> NodeRef {
        self.binary_elemwise(store, a, b, f64::max, Op::MaxElem(a, b))
    }

    fn unary_elemwise(
        &mut self,
        store: &ParamStore,
        x: NodeRef,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> NodeRef {
        let out = self.value(store, x).mapv(&f);
        let ng = self.needs(x);
        self.push(op, vec![out], ng)
    }

    pub fn scale(&mut self, store: &ParamStore, x: NodeRef, c: f64) -> NodeRef {
        self.unary_elemwise(store, x, |v| c * v, Op::Scale(x, c))
    }

    pub fn cos(&mut self, store: &ParamStore, x: NodeRef) -> NodeRef {
        self.unary_elemwise(store, x, f64::cos, Op::Cos(x))
    }

    pub fn tanh(&mut self, store: &ParamStore, x: NodeRef) -> NodeRef {
        self.unary_elemwise(store, x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, store: &ParamStore, x: NodeRef) -> NodeRef {
        self.unary_elemwise(store, x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, store: &ParamStore, x: NodeRef) -> NodeRef {
        self.unary_elemwise(store, x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, store: &ParamStore, x: NodeRef) -> NodeRef {
        self.unary_elemwise(store, x, f64::abs, Op::Abs(x))
    }

    /// Max-with-zero.
    pub fn relu(&mut self, store: &ParamStore, x: NodeRef) -> NodeRef {
        self.unary_elemwise(store, x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Softmax over a 1-D vector, with max-subtraction stabilization.
    pub fn softmax(&mut self, store: &ParamStore, x: NodeRef) -> NodeRef {
        let v = self.value(store, x);
        assert_eq!(v.ndim(), 1, "softmax expects a 1-D input");
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = v.mapv(|t| (t - m).exp());
        let s: f64 = e.sum();
        let out = e.mapv(|t| t / s);
        let ng = self.needs(x);
        self.push(Op::Softmax(x), vec![out], ng)
    }

    // -- reductions ----------------------------------------------------------

    pub fn mean(&mut self, store: &ParamStore, x: NodeRef) -> NodeRef {
        let v = self.value(store, x);
        let m = v.sum() / v.len() as f64;
        let ng = self.needs(x);
        self.push(Op::Mean(x), vec![scalar_arr(m)], ng)
    }

    /// Squared L2 norm: sum of squares over all elements.
    pub fn sq_l2(&mut self, store: &ParamStore, x: NodeRef) -> NodeRef {
        let v = self.value(store, x);
        let s: f64 = v.iter().map(|t| t * t).sum();
        let ng = self.needs(x);
        self.push(Op::SqL2(x), vec![scalar_arr(s)], ng)
    }

    /// `||x - target||^2` against a constant target, summed over elements.
    pub fn sq_l2_diff(&mut self, store: &ParamStore, x: NodeRef, target: ArrayD<f64>) -> NodeRef {
        let v = self.value(store, x);
        assert_eq!(v.shape(), target.shape(), "sq_l2_diff shape mismatch");
        let s: f64 = v.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let ng = self.needs(x);
        self.push(Op::SqL2Diff { x, target }, vec![scalar_arr(s)], ng)
    }

    // -- linear algebra ------------------------------------------------------

    /// Matrix-vector product: w is (m, n), x is (n,).
    pub fn matvec(&mut self, store: &ParamStore, w: NodeRef, x: NodeRef) -> NodeRef {
        let wv = self.value(store, w);
        let xv = self.value(store, x);
        assert_eq!(wv.ndim(), 2);
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), n, "matvec dimension mismatch");
        let ws = wv.as_slice().expect("contiguous");
        let xs = xv.as_slice().expect("contiguous");
        let mut out = vec![0.0; m];
        for (j, row) in ws.chunks_exact(n).enumerate() {
            out[j] = kernels::dot(row, xs);
        }
        let ng = self.needs(w) || self.needs(x);
        self.push(Op::MatVec { w, x }, vec![vec_arr(out)], ng)
    }

    /// Copies `x[start..start+len]` (flat) into a node of the given shape.
    pub fn slice_reshape(
        &mut self,
        store: &ParamStore,
        x: NodeRef,
        start: usize,
        shape: &[usize],
    ) -> NodeRef {
        let v = self.value(store, x);
        let flat = v.as_slice().expect("contiguous");
        let len: usize = shape.iter().product();
        assert!(start + len <= flat.len(), "slice_reshape out of bounds");
        let out = ArrayD::from_shape_vec(IxDyn(shape), flat[start..start + len].to_vec()).unwrap();
        let ng = self.needs(x);
        self.push(Op::SliceReshape { x, start }, vec![out], ng)
    }

    /// Column slice `x[:, start..start+len]` of a (B, C) matrix.
    pub fn slice_cols(&mut self, store: &ParamStore, x: NodeRef, start: usize, len: usize) -> NodeRef {
        let v = self.value(store, x);
        assert_eq!(v.ndim(), 2);
        let (b, c) = (v.shape()[0], v.shape()[1]);
        assert!(start + len <= c, "slice_cols out of bounds");
        let xs = v.as_slice().expect("contiguous");
        let mut out = vec![0.0; b * len];
        for row in 0..b {
            out[row * len..(row + 1) * len]
                .copy_from_slice(&xs[row * c + start..row * c + start + len]);
        }
        let ng = self.needs(x);
        self.push(
            Op::SliceCols { x, start, len },
            vec![ArrayD::from_shape_vec(IxDyn(&[b, len]), out).unwrap()],
            ng,
        )
    }

    /// `x W^T + b` with point weights; x (B, in) or (in,), w (out, in).
    pub fn point_affine(&mut self, store: &ParamStore, w: NodeRef, b: NodeRef, x: NodeRef) -> NodeRef {
        let wv = self.value(store, w);
        let bv = self.value(store, b);
        let xv = self.value(store, x);
        assert_eq!(wv.ndim(), 2);
        let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
        let (batch, is_vec) = affine_batch_of(xv.shape(), in_dim);
        assert_eq!(bv.len(), out_dim);
        let mut y = vec![0.0; batch * out_dim];
        kernels::point_affine_fwd(
            wv.as_slice().unwrap(),
            bv.as_slice().unwrap(),
            out_dim,
            in_dim,
            xv.as_slice().unwrap(),
            batch,
            &mut y,
        );
        let shape: Vec<usize> = if is_vec { vec![out_dim] } else { vec![batch, out_dim] };
        let ng = self.needs(w) || self.needs(b) || self.needs(x);
        self.push(
            Op::PointAffine { w, b, x },
            vec![ArrayD::from_shape_vec(IxDyn(&shape), y).unwrap()],
            ng,
        )
    }

    /// Interval affine with interval weights on nonnegative activations.
    /// Returns (pre_lower, pre_upper).
    pub fn interval_affine(
        &mut self,
        store: &ParamStore,
        wl: NodeRef,
        wu: NodeRef,
        bl: NodeRef,
        bu: NodeRef,
        zl: NodeRef,
        zu: NodeRef,
    ) -> (NodeRef, NodeRef) {
        let wlv = self.value(store, wl);
        let (out_dim, in_dim) = (wlv.shape()[0], wlv.shape()[1]);
        let zlv = self.value(store, zl);
        let (batch, is_vec) = affine_batch_of(zlv.shape(), in_dim);
        debug_assert!(
            !(zl == zu && self.needs(zl)),
            "aliased differentiable interval activations are unsupported"
        );
        let mut out_l = vec![0.0; batch * out_dim];
        let mut out_u = vec![0.0; batch * out_dim];
        kernels::interval_affine_fwd(
            self.value(store, wl).as_slice().unwrap(),
            self.value(store, wu).as_slice().unwrap(),
            self.value(store, bl).as_slice().unwrap(),
            self.value(store, bu).as_slice().unwrap(),
            out_dim,
            in_dim,
            self.value(store, zl).as_slice().unwrap(),
            self.value(store, zu).as_slice().unwrap(),
            batch,
            &mut out_l,
            &mut out_u,
        );
        let shape: Vec<usize> = if is_vec { vec![out_dim] } else { vec![batch, out_dim] };
        let ng = [wl, wu, bl, bu, zl, zu].iter().any(|r| self.needs(*r));
        let node = self.push(
            Op::IntervalAffine { wl, wu, bl, bu, zl, zu },
            vec![
                ArrayD::from_shape_vec(IxDyn(&shape), out_l).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&shape), out_u).unwrap(),
            ],
            ng,
        );
        (node, NodeRef { slot: 1, ..node })
    }

    /// Mid/radius affine: mu' = W mu + b, r' = |W| r. Returns (mu', r').
    pub fn affine_midrad(
        &mut self,
        store: &ParamStore,
        w: NodeRef,
        b: NodeRef,
        mu: NodeRef,
        r: NodeRef,
    ) -> (NodeRef, NodeRef) {
        let wv = self.value(store, w);
        let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
        let muv = self.value(store, mu);
        assert_eq!(muv.len(), in_dim, "affine_midrad dimension mismatch");
        let mut mu_out = vec![0.0; out_dim];
        let mut r_out = vec![0.0; out_dim];
        kernels::midrad_affine_fwd(
            wv.as_slice().unwrap(),
            self.value(store, b).as_slice().unwrap(),
            out_dim,
            in_dim,
            muv.as_slice().unwrap(),
            self.value(store, r).as_slice().unwrap(),
            &mut mu_out,
            &mut r_out,
        );
        let ng = [w, b, mu, r].iter().any(|x| self.needs(*x));
        let node = self.push(
            Op::AffineMidRad { w, b, mu, r },
            vec![vec_arr(mu_out), vec_arr(r_out)],
            ng,
        );
        (node, NodeRef { slot: 1, ..node })
    }

    /// ReLU in mid/radius form. Returns (mu', r').
    pub fn relu_midrad(&mut self, store: &ParamStore, mu: NodeRef, r: NodeRef) -> (NodeRef, NodeRef) {
        let muv = self.value(store, mu);
        let rv = self.value(store, r);
        let l = ndarray::Zip::from(muv).and(rv).map_collect(|&m, &rad| (m - rad).max(0.0));
        let u = ndarray::Zip::from(muv).and(rv).map_collect(|&m, &rad| (m + rad).max(0.0));
        let mu_out = ndarray::Zip::from(&l).and(&u).map_collect(|&a, &b| (a + b) / 2.0);
        let r_out = ndarray::Zip::from(&l).and(&u).map_collect(|&a, &b| (b - a) / 2.0);
        let ng = self.needs(mu) || self.needs(r);
        let node = self.push(Op::ReluMidRad { mu, r }, vec![mu_out, r_out], ng);
        (node, NodeRef { slot: 1, ..node })
    }

    /// (mu - r, mu + r).
    pub fn bounds_from_midrad(
        &mut self,
        store: &ParamStore,
        mu: NodeRef,
        r: NodeRef,
    ) -> (NodeRef, NodeRef) {
        let muv = self.value(store, mu);
        let rv = self.value(store, r);
        let l = muv - rv;
        let u = muv + rv;
        let ng = self.needs(mu) || self.needs(r);
        let node = self.push(Op::BoundsFromMidRad { mu, r }, vec![l, u], ng);
        (node, NodeRef { slot: 1, ..node })
    }

    /// Worst-case logit selection: the true-class coordinate takes its lower
    /// bound, every other coordinate its upper bound.
    pub fn select_by_label(
        &mut self,
        store: &ParamStore,
        lower: NodeRef,
        upper: NodeRef,
        labels: &[usize],
    ) -> NodeRef {
        let lv = self.value(store, lower);
        let uv = self.value(store, upper);
        assert_eq!(lv.shape(), uv.shape());
        assert_eq!(lv.ndim(), 2);
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), b);
        let ls = lv.as_slice().unwrap();
        let us = uv.as_slice().unwrap();
        let mut out = us.to_vec();
        for (row, &y) in labels.iter().enumerate() {
            assert!(y < c, "label out of range");
            out[row * c + y] = ls[row * c + y];
        }
        let ng = self.needs(lower) || self.needs(upper);
        self.push(
            Op::SelectByLabel { lower, upper, labels: labels.to_vec() },
            vec![ArrayD::from_shape_vec(IxDyn(&[b, c]), out).unwrap()],
            ng,
        )
    }

    /// Mean over the batch of cross-entropy computed from logits through
    /// log-sum-exp with max subtraction.
    pub fn cross_entropy_mean(
        &mut self,
        store: &ParamStore,
        logits: NodeRef,
        labels: &[usize],
    ) -> NodeRef {
        let v = self.value(store, logits);
        assert_eq!(v.ndim(), 2);
        let (b, c) = (v.shape()[0], v.shape()[1]);
        assert_eq!(labels.len(), b);
        let xs = v.as_slice().unwrap();
        let mut total = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            let z = &xs[row * c..(row + 1) * c];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|&t| (t - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        let ng = self.needs(logits);
        self.push(
            Op::CrossEntropyMean { logits, labels: labels.to_vec() },
            vec![scalar_arr(total / b as f64)],
            ng,
        )
    }

    /// Distance from the nearest kink (relu / abs / |W| / W+- / min / max
    /// tie) encountered anywhere in this forward pass. Smooth graphs return
    /// infinity. Used by the finite-difference checker to exclude
    /// evaluations at nondifferentiable points.
    pub fn min_kink_distance(&self, store: &ParamStore) -> f64 {
        let mut best = f64::INFINITY;
        let mut upd = |v: f64| {
            if v < best {
                best = v;
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    self.value(store, *x).iter().for_each(|v| upd(v.abs()));
                }
                Op::MinElem(a, b) | Op::MaxElem(a, b) => {
                    let va = self.value(store, *a);
                    let vb = self.value(store, *b);
                    va.iter().zip(vb.iter()).for_each(|(x, y)| upd((x - y).abs()));
                }
                Op::AffineMidRad { w, .. } => {
                    self.value(store, *w).iter().for_each(|v| upd(v.abs()));
                }
                Op::ReluMidRad { mu, r } => {
                    let m = self.value(store, *mu);
                    let rad = self.value(store, *r);
                    m.iter().zip(rad.iter()).for_each(|(a, b)| {
                        upd((a - b).abs());
                        upd((a + b).abs());
                    });
                }
                Op::IntervalAffine { wl, wu, .. } => {
                    self.value(store, *wl).iter().for_each(|v| upd(v.abs()));
                    self.value(store, *wu).iter().for_each(|v| upd(v.abs()));
                }
                _ => {}
            }
        }
        best
    }
}

fn scalar_arr(v: f64) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[1]), vec![v]).unwrap()
}

fn vec_arr(v: Vec<f64>) -> ArrayD<f64> {
    let n = v.len();
    ArrayD::from_shape_vec(IxDyn(&[n]), v).unwrap()
}

/// (batch, treat-as-vector) for an affine input shape.
fn affine_batch_of(shape: &[usize], in_dim: usize) -> (usize, bool) {
    match shape.len() {
        1 => {
            assert_eq!(shape[0], in_dim, "affine input dimension mismatch");
            (1, true)
        }
        2 => {
            assert_eq!(shape[1], in_dim, "affine input dimension mismatch");
            (shape[0], false)
        }
        _ => panic!("affine input must be 1-D or 2-D"),
    }
}

/// Runs a graph-building closure and returns its scalar output value, the
/// tape, and the output reference.
pub fn record_forward<F>(store: &ParamStore, f: F) -> (f64, Tape, NodeRef)
where
    F: FnOnce(&mut Tape, &ParamStore) -> NodeRef,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let v = tape.scalar(store, out);
    (v, tape, out)
}

/// Where a gradient buffer was taken from, so it can be restored.
enum SinkKey {
    Param(ParamId),
    Node(u32, u32),
    Absent,
}

/// Moves the gradient buffer for `r` out of the store / node-grad table
/// (allocating zeros if it does not exist yet), so fused kernels can write
/// multiple sinks without aliasing. Must be paired with `restore_sink`.
fn take_sink(
    tape: &Tape,
    store: &mut ParamStore,
    grads: &mut [Vec<Option<ArrayD<f64>>>],
    r: NodeRef,
    shape: &[usize],
) -> (SinkKey, ArrayD<f64>) {
    let node = &tape.nodes[r.node as usize];
    if !node.needs_grad {
        return (SinkKey::Absent, ArrayD::zeros(IxDyn(&[0])));
    }
    match &node.op {
        Op::Param(pid) => {
            let g = std::mem::replace(store.grad_mut(*pid), ArrayD::zeros(IxDyn(&[0])));
            assert_eq!(g.shape(), shape, "gradient sink taken twice or shape drift");
            (SinkKey::Param(*pid), g)
        }
        _ => {
            let slot = &mut grads[r.node as usize][r.slot as usize];
            let g = match slot.take() {
                Some(g) => g,
                None => ArrayD::zeros(IxDyn(shape)),
            };
            assert_eq!(g.shape(), shape, "gradient sink taken twice or shape drift");
            (SinkKey::Node(r.node, r.slot), g)
        }
    }
}

fn restore_sink(
    store: &mut ParamStore,
    grads: &mut [Vec<Option<ArrayD<f64>>>],
    key: SinkKey,
    arr: ArrayD<f64>,
) {
    match key {
        SinkKey::Param(pid) => *store.grad_mut(pid) = arr,
        SinkKey::Node(n, s) => grads[n as usize][s as usize] = Some(arr),
        SinkKey::Absent => {}
    }
}

fn accumulate(
    tape: &Tape,
    store: &mut ParamStore,
    grads: &mut [Vec<Option<ArrayD<f64>>>],
    r: NodeRef,
    contrib: ArrayD<f64>,
) {
    let node = &tape.nodes[r.node as usize];
    if !node.needs_grad {
        return;
    }
    match &node.op {
        Op::Param(pid) => {
            let g = store.grad_mut(*pid);
            debug_assert_eq!(g.shape(), contrib.shape());
            *g += &contrib;
        }
        _ => {
            let slot = &mut grads[r.node as usize][r.slot as usize];
            match slot {
                Some(g) => *g += &contrib,
                None => *slot = Some(contrib),
            }
        }
    }
}

/// Backpropagates from `loss` (a scalar node), accumulating gradients into
/// the store. The tape is cleared afterwards and cannot be replayed.
pub fn backward(tape: &mut Tape, store: &mut ParamStore, loss: NodeRef) -> Result<()> {
    if tape.consumed {
        return Err(Error::TapeConsumed);
    }

    let mut grads: Vec<Vec<Option<ArrayD<f64>>>> = tape
        .nodes
        .iter()
        .map(|n| vec![None; n.outs.len().max(1)])
        .collect();
    {
        let shape = tape.value(store, loss).raw_dim();
        assert_eq!(shape.size(), 1, "backward expects a scalar loss");
        grads[loss.node as usize][loss.slot as usize] = Some(ArrayD::ones(shape));
    }

    for idx in (0..tape.nodes.len()).rev() {
        let out_grads: Vec<Option<ArrayD<f64>>> = std::mem::take(&mut grads[idx]);
        if out_grads.iter().all(|g| g.is_none()) {
            continue;
        }
        let g0 = out_grads.first().and_then(|g| g.as_ref());
        match &tape.nodes[idx].op {
            Op::Param(_) | Op::Constant => {}
            Op::Add(a, b) => {
                if let Some(g) = g0 {
                    let (a, b, g) = (*a, *b, g.clone());
                    accumulate(tape, store, &mut grads, a, g.clone());
                    accumulate(tape, store, &mut grads, b, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = g0 {
                    let (a, b) = (*a, *b);
                    let neg = -g;
                    accumulate(tape, store, &mut grads, a, g.clone());
                    accumulate(tape, store, &mut grads, b, neg);
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = g0 {
                    let (a, b) = (*a, *b);
                    let ca = g * tape.value(store, b);
                    let cb = g * tape.value(store, a);
                    accumulate(tape, store, &mut grads, a, ca);
                    accumulate(tape, store, &mut grads, b, cb);
                }
            }
            Op::AddScaled(a, b, alpha, beta) => {
                if let Some(g) = g0 {
                    let (a, b, alpha, beta) = (*a, *b, *alpha, *beta);
                    let ca = g * alpha;
                    let cb = g * beta;
                    accumulate(tape, store, &mut grads, a, ca);
                    accumulate(tape, store, &mut grads, b, cb);
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = g0 {
                    let (x, c) = (*x, *c);
                    let contrib = g * c;
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::Cos(x) => {
                if let Some(g) = g0 {
                    let x = *x;
                    let contrib = g * &tape.value(store, x).mapv(|t| -t.sin());
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::Tanh(x) => {
                if let Some(g) = g0 {
                    let x = *x;
                    let contrib = g * &tape.nodes[idx].outs[0].mapv(|y| 1.0 - y * y);
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::Exp(x) => {
                if let Some(g) = g0 {
                    let x = *x;
                    let contrib = g * &tape.nodes[idx].outs[0];
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::Log(x) => {
                if let Some(g) = g0 {
                    let x = *x;
                    let contrib = g / tape.value(store, x);
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::Abs(x) => {
                if let Some(g) = g0 {
                    let x = *x;
                    let contrib = g * &tape.value(store, x).mapv(|t| {
                        if t > 0.0 {
                            1.0
                        } else if t < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::Relu(x) => {
                if let Some(g) = g0 {
                    let x = *x;
                    let contrib =
                        g * &tape.value(store, x).mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::MinElem(a, b) | Op::MaxElem(a, b) => {
                if let Some(g) = g0 {
                    let is_min = matches!(tape.nodes[idx].op, Op::MinElem(..));
                    let (a, b) = (*a, *b);
                    let mask_a = ndarray::Zip::from(tape.value(store, a))
                        .and(tape.value(store, b))
                        .map_collect(|&x, &y| {
                            let take_a = if is_min { x <= y } else { x >= y };
                            if take_a {
                                1.0
                            } else {
                                0.0
                            }
                        });
                    let ca = g * &mask_a;
                    let cb = g * &mask_a.mapv(|t| 1.0 - t);
                    accumulate(tape, store, &mut grads, a, ca);
                    accumulate(tape, store, &mut grads, b, cb);
                }
            }
            Op::Softmax(x) => {
                if let Some(g) = g0 {
                    let x = *x;
                    let y = &tape.nodes[idx].outs[0];
                    let gy: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                    let contrib = y * &(g - gy);
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = g0 {
                    let x = *x;
                    let dim = tape.value(store, x).raw_dim();
                    let go = g[[0]] / dim.size() as f64;
                    accumulate(tape, store, &mut grads, x, ArrayD::from_elem(dim, go));
                }
            }
            Op::SqL2(x) => {
                if let Some(g) = g0 {
                    let x = *x;
                    let contrib = tape.value(store, x) * (2.0 * g[[0]]);
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::SqL2Diff { x, target } => {
                if let Some(g) = g0 {
                    let x = *x;
                    let contrib = (tape.value(store, x) - target) * (2.0 * g[[0]]);
                    accumulate(tape, store, &mut grads, x, contrib);
                }
            }
            Op::MatVec { w, x } => {
                if let Some(g) = g0 {
                    let (w, x) = (*w, *x);
                    let wv = tape.value(store, w);
                    let xv = tape.value(store, x);
                    let (m, n) = (wv.shape()[0], wv.shape()[1]);
                    let gs = g.as_slice().unwrap();
                    let gw = if tape.needs(w) {
                        let xs = xv.as_slice().unwrap();
                        let mut gw = vec![0.0; m * n];
                        for j in 0..m {
                            for i in 0..n {
                                gw[j * n + i] = gs[j] * xs[i];
                            }
                        }
                        Some(ArrayD::from_shape_vec(IxDyn(&[m, n]), gw).unwrap())
                    } else {
                        None
                    };
                    let gx = if tape.needs(x) {
                        let ws = wv.as_slice().unwrap();
                        let mut gx = vec![0.0; n];
                        for j in 0..m {
                            let row = &ws[j * n..(j + 1) * n];
                            for i in 0..n {
                                gx[i] += gs[j] * row[i];
                            }
                        }
                        Some(vec_arr(gx))
                    } else {
                        None
                    };
                    if let Some(c) = gw {
                        accumulate(tape, store, &mut grads, w, c);
                    }
                    if let Some(c) = gx {
                        accumulate(tape, store, &mut grads, x, c);
                    }
                }
            }
            Op::SliceReshape { x, start } => {
                if let Some(g) = g0 {
                    let (x, start) = (*x, *start);
                    let dim = tape.value(store, x).raw_dim();
                    let mut full = ArrayD::zeros(dim);
                    {
                        let fs = full.as_slice_mut().unwrap();
                        let gsl = g.as_slice().unwrap();
                        fs[start..start + gsl.len()].copy_from_slice(gsl);
                    }
                    accumulate(tape, store, &mut grads, x, full);
                }
            }
            Op::SliceCols { x, start, len } => {
                if let Some(g) = g0 {
                    let (x, start, len) = (*x, *start, *len);
                    let shape = tape.value(store, x).shape().to_vec();
                    let (b, c) = (shape[0], shape[1]);
                    let mut full = vec![0.0; b * c];
                    let gsl = g.as_slice().unwrap();
                    for row in 0..b {
                        full[row * c + start..row * c + start + len]
                            .copy_from_slice(&gsl[row * len..(row + 1) * len]);
                    }
                    accumulate(
                        tape,
                        store,
                        &mut grads,
                        x,
                        ArrayD::from_shape_vec(IxDyn(&[b, c]), full).unwrap(),
                    );
                }
            }
            Op::PointAffine { w, b, x } => {
                if let Some(g) = g0 {
                    let (w, b, x) = (*w, *b, *x);
                    let g = g.clone();
                    let wv = tape.value(store, w).clone();
                    let xv = tape.value(store, x).clone();
                    let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                    let (batch, _) = affine_batch_of(xv.shape(), in_dim);
                    let (kw, mut gw) = take_sink(tape, store, &mut grads, w, &[out_dim, in_dim]);
                    let (kb, mut gb) = take_sink(tape, store, &mut grads, b, &[out_dim]);
                    let (kx, mut gx) = take_sink(tape, store, &mut grads, x, xv.shape());
                    kernels::point_affine_bwd(
                        wv.as_slice().unwrap(),
                        out_dim,
                        in_dim,
                        xv.as_slice().unwrap(),
                        batch,
                        g.as_slice().unwrap(),
                        slice_of(&kw, &mut gw),
                        slice_of(&kb, &mut gb),
                        slice_of(&kx, &mut gx),
                    );
                    restore_sink(store, &mut grads, kw, gw);
                    restore_sink(store, &mut grads, kb, gb);
                    restore_sink(store, &mut grads, kx, gx);
                }
            }
            Op::IntervalAffine { wl, wu, bl, bu, zl, zu } => {
                let (wl, wu, bl, bu, zl, zu) = (*wl, *wu, *bl, *bu, *zl, *zu);
                let wlv = tape.value(store, wl).clone();
                let wuv = tape.value(store, wu).clone();
                let zlv = tape.value(store, zl).clone();
                let zuv = tape.value(store, zu).clone();
                let (out_dim, in_dim) = (wlv.shape()[0], wlv.shape()[1]);
                let (batch, _) = affine_batch_of(zlv.shape(), in_dim);
                let out_shape = tape.nodes[idx].outs[0].raw_dim();
                let gl = out_grads[0].clone().unwrap_or_else(|| ArrayD::zeros(out_shape.clone()));
                let gu = out_grads[1].clone().unwrap_or_else(|| ArrayD::zeros(out_shape));
                let (kwl, mut gwl) = take_sink(tape, store, &mut grads, wl, &[out_dim, in_dim]);
                let (kwu, mut gwu) = take_sink(tape, store, &mut grads, wu, &[out_dim, in_dim]);
                let (kbl, mut gbl) = take_sink(tape, store, &mut grads, bl, &[out_dim]);
                let (kbu, mut gbu) = take_sink(tape, store, &mut grads, bu, &[out_dim]);
                let (kzl, mut gzl) = take_sink(tape, store, &mut grads, zl, zlv.shape());
                let (kzu, mut gzu) = take_sink(tape, store, &mut grads, zu, zuv.shape());
                let mut sinks = IntervalAffineGrads {
                    wl: slice_of(&kwl, &mut gwl),
                    wu: slice_of(&kwu, &mut gwu),
                    bl: slice_of(&kbl, &mut gbl),
                    bu: slice_of(&kbu, &mut gbu),
                    zl: slice_of(&kzl, &mut gzl),
                    zu: slice_of(&kzu, &mut gzu),
                };
                kernels::interval_affine_bwd(
                    wlv.as_slice().unwrap(),
                    wuv.as_slice().unwrap(),
                    out_dim,
                    in_dim,
                    zlv.as_slice().unwrap(),
                    zuv.as_slice().unwrap(),
                    batch,
                    gl.as_slice().unwrap(),
                    gu.as_slice().unwrap(),
                    &mut sinks,
                );
                drop(sinks);
                restore_sink(store, &mut grads, kwl, gwl);
                restore_sink(store, &mut grads, kwu, gwu);
                restore_sink(store, &mut grads, kbl, gbl);
                restore_sink(store, &mut grads, kbu, gbu);
                restore_sink(store, &mut grads, kzl, gzl);
                restore_sink(store, &mut grads, kzu, gzu);
            }
            Op::AffineMidRad { w, b, mu, r } => {
                let (w, b, mu, r) = (*w, *b, *mu, *r);
                let out_dim = tape.nodes[idx].outs[0].len();
                let gm = out_grads[0]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(&[out_dim])));
                let gr = out_grads[1]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(&[out_dim])));
                let wv = tape.value(store, w).clone();
                let muv = tape.value(store, mu).clone();
                let rv = tape.value(store, r).clone();
                let in_dim = muv.len();
                let (kw, mut gw) = take_sink(tape, store, &mut grads, w, &[out_dim, in_dim]);
                let (kb, mut gb) = take_sink(tape, store, &mut grads, b, &[out_dim]);
                let (kmu, mut gmu) = take_sink(tape, store, &mut grads, mu, &[in_dim]);
                let (kr, mut grd) = take_sink(tape, store, &mut grads, r, &[in_dim]);
                let mut sinks = MidRadGrads {
                    w: slice_of(&kw, &mut gw),
                    b: slice_of(&kb, &mut gb),
                    mu: slice_of(&kmu, &mut gmu),
                    r: slice_of(&kr, &mut grd),
                };
                kernels::midrad_affine_bwd(
                    wv.as_slice().unwrap(),
                    out_dim,
                    in_dim,
                    muv.as_slice().unwrap(),
                    rv.as_slice().unwrap(),
                    gm.as_slice().unwrap(),
                    gr.as_slice().unwrap(),
                    &mut sinks,
                );
                drop(sinks);
                restore_sink(store, &mut grads, kw, gw);
                restore_sink(store, &mut grads, kb, gb);
                restore_sink(store, &mut grads, kmu, gmu);
                restore_sink(store, &mut grads, kr, grd);
            }
            Op::ReluMidRad { mu, r } => {
                let (mu, r) = (*mu, *r);
                let shape = tape.value(store, mu).raw_dim();
                let gm = out_grads[0].clone().unwrap_or_else(|| ArrayD::zeros(shape.clone()));
                let gr = out_grads[1].clone().unwrap_or_else(|| ArrayD::zeros(shape.clone()));
                let mut dmu = ArrayD::zeros(shape.clone());
                let mut dr = ArrayD::zeros(shape);
                // l = relu(mu - r), u = relu(mu + r);
                // mu' = (l + u)/2, r' = (u - l)/2
                // dl = (gm - gr)/2, du = (gm + gr)/2
                ndarray::Zip::from(&mut dmu)
                    .and(&mut dr)
                    .and(tape.value(store, mu))
                    .and(tape.value(store, r))
                    .and(&gm)
                    .and(&gr)
                    .for_each(|dm, drad, &m, &rad, &g_m, &g_r| {
                        let sl = if m - rad > 0.0 { 1.0 } else { 0.0 };
                        let su = if m + rad > 0.0 { 1.0 } else { 0.0 };
                        let dl = 0.5 * (g_m - g_r);
                        let du = 0.5 * (g_m + g_r);
                        *dm = dl * sl + du * su;
                        *drad = -dl * sl + du * su;
                    });
                accumulate(tape, store, &mut grads, mu, dmu);
                accumulate(tape, store, &mut grads, r, dr);
            }
            Op::BoundsFromMidRad { mu, r } => {
                let (mu, r) = (*mu, *r);
                let shape = tape.value(store, mu).raw_dim();
                let gl = out_grads[0].clone().unwrap_or_else(|| ArrayD::zeros(shape.clone()));
                let gu = out_grads[1].clone().unwrap_or_else(|| ArrayD::zeros(shape));
                let cmu = &gl + &gu;
                let cr = &gu - &gl;
                accumulate(tape, store, &mut grads, mu, cmu);
                accumulate(tape, store, &mut grads, r, cr);
            }
            Op::SelectByLabel { lower, upper, labels } => {
                if let Some(g) = g0 {
                    let (lower, upper) = (*lower, *upper);
                    let c = g.shape()[1];
                    let gs = g.as_slice().unwrap();
                    let mut gl = vec![0.0; gs.len()];
                    let mut gu = gs.to_vec();
                    for (row, &y) in labels.iter().enumerate() {
                        gl[row * c + y] = gs[row * c + y];
                        gu[row * c + y] = 0.0;
                    }
                    let shape = g.shape().to_vec();
                    let cl = ArrayD::from_shape_vec(IxDyn(&shape), gl).unwrap();
                    let cu = ArrayD::from_shape_vec(IxDyn(&shape), gu).unwrap();
                    accumulate(tape, store, &mut grads, lower, cl);
                    accumulate(tape, store, &mut grads, upper, cu);
                }
            }
            Op::CrossEntropyMean { logits, labels } => {
                if let Some(g) = g0 {
                    let logits = *logits;
                    let go = g[[0]];
                    let v = tape.value(store, logits);
                    let (b, c) = (v.shape()[0], v.shape()[1]);
                    let xs = v.as_slice().unwrap();
                    let mut gl = vec![0.0; b * c];
                    let scale = go / b as f64;
                    for (row, &y) in labels.iter().enumerate() {
                        let z = &xs[row * c..(row + 1) * c];
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = z.iter().map(|&t| (t - m).exp()).collect();
                        let s: f64 = exps.iter().sum();
                        for i in 0..c {
                            let p = exps[i] / s;
                            gl[row * c + i] = scale * (p - if i == y { 1.0 } else { 0.0 });
                        }
                    }
                    let contrib = ArrayD::from_shape_vec(IxDyn(&[b, c]), gl).unwrap();
                    accumulate(tape, store, &mut grads, logits, contrib);
                }
            }
        }
    }

    // The tape is single-use: free node values and mark consumed.
    tape.nodes.clear();
    tape.consumed = true;
    Ok(())
}

fn slice_of<'a>(key: &SinkKey, arr: &'a mut ArrayD<f64>) -> Option<&'a mut [f64]> {
    match key {
        SinkKey::Absent => None,
        _ => Some(arr.as_slice_mut().expect("contiguous gradient buffer")),
    }
}

/// Per-parameter gradient check result.
#[derive(Debug, Clone)]
pub struct GradCheckParam {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
}

/// Report from [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<GradCheckParam>,
    pub max_rel_err: f64,
    pub excluded: usize,
    pub pass: bool,
}

/// Compares analytic gradients against central finite differences for every
/// coordinate of every parameter. Evaluations closer than `kink_guard` to a
/// relu/abs/min/max kink are excluded (counted, not failed).
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    graph: F,
    step: f64,
    tol: f64,
    kink_guard: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> NodeRef,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    store.zero_grads();
    let (_, mut tape, out) = record_forward(store, &graph);
    let base_kink = tape.min_kink_distance(store);
    backward(&mut tape, store, out)?;
    let analytic: Vec<ArrayD<f64>> = store.ids().map(|id| store.grad(id).clone()).collect();

    let mut params = Vec::new();
    let mut excluded_total = 0usize;
    let mut global_max = 0.0f64;
    let ids: Vec<ParamId> = store.ids().collect();
    for (k, id) in ids.iter().enumerate() {
        let n = store.value(*id).len();
        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        let mut excluded = 0usize;
        if base_kink < kink_guard {
            excluded += n;
        } else {
            for i in 0..n {
                let orig = store.value(*id).as_slice().unwrap()[i];
                let eval = |store: &mut ParamStore, v: f64| {
                    store.value_mut(*id).as_slice_mut().unwrap()[i] = v;
                    let (val, tape, _) = record_forward(store, &graph);
                    let kink = tape.min_kink_distance(store);
                    (val, kink)
                };
                let (fp, kp) = eval(store, orig + step);
                let (fm, km) = eval(store, orig - step);
                store.value_mut(*id).as_slice_mut().unwrap()[i] = orig;
                if kp < kink_guard || km < kink_guard {
                    excluded += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * step);
                let a = analytic[k].as_slice().unwrap()[i];
                let denom = a.abs().max(numeric.abs());
                let rel = if denom < 1e-6 {
                    // Both effectively zero given finite-difference noise.
                    if (a - numeric).abs() < 1e-6 {
                        0.0
                    } else {
                        (a - numeric).abs()
                    }
                } else {
                    (a - numeric).abs() / denom
                };
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
        excluded_total += excluded;
        global_max = global_max.max(max_rel);
        params.push(GradCheckParam {
            name: store.name(*id).to_string(),
            max_rel_err: max_rel,
            checked,
            excluded,
        });
    }
    Ok(GradCheckReport {
        params,
        max_rel_err: global_max,
        excluded: excluded_total,
        pass: global_max < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_param(store: &mut ParamStore, name: &str, v: &[f64]) -> ParamId {
        store.register(name, vec_arr(v.to_vec()))
    }

    #[test]
    fn square_value_and_grad() {
        let mut store = ParamStore::new();
        let w = vec_param(&mut store, "w", &[3.0]);
        let (val, mut tape, out) = record_forward(&store, |t, s| {
            let x = t.param(s, w);
            let sq = t.mul(s, x, x);
            t.mean(s, sq)
        });
        assert_eq!(val, 9.0);
        backward(&mut tape, &mut store, out).unwrap();
        assert_eq!(store.grad(w)[[0]], 6.0);
    }

    #[test]
    fn abs_value_and_cos_grad() {
        let mut store = ParamStore::new();
        let w = vec_param(&mut store, "w", &[-2.0]);
        let (val, _, _) = record_forward(&store, |t, s| {
            let x = t.param(s, w);
            let a = t.abs(s, x);
            t.mean(s, a)
        });
        assert_eq!(val, 2.0);

        let c = vec_param(&mut store, "c", &[0.0]);
        let (val, mut tape, out) = record_forward(&store, |t, s| {
            let x = t.param(s, c);
            let y = t.cos(s, x);
            t.mean(s, y)
        });
        assert_eq!(val, 1.0);
        backward(&mut tape, &mut store, out).unwrap();
        assert_eq!(store.grad(c)[[0]], 0.0); // -sin(0)
    }

    #[test]
    fn tape_is_single_use() {
        let mut store = ParamStore::new();
        let w = vec_param(&mut store, "w", &[1.0]);
        let (_, mut tape, out) = record_forward(&store, |t, s| {
            let x = t.param(s, w);
            t.sq_l2(s, x)
        });
        backward(&mut tape, &mut store, out).unwrap();
        assert!(matches!(
            backward(&mut tape, &mut store, out),
            Err(Error::TapeConsumed)
        ));
    }

    #[test]
    fn constant_subgraph_has_zero_grad() {
        let mut store = ParamStore::new();
        let w = vec_param(&mut store, "w", &[2.0]);
        let (_, mut tape, out) = record_forward(&store, |t, s| {
            let x = t.param(s, w);
            let k = t.constant_scalar(5.0);
            let k2 = t.mul(s, k, k); // constant subgraph
            let y = t.add(s, x, k2);
            t.mean(s, y)
        });
        backward(&mut tape, &mut store, out).unwrap();
        assert_eq!(store.grad(w)[[0]], 1.0);
    }

    #[test]
    fn gradient_linearity() {
        // grad(alpha f + beta g) = alpha grad f + beta grad g
        let mut store = ParamStore::new();
        let w = vec_param(&mut store, "w", &[0.7, -1.3]);
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, s.id("w").unwrap());
            t.sq_l2(s, x)
        };
        let g = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, s.id("w").unwrap());
            let c = t.cos(s, x);
            t.mean(s, c)
        };
        let grad_of = |store: &mut ParamStore, h: &dyn Fn(&mut Tape, &ParamStore) -> NodeRef| {
            store.zero_grads();
            let (_, mut tape, out) = record_forward(store, h);
            backward(&mut tape, store, out).unwrap();
            store.grad(w).clone()
        };
        let gf = grad_of(&mut store, &f);
        let gg = grad_of(&mut store, &g);
        let (alpha, beta) = (1.7, -0.3);
        let combo = |t: &mut Tape, s: &ParamStore| {
            let a = f(t, s);
            let b = g(t, s);
            t.add_scaled(s, a, b, alpha, beta)
        };
        let gc = grad_of(&mut store, &combo);
        for i in 0..2 {
            let want = alpha * gf[[i]] + beta * gg[[i]];
            assert!((gc[[i]] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn finite_diff_quadratic_passes_tightly() {
        let mut store = ParamStore::new();
        vec_param(&mut store, "w", &[0.3, -0.8, 1.1]);
        let report = finite_diff_check(
            &mut store,
            |t, s| {
                let x = t.param(s, s.id("w").unwrap());
                t.sq_l2(s, x)
            },
            1e-5,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn finite_diff_excludes_kinks() {
        let mut store = ParamStore::new();
        vec_param(&mut store, "w", &[0.0]); // exactly at the relu kink
        let report = finite_diff_check(
            &mut store,
            |t, s| {
                let x = t.param(s, s.id("w").unwrap());
                let r = t.relu(s, x);
                t.mean(s, r)
            },
            1e-5,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert_eq!(report.excluded, 1);
        assert!(report.pass);
    }

    #[test]
    fn softmax_grad_matches_fd() {
        let mut store = ParamStore::new();
        vec_param(&mut store, "w", &[0.3, -0.4, 0.9, 0.1]);
        let report = finite_diff_check(
            &mut store,
            |t, s| {
                let x = t.param(s, s.id("w").unwrap());
                let sm = t.softmax(s, x);
                let lg = t.log(s, sm);
                let c = t.cos(s, lg);
                t.mean(s, c)
            },
            1e-5,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn matvec_and_minmax_grads_match_fd() {
        let mut store = ParamStore::new();
        store.register(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.5, -1.0, 0.25, 2.0, 0.7, -0.3]).unwrap(),
        );
        vec_param(&mut store, "x", &[0.4, -0.2, 1.3]);
        vec_param(&mut store, "y", &[0.9, -0.8]);
        let report = finite_diff_check(
            &mut store,
            |t, s| {
                let w = t.param(s, s.id("w").unwrap());
                let x = t.param(s, s.id("x").unwrap());
                let y = t.param(s, s.id("y").unwrap());
                let mv = t.matvec(s, w, x);
                let mn = t.min_elem(s, mv, y);
                let mx = t.max_elem(s, mv, y);
                let sum = t.add(s, mn, mx);
                let e = t.exp(s, sum);
                t.mean(s, e)
            },
            1e-6,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn cross_entropy_grad_matches_fd() {
        let mut store = ParamStore::new();
        store.register(
            "logits",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.2, -0.7, 1.4, 0.0, 0.3, -0.2]).unwrap(),
        );
        let report = finite_diff_check(
            &mut store,
            |t, s| {
                let x = t.param(s, s.id("logits").unwrap());
                t.cross_entropy_mean(s, x, &[2, 0])
            },
            1e-6,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
