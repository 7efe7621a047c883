//! Interval tensors and the bound-propagation primitives.
//!
//! An [`IntervalTensor`] is a pair of same-shape arrays `lower <= upper`
//! holding a coordinatewise hyperrectangle. All operations here are pure and
//! the results are plain (outward rounding is deliberately not performed;
//! guarantees downstream are stated and tested at 64-bit float tolerance).

use ndarray::{ArrayD, ArrayViewD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;

/// Hyperrectangle carrier: elementwise `[lower, upper]` bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTensor {
    lower: ArrayD<f64>,
    upper: ArrayD<f64>,
}

/// Center/halfwidth view of an interval: `mid = (l+u)/2`, `radius = (u-l)/2`.
#[derive(Debug, Clone)]
pub struct MidRadView {
    pub mid: ArrayD<f64>,
    pub radius: ArrayD<f64>,
}

impl MidRadView {
    /// Reconstructs `[mid - radius, mid + radius]`.
    pub fn to_interval(&self) -> IntervalTensor {
        IntervalTensor {
            lower: &self.mid - &self.radius,
            upper: &self.mid + &self.radius,
        }
    }
}

impl IntervalTensor {
    /// Builds an interval from bounds, rejecting shape mismatches and any
    /// coordinate with `lower > upper` (never silently swapped).
    pub fn new(lower: ArrayD<f64>, upper: ArrayD<f64>) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::ShapeMismatch {
                context: "IntervalTensor::new",
                expected: lower.shape().to_vec(),
                got: upper.shape().to_vec(),
            });
        }
        for (index, (&l, &u)) in lower.iter().zip(upper.iter()).enumerate() {
            if !(l <= u) {
                return Err(Error::BoundOrder { index, lower: l, upper: u });
            }
        }
        Ok(Self { lower, upper })
    }

    /// Degenerate interval `[x, x]`.
    pub fn from_point(x: ArrayD<f64>) -> Self {
        Self { lower: x.clone(), upper: x }
    }

    /// `[mid - radius, mid + radius]`; radius must be nonnegative.
    pub fn from_mid_rad(mid: &ArrayD<f64>, radius: &ArrayD<f64>) -> Result<Self> {
        if mid.shape() != radius.shape() {
            return Err(Error::ShapeMismatch {
                context: "IntervalTensor::from_mid_rad",
                expected: mid.shape().to_vec(),
                got: radius.shape().to_vec(),
            });
        }
        Self::new(mid - radius, mid + radius)
    }

    pub fn lower(&self) -> ArrayViewD<'_, f64> {
        self.lower.view()
    }

    pub fn upper(&self) -> ArrayViewD<'_, f64> {
        self.upper.view()
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// Elementwise width `upper - lower`.
    pub fn width(&self) -> ArrayD<f64> {
        &self.upper - &self.lower
    }

    pub fn mid_rad(&self) -> MidRadView {
        MidRadView {
            mid: (&self.lower + &self.upper) / 2.0,
            radius: (&self.upper - &self.lower) / 2.0,
        }
    }

    /// True if every coordinate of `p` lies inside, with `slack` absolute
    /// tolerance on each side.
    pub fn contains_point(&self, p: ArrayViewD<'_, f64>, slack: f64) -> bool {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .zip(p.iter())
            .all(|((&l, &u), &x)| x >= l - slack && x <= u + slack)
    }

    /// True if `other` is contained in `self` coordinatewise.
    pub fn contains(&self, other: &IntervalTensor, slack: f64) -> bool {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .zip(other.lower.iter().zip(other.upper.iter()))
            .all(|((&l, &u), (&ol, &ou))| ol >= l - slack && ou <= u + slack)
    }

    fn check_same_shape(&self, other: &IntervalTensor, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Elementwise `[a_l + b_l, a_u + b_u]`.
pub fn interval_add(a: &IntervalTensor, b: &IntervalTensor) -> Result<IntervalTensor> {
    a.check_same_shape(b, "interval_add")?;
    Ok(IntervalTensor {
        lower: &a.lower + &b.lower,
        upper: &a.upper + &b.upper,
    })
}

/// Elementwise product: min/max over the four corner products.
pub fn interval_mul(a: &IntervalTensor, b: &IntervalTensor) -> Result<IntervalTensor> {
    a.check_same_shape(b, "interval_mul")?;
    let mut lower = ArrayD::zeros(a.lower.raw_dim());
    let mut upper = ArrayD::zeros(a.lower.raw_dim());
    for (((out_l, out_u), (&al, &au)), (&bl, &bu)) in lower
        .iter_mut()
        .zip(upper.iter_mut())
        .zip(a.lower.iter().zip(a.upper.iter()))
        .zip(b.lower.iter().zip(b.upper.iter()))
    {
        let c = [al * bl, al * bu, au * bl, au * bu];
        *out_l = c.iter().cloned().fold(f64::INFINITY, f64::min);
        *out_u = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(IntervalTensor { lower, upper })
}

/// Elementwise `[max(l,0), max(u,0)]`.
pub fn relu_interval(z: &IntervalTensor) -> IntervalTensor {
    IntervalTensor {
        lower: z.lower.mapv(|x| x.max(0.0)),
        upper: z.upper.mapv(|x| x.max(0.0)),
    }
}

/// Coordinatewise intersection `[max(a_l,b_l), min(a_u,b_u)]`.
///
/// Fails with the violating coordinates if empty anywhere.
pub fn intersect(a: &IntervalTensor, b: &IntervalTensor) -> Result<IntervalTensor> {
    a.check_same_shape(b, "intersect")?;
    let lower: ArrayD<f64> = ndarray::Zip::from(&a.lower)
        .and(&b.lower)
        .map_collect(|&x, &y| x.max(y));
    let upper: ArrayD<f64> = ndarray::Zip::from(&a.upper)
        .and(&b.upper)
        .map_collect(|&x, &y| x.min(y));
    let coords: Vec<usize> = lower
        .iter()
        .zip(upper.iter())
        .enumerate()
        .filter(|(_, (&l, &u))| l > u)
        .map(|(i, _)| i)
        .collect();
    if !coords.is_empty() {
        return Err(Error::EmptyIntersection { coords });
    }
    Ok(IntervalTensor { lower, upper })
}

/// Uniform sample inside the interval; deterministic for a fixed seed.
/// Degenerate coordinates return exactly their point value.
pub fn sample_point(a: &IntervalTensor, rng_seed: u64) -> ArrayD<f64> {
    let mut rng = rng::substream(rng_seed, "interval.sample_point");
    let mut out = ArrayD::zeros(a.lower.raw_dim());
    for ((o, &l), &u) in out.iter_mut().zip(a.lower.iter()).zip(a.upper.iter()) {
        // Every coordinate consumes one draw so the stream layout does not
        // depend on which coordinates happen to be degenerate.
        let t: f64 = rng.random::<f64>();
        *o = if l == u { l } else { (l + t * (u - l)).clamp(l, u) };
    }
    out
}

/// Interval affine transform with interval weights and nonnegative interval
/// activations:
///
///   lower = Wl+ . zl - Wl- . zu + bl
///   upper = Wu+ . zu - Wu- . zl + bu
///
/// where `W+ = max(W,0)`, `W- = max(-W,0)` elementwise. The result contains
/// `W z + b` for every pointwise selection from the three boxes.
pub fn affine_interval_weights(
    z: &IntervalTensor,
    w: &IntervalTensor,
    b: &IntervalTensor,
) -> Result<IntervalTensor> {
    if w.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "affine_interval_weights: W must be a matrix",
            expected: vec![2],
            got: w.shape().to_vec(),
        });
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if z.len() != in_dim {
        return Err(Error::ShapeMismatch {
            context: "affine_interval_weights: z vs W columns",
            expected: vec![in_dim],
            got: z.shape().to_vec(),
        });
    }
    if b.len() != out_dim {
        return Err(Error::ShapeMismatch {
            context: "affine_interval_weights: b vs W rows",
            expected: vec![out_dim],
            got: b.shape().to_vec(),
        });
    }
    if let Some((index, &value)) = z
        .lower
        .iter()
        .enumerate()
        .find(|(_, &v)| v < 0.0)
    {
        return Err(Error::NegativeActivation { index, value });
    }

    let mut out_l = vec![0.0; out_dim];
    let mut out_u = vec![0.0; out_dim];
    kernels::interval_affine_fwd(
        w.lower.as_slice().expect("contiguous"),
        w.upper.as_slice().expect("contiguous"),
        b.lower.as_slice().expect("contiguous"),
        b.upper.as_slice().expect("contiguous"),
        out_dim,
        in_dim,
        z.lower.as_slice().expect("contiguous"),
        z.upper.as_slice().expect("contiguous"),
        1,
        &mut out_l,
        &mut out_u,
    );
    IntervalTensor::new(
        ArrayD::from_shape_vec(ndarray::IxDyn(&[out_dim]), out_l).unwrap(),
        ArrayD::from_shape_vec(ndarray::IxDyn(&[out_dim]), out_u).unwrap(),
    )
}

/// Affine transform with point weights and a signed interval activation,
/// propagated in mid/radius form: `mu' = W mu + b`, `r' = |W| r`.
pub fn affine_point_weights(
    z: &IntervalTensor,
    w: ArrayViewD<'_, f64>,
    b: ArrayViewD<'_, f64>,
) -> Result<IntervalTensor> {
    if w.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "affine_point_weights: W must be a matrix",
            expected: vec![2],
            got: w.shape().to_vec(),
        });
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if z.len() != in_dim || b.len() != out_dim {
        return Err(Error::ShapeMismatch {
            context: "affine_point_weights: dimensions",
            expected: vec![out_dim, in_dim],
            got: vec![b.len(), z.len()],
        });
    }
    let mr = z.mid_rad();
    let mut mu_out = vec![0.0; out_dim];
    let mut r_out = vec![0.0; out_dim];
    let w_std = w.as_standard_layout();
    let b_std = b.as_standard_layout();
    kernels::midrad_affine_fwd(
        w_std.as_slice().expect("contiguous"),
        b_std.as_slice().expect("contiguous"),
        out_dim,
        in_dim,
        mr.mid.as_slice().expect("contiguous"),
        mr.radius.as_slice().expect("contiguous"),
        &mut mu_out,
        &mut r_out,
    );
    let mu = ArrayD::from_shape_vec(ndarray::IxDyn(&[out_dim]), mu_out).unwrap();
    let r = ArrayD::from_shape_vec(ndarray::IxDyn(&[out_dim]), r_out).unwrap();
    IntervalTensor::from_mid_rad(&mu, &r)
}
