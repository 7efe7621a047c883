//! Property tests for the interval primitives: inclusion monotonicity,
//! Monte Carlo soundness of the affine transforms, degenerate reduction,
//! and mid/radius reconstruction.

use intervalnet::interval::{
    affine_interval_weights, affine_point_weights, interval_add, interval_mul, relu_interval,
    sample_point, IntervalTensor,
};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;

fn iv_from(lo: Vec<f64>, width: Vec<f64>) -> IntervalTensor {
    let n = lo.len();
    let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
    IntervalTensor::new(
        ArrayD::from_shape_vec(IxDyn(&[n]), lo).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[n]), hi).unwrap(),
    )
    .unwrap()
}

/// Strategy: paired (inner, outer) intervals with inner ⊆ outer.
fn nested_pair(n: usize) -> impl Strategy<Value = (IntervalTensor, IntervalTensor)> {
    (
        proptest::collection::vec(-5.0..5.0f64, n),
        proptest::collection::vec(0.0..3.0f64, n),
        proptest::collection::vec(0.0..1.0f64, n),
        proptest::collection::vec(0.0..1.0f64, n),
    )
        .prop_map(|(lo, width, shrink_lo, shrink_hi)| {
            let outer = iv_from(lo.clone(), width.clone());
            // inner: shrink from both ends without crossing
            let inner_lo: Vec<f64> = (0..lo.len())
                .map(|i| lo[i] + width[i] * shrink_lo[i] * 0.5)
                .collect();
            let inner_w: Vec<f64> = (0..lo.len())
                .map(|i| {
                    let remaining = width[i] * (1.0 - shrink_lo[i] * 0.5);
                    remaining * (1.0 - shrink_hi[i] * 0.5)
                })
                .collect();
            (iv_from(inner_lo, inner_w), outer)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn add_inclusion_monotone(
        (a_in, a_out) in nested_pair(4),
        (b_in, b_out) in nested_pair(4),
    ) {
        let inner = interval_add(&a_in, &b_in).unwrap();
        let outer = interval_add(&a_out, &b_out).unwrap();
        prop_assert!(outer.contains(&inner, 1e-12));
    }

    #[test]
    fn mul_inclusion_monotone(
        (a_in, a_out) in nested_pair(4),
        (b_in, b_out) in nested_pair(4),
    ) {
        let inner = interval_mul(&a_in, &b_in).unwrap();
        let outer = interval_mul(&a_out, &b_out).unwrap();
        prop_assert!(outer.contains(&inner, 1e-12));
    }

    #[test]
    fn relu_preserves_inclusion((a_in, a_out) in nested_pair(6)) {
        let inner = relu_interval(&a_in);
        let outer = relu_interval(&a_out);
        prop_assert!(outer.contains(&inner, 0.0));
        prop_assert!(inner.lower().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mul_contains_sampled_products(
        (a, _) in nested_pair(3),
        (b, _) in nested_pair(3),
        seed in 0u64..1_000,
    ) {
        let prod = interval_mul(&a, &b).unwrap();
        let pa = sample_point(&a, seed);
        let pb = sample_point(&b, seed.wrapping_add(1));
        for i in 0..3 {
            let v = pa[[i]] * pb[[i]];
            let slack = 4.0 * f64::EPSILON * v.abs().max(1.0);
            prop_assert!(v >= prod.lower()[[i]] - slack && v <= prod.upper()[[i]] + slack);
        }
    }

    #[test]
    fn midrad_roundtrip_within_one_ulp((a, _) in nested_pair(5)) {
        // One ulp at the scale of the bounds: mid and radius both round at
        // the magnitude of the larger endpoint.
        let rt = a.mid_rad().to_interval();
        for i in 0..a.len() {
            let (l, u) = (a.lower()[[i]], a.upper()[[i]]);
            let ulp = f64::EPSILON * l.abs().max(u.abs()).max(f64::MIN_POSITIVE);
            prop_assert!((l - rt.lower()[[i]]).abs() <= ulp);
            prop_assert!((u - rt.upper()[[i]]).abs() <= ulp);
        }
    }

    #[test]
    fn degenerate_add_mul_bitwise(values in proptest::collection::vec(-10.0..10.0f64, 4)) {
        let a = IntervalTensor::from_point(
            ArrayD::from_shape_vec(IxDyn(&[2]), values[..2].to_vec()).unwrap(),
        );
        let b = IntervalTensor::from_point(
            ArrayD::from_shape_vec(IxDyn(&[2]), values[2..].to_vec()).unwrap(),
        );
        let sum = interval_add(&a, &b).unwrap();
        let prod = interval_mul(&a, &b).unwrap();
        for i in 0..2 {
            prop_assert_eq!(sum.lower()[[i]], values[i] + values[2 + i]);
            prop_assert_eq!(sum.lower()[[i]], sum.upper()[[i]]);
            prop_assert_eq!(prod.lower()[[i]], values[i] * values[2 + i]);
            prop_assert_eq!(prod.lower()[[i]], prod.upper()[[i]]);
        }
    }
}

/// Monte Carlo soundness of the interval-weight affine: the output box
/// contains the pointwise product for every sampled selection of W, z, b.
/// Spec-pinned counts: dimensions <= 8, 1000 trials, 100 selections each,
/// 4-ulp slack.
#[test]
fn affine_interval_weights_mc_soundness() {
    let mut escapes = 0usize;
    for trial in 0..1000u64 {
        let mut rng_seed = trial.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = || {
            rng_seed ^= rng_seed << 13;
            rng_seed ^= rng_seed >> 7;
            rng_seed ^= rng_seed << 17;
            (rng_seed >> 11) as f64 / (1u64 << 53) as f64
        };
        let out_dim = 1 + (next() * 8.0) as usize;
        let in_dim = 1 + (next() * 8.0) as usize;

        let mut wl = Vec::new();
        let mut wu = Vec::new();
        for _ in 0..out_dim * in_dim {
            let c = next() * 4.0 - 2.0;
            let r = next() * 0.8;
            wl.push(c - r);
            wu.push(c + r);
        }
        let w = IntervalTensor::new(
            ArrayD::from_shape_vec(IxDyn(&[out_dim, in_dim]), wl).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[out_dim, in_dim]), wu).unwrap(),
        )
        .unwrap();
        let mut zl = Vec::new();
        let mut zu = Vec::new();
        for _ in 0..in_dim {
            let l = next() * 2.0; // nonnegative
            zl.push(l);
            zu.push(l + next());
        }
        let z = IntervalTensor::new(
            ArrayD::from_shape_vec(IxDyn(&[in_dim]), zl).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[in_dim]), zu).unwrap(),
        )
        .unwrap();
        let mut bl = Vec::new();
        let mut bu = Vec::new();
        for _ in 0..out_dim {
            let c = next() - 0.5;
            let r = next() * 0.3;
            bl.push(c - r);
            bu.push(c + r);
        }
        let b = IntervalTensor::new(
            ArrayD::from_shape_vec(IxDyn(&[out_dim]), bl).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[out_dim]), bu).unwrap(),
        )
        .unwrap();

        let out = affine_interval_weights(&z, &w, &b).unwrap();

        for s in 0..100u64 {
            let ws = sample_point(&w, trial << 8 | s);
            let zs = sample_point(&z, (trial << 8 | s).wrapping_add(7_777_777));
            let bs = sample_point(&b, (trial << 8 | s).wrapping_add(15_555_555));
            for j in 0..out_dim {
                let mut acc = bs[[j]];
                for i in 0..in_dim {
                    acc += ws[[j, i]] * zs[[i]];
                }
                let slack = 4.0 * f64::EPSILON * acc.abs().max(1.0);
                if acc < out.lower()[[j]] - slack || acc > out.upper()[[j]] + slack {
                    escapes += 1;
                }
            }
        }
    }
    assert_eq!(escapes, 0, "pointwise selections escaped the affine bounds");
}

/// Inclusion monotonicity of both affine forms: widening any input widens
/// (never shrinks) the output.
#[test]
fn affine_inclusion_monotonicity() {
    let w_inner = IntervalTensor::new(
        ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.4, -0.9, 1.1, 0.2]).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.6, -0.7, 1.3, 0.5]).unwrap(),
    )
    .unwrap();
    let w_outer = IntervalTensor::new(
        ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.3, -1.0, 1.0, 0.1]).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.7, -0.6, 1.4, 0.6]).unwrap(),
    )
    .unwrap();
    let z_inner = IntervalTensor::new(
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.2, 0.5]).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.4, 0.9]).unwrap(),
    )
    .unwrap();
    let z_outer = IntervalTensor::new(
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.1, 0.4]).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, 1.0]).unwrap(),
    )
    .unwrap();
    let b = IntervalTensor::from_point(ArrayD::zeros(IxDyn(&[2])));

    let inner = affine_interval_weights(&z_inner, &w_inner, &b).unwrap();
    let outer = affine_interval_weights(&z_outer, &w_outer, &b).unwrap();
    assert!(outer.contains(&inner, 1e-12));

    // point-weight form: monotone in the activation interval
    let w = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.5, -1.5, 2.0, 0.3]).unwrap();
    let bias = ArrayD::zeros(IxDyn(&[2]));
    let zi = IntervalTensor::new(
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![-0.2, 0.1]).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, 0.6]).unwrap(),
    )
    .unwrap();
    let zo = IntervalTensor::new(
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![-0.4, 0.0]).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, 0.8]).unwrap(),
    )
    .unwrap();
    let pi = affine_point_weights(&zi, w.view(), bias.view()).unwrap();
    let po = affine_point_weights(&zo, w.view(), bias.view()).unwrap();
    assert!(po.contains(&pi, 1e-12));
}
