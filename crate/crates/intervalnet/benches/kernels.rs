//! Kernel benchmarks at the desk-scale shapes, comparing the rayon
//! (`*_par`) and sequential (`*_seq`) paths. Both compute bitwise-identical
//! results; this suite shows their relative throughput on the host (on a
//! single-core machine they are expected to be on par).
//!
//! Run with `cargo bench -p intervalnet` (parallel feature on by default).

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use intervalnet::kernels::{
    adam_update_seq, interval_affine_bwd_seq, interval_affine_fwd_seq, midrad_affine_fwd_seq,
    point_affine_fwd_seq, IntervalAffineGrads,
};
#[cfg(feature = "parallel")]
use intervalnet::kernels::{
    adam_update_par, interval_affine_bwd_par, interval_affine_fwd_par, midrad_affine_fwd_par,
    point_affine_fwd_par,
};

fn vec_pattern(n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 * 0.61803) % 1.0 - 0.5) * scale).collect()
}

/// Hypernetwork output layer (scaled to 1/5 of the split-stream shape to
/// keep bench wall time short; throughput is representative).
const HNET_OUT: usize = 95_682;
const HNET_IN: usize = 75;

/// Target first-layer shape.
const T_OUT: usize = 400;
const T_IN: usize = 784;
const BATCH: usize = 128;

fn bench_midrad(c: &mut Criterion) {
    let w = vec_pattern(HNET_OUT * HNET_IN, 0.2);
    let b = vec_pattern(HNET_OUT, 0.1);
    let mu = vec_pattern(HNET_IN, 0.5);
    let r: Vec<f64> = vec_pattern(HNET_IN, 0.5).iter().map(|v| v.abs()).collect();
    let mut g = c.benchmark_group("midrad_affine_fwd");
    g.bench_function("seq", |bench| {
        let mut mo = vec![0.0; HNET_OUT];
        let mut ro = vec![0.0; HNET_OUT];
        bench.iter(|| {
            midrad_affine_fwd_seq(&w, &b, HNET_OUT, HNET_IN, &mu, &r, &mut mo, &mut ro);
            black_box(mo[0]);
        })
    });
    #[cfg(feature = "parallel")]
    g.bench_function("par", |bench| {
        let mut mo = vec![0.0; HNET_OUT];
        let mut ro = vec![0.0; HNET_OUT];
        bench.iter(|| {
            midrad_affine_fwd_par(&w, &b, HNET_OUT, HNET_IN, &mu, &r, &mut mo, &mut ro);
            black_box(mo[0]);
        })
    });
    g.finish();
}

fn bench_interval_affine(c: &mut Criterion) {
    let wl = vec_pattern(T_OUT * T_IN, 0.1);
    let wu: Vec<f64> = wl.iter().map(|v| v + 0.02).collect();
    let bl = vec_pattern(T_OUT, 0.1);
    let bu: Vec<f64> = bl.iter().map(|v| v + 0.01).collect();
    let zl: Vec<f64> = vec_pattern(BATCH * T_IN, 1.0).iter().map(|v| v.abs()).collect();
    let zu: Vec<f64> = zl.iter().map(|v| v + 0.05).collect();

    let mut g = c.benchmark_group("interval_affine_fwd_b128");
    g.bench_function("seq", |bench| {
        let mut ol = vec![0.0; BATCH * T_OUT];
        let mut ou = vec![0.0; BATCH * T_OUT];
        bench.iter(|| {
            interval_affine_fwd_seq(
                &wl, &wu, &bl, &bu, T_OUT, T_IN, &zl, &zu, BATCH, &mut ol, &mut ou,
            );
            black_box(ol[0]);
        })
    });
    #[cfg(feature = "parallel")]
    g.bench_function("par", |bench| {
        let mut ol = vec![0.0; BATCH * T_OUT];
        let mut ou = vec![0.0; BATCH * T_OUT];
        bench.iter(|| {
            interval_affine_fwd_par(
                &wl, &wu, &bl, &bu, T_OUT, T_IN, &zl, &zu, BATCH, &mut ol, &mut ou,
            );
            black_box(ol[0]);
        })
    });
    g.finish();

    let go_l = vec_pattern(BATCH * T_OUT, 0.01);
    let go_u = vec_pattern(BATCH * T_OUT, 0.01);
    let mk_grads = || {
        (
            vec![0.0; T_OUT * T_IN],
            vec![0.0; T_OUT * T_IN],
            vec![0.0; T_OUT],
            vec![0.0; T_OUT],
            vec![0.0; BATCH * T_IN],
            vec![0.0; BATCH * T_IN],
        )
    };
    let mut g = c.benchmark_group("interval_affine_bwd_b128");
    g.bench_function("seq", |bench| {
        bench.iter_batched_ref(
            mk_grads,
            |(gwl, gwu, gbl, gbu, gzl, gzu)| {
                let mut grads = IntervalAffineGrads {
                    wl: Some(gwl),
                    wu: Some(gwu),
                    bl: Some(gbl),
                    bu: Some(gbu),
                    zl: Some(gzl),
                    zu: Some(gzu),
                };
                interval_affine_bwd_seq(
                    &wl, &wu, T_OUT, T_IN, &zl, &zu, BATCH, &go_l, &go_u, &mut grads,
                );
            },
            BatchSize::LargeInput,
        )
    });
    #[cfg(feature = "parallel")]
    g.bench_function("par", |bench| {
        bench.iter_batched_ref(
            mk_grads,
            |(gwl, gwu, gbl, gbu, gzl, gzu)| {
                let mut grads = IntervalAffineGrads {
                    wl: Some(gwl),
                    wu: Some(gwu),
                    bl: Some(gbl),
                    bu: Some(gbu),
                    zl: Some(gzl),
                    zu: Some(gzu),
                };
                interval_affine_bwd_par(
                    &wl, &wu, T_OUT, T_IN, &zl, &zu, BATCH, &go_l, &go_u, &mut grads,
                );
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn bench_point_affine(c: &mut Criterion) {
    let w = vec_pattern(T_OUT * T_IN, 0.1);
    let b = vec_pattern(T_OUT, 0.1);
    let x: Vec<f64> = vec_pattern(BATCH * T_IN, 1.0).iter().map(|v| v.abs()).collect();
    let mut g = c.benchmark_group("point_affine_fwd_b128");
    g.bench_function("seq", |bench| {
        let mut y = vec![0.0; BATCH * T_OUT];
        bench.iter(|| {
            point_affine_fwd_seq(&w, &b, T_OUT, T_IN, &x, BATCH, &mut y);
            black_box(y[0]);
        })
    });
    #[cfg(feature = "parallel")]
    g.bench_function("par", |bench| {
        let mut y = vec![0.0; BATCH * T_OUT];
        bench.iter(|| {
            point_affine_fwd_par(&w, &b, T_OUT, T_IN, &x, BATCH, &mut y);
            black_box(y[0]);
        })
    });
    g.finish();
}

fn bench_adam(c: &mut Criterion) {
    const N: usize = 4_000_000;
    let mut g = c.benchmark_group("adam_update_4m");
    g.sample_size(10);
    g.bench_function("seq", |bench| {
        bench.iter_batched_ref(
            || {
                (
                    vec_pattern(N, 1.0),
                    vec_pattern(N, 0.01),
                    vec![0.0; N],
                    vec![0.0; N],
                )
            },
            |(p, gr, m, v)| {
                adam_update_seq(p, gr, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001);
            },
            BatchSize::LargeInput,
        )
    });
    #[cfg(feature = "parallel")]
    g.bench_function("par", |bench| {
        bench.iter_batched_ref(
            || {
                (
                    vec_pattern(N, 1.0),
                    vec_pattern(N, 0.01),
                    vec![0.0; N],
                    vec![0.0; N],
                )
            },
            |(p, gr, m, v)| {
                adam_update_par(p, gr, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001);
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default()
        .sample_size(10)
        .measurement_time(std::time::Duration::from_secs(4));
    targets = bench_midrad, bench_interval_affine, bench_point_affine, bench_adam
}
criterion_main!(benches);
