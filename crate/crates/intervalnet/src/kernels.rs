//! Low-level affine kernels shared by the interval ops, the tape, and the
//! evaluators.
//!
//! All kernels accumulate in a fixed order (four-lane striped dot products,
//! fixed-size row chunks with an ordered combine) regardless of thread
//! count, so results are bitwise reproducible, the `parallel` feature does
//! not change numerics, and the point, interval, and mid/radius paths agree
//! exactly on degenerate inputs: `max(w,0)*z - max(-w,0)*z` evaluates to the
//! same sequence of rounded products as `w*z`, term for term.
//!
//! Every kernel has a sequential (`*_seq`) and, with the `parallel` feature,
//! a rayon (`*_par`) variant; the unsuffixed name dispatches on the feature.
//! Both variants run the same per-chunk computation and the same sequential
//! combine, differing only in whether chunks run on a thread pool.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per work unit. Fixed (never derived from thread count) so chunk
/// boundaries, and therefore float accumulation order, are stable.
const ROW_CHUNK: usize = 512;

#[inline]
fn sgn0(w: f64) -> f64 {
    // Subgradient convention: d|w|/dw at 0 is 0.
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn n_chunks(out_dim: usize) -> usize {
    out_dim.div_ceil(ROW_CHUNK)
}

/// Striped four-accumulator dot product. The lane split is part of the
/// numeric contract: every kernel in this module reduces with this pattern.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let n4 = n - n % 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < n4 {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

/// Lower/upper pre-activation contribution of one interval weight row:
/// lower = sum max(wl,0)*zl - max(-wl,0)*zu, upper symmetric.
#[inline]
fn interval_row(wl: &[f64], wu: &[f64], zl: &[f64], zu: &[f64]) -> (f64, f64) {
    let n = wl.len();
    let n4 = n - n % 4;
    let mut lo = [0.0f64; 4];
    let mut hi = [0.0f64; 4];
    let mut i = 0;
    while i < n4 {
        for k in 0..4 {
            let w_l = wl[i + k];
            let w_u = wu[i + k];
            let z_l = zl[i + k];
            let z_u = zu[i + k];
            lo[k] += w_l.max(0.0) * z_l - (-w_l).max(0.0) * z_u;
            hi[k] += w_u.max(0.0) * z_u - (-w_u).max(0.0) * z_l;
        }
        i += 4;
    }
    let mut lo_t = 0.0;
    let mut hi_t = 0.0;
    while i < n {
        let w_l = wl[i];
        let w_u = wu[i];
        lo_t += w_l.max(0.0) * zl[i] - (-w_l).max(0.0) * zu[i];
        hi_t += w_u.max(0.0) * zu[i] - (-w_u).max(0.0) * zl[i];
        i += 1;
    }
    (
        ((lo[0] + lo[1]) + (lo[2] + lo[3])) + lo_t,
        ((hi[0] + hi[1]) + (hi[2] + hi[3])) + hi_t,
    )
}

/// (w . mu, |w| . r) in one pass over the row.
#[inline]
fn midrad_row(w: &[f64], mu: &[f64], r: &[f64]) -> (f64, f64) {
    let n = w.len();
    let n4 = n - n % 4;
    let mut m = [0.0f64; 4];
    let mut rad = [0.0f64; 4];
    let mut i = 0;
    while i < n4 {
        for k in 0..4 {
            let wi = w[i + k];
            m[k] += wi * mu[i + k];
            rad[k] += wi.abs() * r[i + k];
        }
        i += 4;
    }
    let mut m_t = 0.0;
    let mut r_t = 0.0;
    while i < n {
        m_t += w[i] * mu[i];
        r_t += w[i].abs() * r[i];
        i += 1;
    }
    (
        ((m[0] + m[1]) + (m[2] + m[3])) + m_t,
        ((rad[0] + rad[1]) + (rad[2] + rad[3])) + r_t,
    )
}

// ---------------------------------------------------------------------------
// Point affine: y[b,j] = dot(w[j,:], x[b,:]) + bias[j]
// ---------------------------------------------------------------------------

fn point_fwd_block(
    ci: usize,
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    in_dim: usize,
    x: &[f64],
    batch: usize,
) -> (usize, Vec<f64>) {
    let j0 = ci * ROW_CHUNK;
    let j1 = (j0 + ROW_CHUNK).min(out_dim);
    let rows = j1 - j0;
    let mut block = vec![0.0; rows * batch];
    for dj in 0..rows {
        let j = j0 + dj;
        let wr = &w[j * in_dim..(j + 1) * in_dim];
        let bj = bias[j];
        for b in 0..batch {
            block[dj * batch + b] = dot(wr, &x[b * in_dim..(b + 1) * in_dim]) + bj;
        }
    }
    (j0, block)
}

fn point_fwd_scatter(blocks: Vec<(usize, Vec<f64>)>, out_dim: usize, batch: usize, y: &mut [f64]) {
    for (j0, block) in blocks {
        let rows = block.len() / batch;
        for dj in 0..rows {
            for b in 0..batch {
                y[b * out_dim + j0 + dj] = block[dj * batch + b];
            }
        }
    }
}

pub fn point_affine_fwd_seq(
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    in_dim: usize,
    x: &[f64],
    batch: usize,
    y: &mut [f64],
) {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(x.len(), batch * in_dim);
    debug_assert_eq!(y.len(), batch * out_dim);
    let blocks: Vec<_> = (0..n_chunks(out_dim))
        .map(|ci| point_fwd_block(ci, w, bias, out_dim, in_dim, x, batch))
        .collect();
    point_fwd_scatter(blocks, out_dim, batch, y);
}

#[cfg(feature = "parallel")]
pub fn point_affine_fwd_par(
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    in_dim: usize,
    x: &[f64],
    batch: usize,
    y: &mut [f64],
) {
    let blocks: Vec<_> = (0..n_chunks(out_dim))
        .into_par_iter()
        .map(|ci| point_fwd_block(ci, w, bias, out_dim, in_dim, x, batch))
        .collect();
    point_fwd_scatter(blocks, out_dim, batch, y);
}

pub fn point_affine_fwd(
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    in_dim: usize,
    x: &[f64],
    batch: usize,
    y: &mut [f64],
) {
    #[cfg(feature = "parallel")]
    {
        point_affine_fwd_par(w, bias, out_dim, in_dim, x, batch, y)
    }
    #[cfg(not(feature = "parallel"))]
    {
        point_affine_fwd_seq(w, bias, out_dim, in_dim, x, batch, y)
    }
}

struct PointBwdPart {
    j0: usize,
    gw: Vec<f64>,
    gb: Vec<f64>,
    gx: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn point_bwd_part(
    ci: usize,
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    x: &[f64],
    batch: usize,
    go: &[f64],
    want_w: bool,
    want_x: bool,
) -> PointBwdPart {
    let j0 = ci * ROW_CHUNK;
    let j1 = (j0 + ROW_CHUNK).min(out_dim);
    let rows = j1 - j0;
    let mut p = PointBwdPart {
        j0,
        gw: vec![0.0; if want_w { rows * in_dim } else { 0 }],
        gb: vec![0.0; rows],
        gx: vec![0.0; if want_x { batch * in_dim } else { 0 }],
    };
    for dj in 0..rows {
        let j = j0 + dj;
        let wr = &w[j * in_dim..(j + 1) * in_dim];
        for b in 0..batch {
            let g = go[b * out_dim + j];
            if g == 0.0 {
                continue;
            }
            p.gb[dj] += g;
            if want_w {
                let gwr = &mut p.gw[dj * in_dim..(dj + 1) * in_dim];
                let xr = &x[b * in_dim..(b + 1) * in_dim];
                for i in 0..in_dim {
                    gwr[i] += g * xr[i];
                }
            }
            if want_x {
                let gxr = &mut p.gx[b * in_dim..(b + 1) * in_dim];
                for i in 0..in_dim {
                    gxr[i] += g * wr[i];
                }
            }
        }
    }
    p
}

fn point_bwd_combine(
    parts: Vec<PointBwdPart>,
    in_dim: usize,
    mut grad_w: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
    mut grad_x: Option<&mut [f64]>,
) {
    for p in parts {
        if let Some(gw) = grad_w.as_deref_mut() {
            let dst = &mut gw[p.j0 * in_dim..p.j0 * in_dim + p.gw.len()];
            for (d, s) in dst.iter_mut().zip(&p.gw) {
                *d += s;
            }
        }
        if let Some(gb) = grad_b.as_deref_mut() {
            for (dj, s) in p.gb.iter().enumerate() {
                gb[p.j0 + dj] += s;
            }
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            for (d, s) in gx.iter_mut().zip(&p.gx) {
                *d += s;
            }
        }
    }
}

/// Accumulates grad_x += go . W, grad_w += go^T . x, grad_b += sum_b go.
/// Any of the gradient sinks may be absent.
#[allow(clippy::too_many_arguments)]
pub fn point_affine_bwd_seq(
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    x: &[f64],
    batch: usize,
    go: &[f64],
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
    grad_x: Option<&mut [f64]>,
) {
    debug_assert_eq!(go.len(), batch * out_dim);
    let (want_w, want_x) = (grad_w.is_some(), grad_x.is_some());
    let parts: Vec<_> = (0..n_chunks(out_dim))
        .map(|ci| point_bwd_part(ci, w, out_dim, in_dim, x, batch, go, want_w, want_x))
        .collect();
    point_bwd_combine(parts, in_dim, grad_w, grad_b, grad_x);
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn point_affine_bwd_par(
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    x: &[f64],
    batch: usize,
    go: &[f64],
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
    grad_x: Option<&mut [f64]>,
) {
    let (want_w, want_x) = (grad_w.is_some(), grad_x.is_some());
    let parts: Vec<_> = (0..n_chunks(out_dim))
        .into_par_iter()
        .map(|ci| point_bwd_part(ci, w, out_dim, in_dim, x, batch, go, want_w, want_x))
        .collect();
    point_bwd_combine(parts, in_dim, grad_w, grad_b, grad_x);
}

#[allow(clippy::too_many_arguments)]
pub fn point_affine_bwd(
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    x: &[f64],
    batch: usize,
    go: &[f64],
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
    grad_x: Option<&mut [f64]>,
) {
    #[cfg(feature = "parallel")]
    {
        point_affine_bwd_par(w, out_dim, in_dim, x, batch, go, grad_w, grad_b, grad_x)
    }
    #[cfg(not(feature = "parallel"))]
    {
        point_affine_bwd_seq(w, out_dim, in_dim, x, batch, go, grad_w, grad_b, grad_x)
    }
}

// ---------------------------------------------------------------------------
// Interval affine (nonnegative activations, interval weights):
//   lower[b,j] = sum_i wl+ zl - wl- zu + bl[j]
//   upper[b,j] = sum_i wu+ zu - wu- zl + bu[j]
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn interval_fwd_block(
    ci: usize,
    wl: &[f64],
    wu: &[f64],
    bl: &[f64],
    bu: &[f64],
    out_dim: usize,
    in_dim: usize,
    zl: &[f64],
    zu: &[f64],
    batch: usize,
) -> (usize, Vec<f64>, Vec<f64>) {
    let j0 = ci * ROW_CHUNK;
    let j1 = (j0 + ROW_CHUNK).min(out_dim);
    let rows = j1 - j0;
    let mut lo_block = vec![0.0; rows * batch];
    let mut hi_block = vec![0.0; rows * batch];
    for dj in 0..rows {
        let j = j0 + dj;
        let wlr = &wl[j * in_dim..(j + 1) * in_dim];
        let wur = &wu[j * in_dim..(j + 1) * in_dim];
        for b in 0..batch {
            let (lo, hi) = interval_row(
                wlr,
                wur,
                &zl[b * in_dim..(b + 1) * in_dim],
                &zu[b * in_dim..(b + 1) * in_dim],
            );
            lo_block[dj * batch + b] = lo + bl[j];
            hi_block[dj * batch + b] = hi + bu[j];
        }
    }
    (j0, lo_block, hi_block)
}

fn interval_fwd_scatter(
    blocks: Vec<(usize, Vec<f64>, Vec<f64>)>,
    out_dim: usize,
    batch: usize,
    out_l: &mut [f64],
    out_u: &mut [f64],
) {
    for (j0, lo_block, hi_block) in blocks {
        let rows = lo_block.len() / batch;
        for dj in 0..rows {
            for b in 0..batch {
                out_l[b * out_dim + j0 + dj] = lo_block[dj * batch + b];
                out_u[b * out_dim + j0 + dj] = hi_block[dj * batch + b];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn interval_affine_fwd_seq(
    wl: &[f64],
    wu: &[f64],
    bl: &[f64],
    bu: &[f64],
    out_dim: usize,
    in_dim: usize,
    zl: &[f64],
    zu: &[f64],
    batch: usize,
    out_l: &mut [f64],
    out_u: &mut [f64],
) {
    let blocks: Vec<_> = (0..n_chunks(out_dim))
        .map(|ci| interval_fwd_block(ci, wl, wu, bl, bu, out_dim, in_dim, zl, zu, batch))
        .collect();
    interval_fwd_scatter(blocks, out_dim, batch, out_l, out_u);
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn interval_affine_fwd_par(
    wl: &[f64],
    wu: &[f64],
    bl: &[f64],
    bu: &[f64],
    out_dim: usize,
    in_dim: usize,
    zl: &[f64],
    zu: &[f64],
    batch: usize,
    out_l: &mut [f64],
    out_u: &mut [f64],
) {
    let blocks: Vec<_> = (0..n_chunks(out_dim))
        .into_par_iter()
        .map(|ci| interval_fwd_block(ci, wl, wu, bl, bu, out_dim, in_dim, zl, zu, batch))
        .collect();
    interval_fwd_scatter(blocks, out_dim, batch, out_l, out_u);
}

#[allow(clippy::too_many_arguments)]
pub fn interval_affine_fwd(
    wl: &[f64],
    wu: &[f64],
    bl: &[f64],
    bu: &[f64],
    out_dim: usize,
    in_dim: usize,
    zl: &[f64],
    zu: &[f64],
    batch: usize,
    out_l: &mut [f64],
    out_u: &mut [f64],
) {
    #[cfg(feature = "parallel")]
    {
        interval_affine_fwd_par(wl, wu, bl, bu, out_dim, in_dim, zl, zu, batch, out_l, out_u)
    }
    #[cfg(not(feature = "parallel"))]
    {
        interval_affine_fwd_seq(wl, wu, bl, bu, out_dim, in_dim, zl, zu, batch, out_l, out_u)
    }
}

/// Gradient sinks for [`interval_affine_bwd`]. All accumulate (`+=`).
pub struct IntervalAffineGrads<'a> {
    pub wl: Option<&'a mut [f64]>,
    pub wu: Option<&'a mut [f64]>,
    pub bl: Option<&'a mut [f64]>,
    pub bu: Option<&'a mut [f64]>,
    pub zl: Option<&'a mut [f64]>,
    pub zu: Option<&'a mut [f64]>,
}

struct IntervalBwdPart {
    j0: usize,
    gwl: Vec<f64>,
    gwu: Vec<f64>,
    gbl: Vec<f64>,
    gbu: Vec<f64>,
    gzl: Vec<f64>,
    gzu: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn interval_bwd_part(
    ci: usize,
    wl: &[f64],
    wu: &[f64],
    out_dim: usize,
    in_dim: usize,
    zl: &[f64],
    zu: &[f64],
    batch: usize,
    go_l: &[f64],
    go_u: &[f64],
    want: (bool, bool, bool, bool),
) -> IntervalBwdPart {
    let j0 = ci * ROW_CHUNK;
    let j1 = (j0 + ROW_CHUNK).min(out_dim);
    let rows = j1 - j0;
    let mut p = IntervalBwdPart {
        j0,
        gwl: vec![0.0; if want.0 { rows * in_dim } else { 0 }],
        gwu: vec![0.0; if want.1 { rows * in_dim } else { 0 }],
        gbl: vec![0.0; rows],
        gbu: vec![0.0; rows],
        gzl: vec![0.0; if want.2 { batch * in_dim } else { 0 }],
        gzu: vec![0.0; if want.3 { batch * in_dim } else { 0 }],
    };
    // Branchless sign selects (`pos*zl + neg*zu` is exact: the other branch
    // contributes a true zero product) and fused per-row loops; the
    // accumulation order per destination element matches the naive form, so
    // results are bit-identical.
    let all_wanted = want == (true, true, true, true);
    for dj in 0..rows {
        let j = j0 + dj;
        let wlr = &wl[j * in_dim..(j + 1) * in_dim];
        let wur = &wu[j * in_dim..(j + 1) * in_dim];
        for b in 0..batch {
            let gl = go_l[b * out_dim + j];
            let gu = go_u[b * out_dim + j];
            if gl == 0.0 && gu == 0.0 {
                continue;
            }
            p.gbl[dj] += gl;
            p.gbu[dj] += gu;
            let zlr = &zl[b * in_dim..(b + 1) * in_dim];
            let zur = &zu[b * in_dim..(b + 1) * in_dim];
            if all_wanted {
                let gwl = &mut p.gwl[dj * in_dim..(dj + 1) * in_dim];
                let gwu = &mut p.gwu[dj * in_dim..(dj + 1) * in_dim];
                // gzl/gzu rows are disjoint from gwl/gwu buffers
                let (gzl_all, gzu_all) = (&mut p.gzl, &mut p.gzu);
                for i in 0..in_dim {
                    let w_l = wlr[i];
                    let w_u = wur[i];
                    let z_l = zlr[i];
                    let z_u = zur[i];
                    let sel_l = f64::from(w_l > 0.0) * z_l + f64::from(w_l < 0.0) * z_u;
                    let sel_u = f64::from(w_u > 0.0) * z_u + f64::from(w_u < 0.0) * z_l;
                    gwl[i] += gl * sel_l;
                    gwu[i] += gu * sel_u;
                    gzl_all[b * in_dim + i] += gl * w_l.max(0.0) - gu * (-w_u).max(0.0);
                    gzu_all[b * in_dim + i] += gu * w_u.max(0.0) - gl * (-w_l).max(0.0);
                }
                continue;
            }
            if want.0 {
                let dst = &mut p.gwl[dj * in_dim..(dj + 1) * in_dim];
                for i in 0..in_dim {
                    let w = wlr[i];
                    let sel = f64::from(w > 0.0) * zlr[i] + f64::from(w < 0.0) * zur[i];
                    dst[i] += gl * sel;
                }
            }
            if want.1 {
                let dst = &mut p.gwu[dj * in_dim..(dj + 1) * in_dim];
                for i in 0..in_dim {
                    let w = wur[i];
                    let sel = f64::from(w > 0.0) * zur[i] + f64::from(w < 0.0) * zlr[i];
                    dst[i] += gu * sel;
                }
            }
            if want.2 {
                let dst = &mut p.gzl[b * in_dim..(b + 1) * in_dim];
                for i in 0..in_dim {
                    dst[i] += gl * wlr[i].max(0.0) - gu * (-wur[i]).max(0.0);
                }
            }
            if want.3 {
                let dst = &mut p.gzu[b * in_dim..(b + 1) * in_dim];
                for i in 0..in_dim {
                    dst[i] += gu * wur[i].max(0.0) - gl * (-wlr[i]).max(0.0);
                }
            }
        }
    }
    p
}

fn interval_bwd_combine(
    parts: Vec<IntervalBwdPart>,
    in_dim: usize,
    grads: &mut IntervalAffineGrads<'_>,
) {
    for p in parts {
        if let Some(g) = grads.wl.as_deref_mut() {
            let dst = &mut g[p.j0 * in_dim..p.j0 * in_dim + p.gwl.len()];
            for (d, s) in dst.iter_mut().zip(&p.gwl) {
                *d += s;
            }
        }
        if let Some(g) = grads.wu.as_deref_mut() {
            let dst = &mut g[p.j0 * in_dim..p.j0 * in_dim + p.gwu.len()];
            for (d, s) in dst.iter_mut().zip(&p.gwu) {
                *d += s;
            }
        }
        if let Some(g) = grads.bl.as_deref_mut() {
            for (dj, s) in p.gbl.iter().enumerate() {
                g[p.j0 + dj] += s;
            }
        }
        if let Some(g) = grads.bu.as_deref_mut() {
            for (dj, s) in p.gbu.iter().enumerate() {
                g[p.j0 + dj] += s;
            }
        }
        if let Some(g) = grads.zl.as_deref_mut() {
            for (d, s) in g.iter_mut().zip(&p.gzl) {
                *d += s;
            }
        }
        if let Some(g) = grads.zu.as_deref_mut() {
            for (d, s) in g.iter_mut().zip(&p.gzu) {
                *d += s;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn interval_affine_bwd_seq(
    wl: &[f64],
    wu: &[f64],
    out_dim: usize,
    in_dim: usize,
    zl: &[f64],
    zu: &[f64],
    batch: usize,
    go_l: &[f64],
    go_u: &[f64],
    grads: &mut IntervalAffineGrads<'_>,
) {
    let want = (
        grads.wl.is_some(),
        grads.wu.is_some(),
        grads.zl.is_some(),
        grads.zu.is_some(),
    );
    let parts: Vec<_> = (0..n_chunks(out_dim))
        .map(|ci| interval_bwd_part(ci, wl, wu, out_dim, in_dim, zl, zu, batch, go_l, go_u, want))
        .collect();
    interval_bwd_combine(parts, in_dim, grads);
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn interval_affine_bwd_par(
    wl: &[f64],
    wu: &[f64],
    out_dim: usize,
    in_dim: usize,
    zl: &[f64],
    zu: &[f64],
    batch: usize,
    go_l: &[f64],
    go_u: &[f64],
    grads: &mut IntervalAffineGrads<'_>,
) {
    let want = (
        grads.wl.is_some(),
        grads.wu.is_some(),
        grads.zl.is_some(),
        grads.zu.is_some(),
    );
    let parts: Vec<_> = (0..n_chunks(out_dim))
        .into_par_iter()
        .map(|ci| interval_bwd_part(ci, wl, wu, out_dim, in_dim, zl, zu, batch, go_l, go_u, want))
        .collect();
    interval_bwd_combine(parts, in_dim, grads);
}

#[allow(clippy::too_many_arguments)]
pub fn interval_affine_bwd(
    wl: &[f64],
    wu: &[f64],
    out_dim: usize,
    in_dim: usize,
    zl: &[f64],
    zu: &[f64],
    batch: usize,
    go_l: &[f64],
    go_u: &[f64],
    grads: &mut IntervalAffineGrads<'_>,
) {
    #[cfg(feature = "parallel")]
    {
        interval_affine_bwd_par(wl, wu, out_dim, in_dim, zl, zu, batch, go_l, go_u, grads)
    }
    #[cfg(not(feature = "parallel"))]
    {
        interval_affine_bwd_seq(wl, wu, out_dim, in_dim, zl, zu, batch, go_l, go_u, grads)
    }
}

// ---------------------------------------------------------------------------
// Mid/radius affine (point weights, interval activations):
//   mu_out = W mu + b,  r_out = |W| r
// ---------------------------------------------------------------------------

fn midrad_fwd_block(
    ci: usize,
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    in_dim: usize,
    mu: &[f64],
    r: &[f64],
) -> (usize, Vec<f64>, Vec<f64>) {
    let j0 = ci * ROW_CHUNK;
    let j1 = (j0 + ROW_CHUNK).min(out_dim);
    let rows = j1 - j0;
    let mut mu_block = vec![0.0; rows];
    let mut r_block = vec![0.0; rows];
    for dj in 0..rows {
        let j = j0 + dj;
        let (m, rad) = midrad_row(&w[j * in_dim..(j + 1) * in_dim], mu, r);
        mu_block[dj] = m + bias[j];
        r_block[dj] = rad;
    }
    (j0, mu_block, r_block)
}

#[allow(clippy::too_many_arguments)]
pub fn midrad_affine_fwd_seq(
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    in_dim: usize,
    mu: &[f64],
    r: &[f64],
    mu_out: &mut [f64],
    r_out: &mut [f64],
) {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    for (j0, mb, rb) in (0..n_chunks(out_dim)).map(|ci| midrad_fwd_block(ci, w, bias, out_dim, in_dim, mu, r)) {
        mu_out[j0..j0 + mb.len()].copy_from_slice(&mb);
        r_out[j0..j0 + rb.len()].copy_from_slice(&rb);
    }
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn midrad_affine_fwd_par(
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    in_dim: usize,
    mu: &[f64],
    r: &[f64],
    mu_out: &mut [f64],
    r_out: &mut [f64],
) {
    let blocks: Vec<_> = (0..n_chunks(out_dim))
        .into_par_iter()
        .map(|ci| midrad_fwd_block(ci, w, bias, out_dim, in_dim, mu, r))
        .collect();
    for (j0, mb, rb) in blocks {
        mu_out[j0..j0 + mb.len()].copy_from_slice(&mb);
        r_out[j0..j0 + rb.len()].copy_from_slice(&rb);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn midrad_affine_fwd(
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    in_dim: usize,
    mu: &[f64],
    r: &[f64],
    mu_out: &mut [f64],
    r_out: &mut [f64],
) {
    #[cfg(feature = "parallel")]
    {
        midrad_affine_fwd_par(w, bias, out_dim, in_dim, mu, r, mu_out, r_out)
    }
    #[cfg(not(feature = "parallel"))]
    {
        midrad_affine_fwd_seq(w, bias, out_dim, in_dim, mu, r, mu_out, r_out)
    }
}

/// Gradient sinks for [`midrad_affine_bwd`]; accumulate (`+=`).
pub struct MidRadGrads<'a> {
    pub w: Option<&'a mut [f64]>,
    pub b: Option<&'a mut [f64]>,
    pub mu: Option<&'a mut [f64]>,
    pub r: Option<&'a mut [f64]>,
}

struct MidRadBwdPart {
    j0: usize,
    gw: Vec<f64>,
    gmu: Vec<f64>,
    gr: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn midrad_bwd_part(
    ci: usize,
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    mu: &[f64],
    r: &[f64],
    go_mu: &[f64],
    go_r: &[f64],
    want: (bool, bool, bool),
) -> MidRadBwdPart {
    let j0 = ci * ROW_CHUNK;
    let j1 = (j0 + ROW_CHUNK).min(out_dim);
    let rows = j1 - j0;
    let mut p = MidRadBwdPart {
        j0,
        gw: vec![0.0; if want.0 { rows * in_dim } else { 0 }],
        gmu: vec![0.0; if want.1 { in_dim } else { 0 }],
        gr: vec![0.0; if want.2 { in_dim } else { 0 }],
    };
    for dj in 0..rows {
        let j = j0 + dj;
        let wr = &w[j * in_dim..(j + 1) * in_dim];
        let gm = go_mu[j];
        let gr = go_r[j];
        if want.0 {
            let dst = &mut p.gw[dj * in_dim..(dj + 1) * in_dim];
            for i in 0..in_dim {
                dst[i] += gm * mu[i] + gr * r[i] * sgn0(wr[i]);
            }
        }
        if want.1 {
            for i in 0..in_dim {
                p.gmu[i] += wr[i] * gm;
            }
        }
        if want.2 {
            for i in 0..in_dim {
                p.gr[i] += wr[i].abs() * gr;
            }
        }
    }
    p
}

fn midrad_bwd_combine(
    parts: Vec<MidRadBwdPart>,
    in_dim: usize,
    out_dim: usize,
    go_mu: &[f64],
    grads: &mut MidRadGrads<'_>,
) {
    for p in parts {
        if let Some(g) = grads.w.as_deref_mut() {
            let dst = &mut g[p.j0 * in_dim..p.j0 * in_dim + p.gw.len()];
            for (d, s) in dst.iter_mut().zip(&p.gw) {
                *d += s;
            }
        }
        if let Some(g) = grads.mu.as_deref_mut() {
            for (d, s) in g.iter_mut().zip(&p.gmu) {
                *d += s;
            }
        }
        if let Some(g) = grads.r.as_deref_mut() {
            for (d, s) in g.iter_mut().zip(&p.gr) {
                *d += s;
            }
        }
    }
    if let Some(gb) = grads.b.as_deref_mut() {
        for j in 0..out_dim {
            gb[j] += go_mu[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn midrad_affine_bwd_seq(
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    mu: &[f64],
    r: &[f64],
    go_mu: &[f64],
    go_r: &[f64],
    grads: &mut MidRadGrads<'_>,
) {
    let want = (grads.w.is_some(), grads.mu.is_some(), grads.r.is_some());
    let parts: Vec<_> = (0..n_chunks(out_dim))
        .map(|ci| midrad_bwd_part(ci, w, out_dim, in_dim, mu, r, go_mu, go_r, want))
        .collect();
    midrad_bwd_combine(parts, in_dim, out_dim, go_mu, grads);
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn midrad_affine_bwd_par(
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    mu: &[f64],
    r: &[f64],
    go_mu: &[f64],
    go_r: &[f64],
    grads: &mut MidRadGrads<'_>,
) {
    let want = (grads.w.is_some(), grads.mu.is_some(), grads.r.is_some());
    let parts: Vec<_> = (0..n_chunks(out_dim))
        .into_par_iter()
        .map(|ci| midrad_bwd_part(ci, w, out_dim, in_dim, mu, r, go_mu, go_r, want))
        .collect();
    midrad_bwd_combine(parts, in_dim, out_dim, go_mu, grads);
}

#[allow(clippy::too_many_arguments)]
pub fn midrad_affine_bwd(
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    mu: &[f64],
    r: &[f64],
    go_mu: &[f64],
    go_r: &[f64],
    grads: &mut MidRadGrads<'_>,
) {
    #[cfg(feature = "parallel")]
    {
        midrad_affine_bwd_par(w, out_dim, in_dim, mu, r, go_mu, go_r, grads)
    }
    #[cfg(not(feature = "parallel"))]
    {
        midrad_affine_bwd_seq(w, out_dim, in_dim, mu, r, go_mu, go_r, grads)
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// One fused Adam update over a flat parameter array. Consumes (zeroes) the
/// gradient. `bias1 = 1 - beta1^t`, `bias2 = 1 - beta2^t`.
/// Four-lane blocks so the sqrt/div pipeline vectorizes.
#[allow(clippy::too_many_arguments)]
pub fn adam_update_seq(
    p: &mut [f64],
    g: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bias1: f64,
    bias2: f64,
) {
    let inv1 = 1.0 / bias1;
    let inv2 = 1.0 / bias2;
    let n = p.len();
    let n4 = n - n % 4;
    let mut i = 0;
    while i < n4 {
        let mut mi = [0.0f64; 4];
        let mut vi = [0.0f64; 4];
        let mut step = [0.0f64; 4];
        for k in 0..4 {
            let gi = g[i + k];
            mi[k] = beta1 * m[i + k] + (1.0 - beta1) * gi;
            vi[k] = beta2 * v[i + k] + (1.0 - beta2) * gi * gi;
        }
        for k in 0..4 {
            step[k] = lr * (mi[k] * inv1) / ((vi[k] * inv2).sqrt() + eps);
        }
        for k in 0..4 {
            m[i + k] = mi[k];
            v[i + k] = vi[k];
            p[i + k] -= step[k];
            g[i + k] = 0.0;
        }
        i += 4;
    }
    while i < n {
        let gi = g[i];
        let mi = beta1 * m[i] + (1.0 - beta1) * gi;
        let vi = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        m[i] = mi;
        v[i] = vi;
        p[i] -= lr * (mi * inv1) / ((vi * inv2).sqrt() + eps);
        g[i] = 0.0;
    }
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn adam_update_par(
    p: &mut [f64],
    g: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bias1: f64,
    bias2: f64,
) {
    const CHUNK: usize = 1 << 16;
    p.par_chunks_mut(CHUNK)
        .zip(g.par_chunks_mut(CHUNK))
        .zip(m.par_chunks_mut(CHUNK))
        .zip(v.par_chunks_mut(CHUNK))
        .for_each(|(((pc, gc), mc), vc)| {
            adam_update_seq(pc, gc, mc, vc, lr, beta1, beta2, eps, bias1, bias2)
        });
}

#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    p: &mut [f64],
    g: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bias1: f64,
    bias2: f64,
) {
    #[cfg(feature = "parallel")]
    {
        adam_update_par(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2)
    }
    #[cfg(not(feature = "parallel"))]
    {
        adam_update_seq(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2)
    }
}
