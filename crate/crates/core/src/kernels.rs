//! Raw slice kernels shared by the autodiff tape and the KV-cache decode path.
//!
//! Every kernel is deterministic and single-threaded, and per-row accumulation
//! orders do not depend on how many rows are present. That makes a single-row
//! decode step reproduce the corresponding row of a full-sequence forward pass
//! bit for bit, which the decode-equivalence suite relies on.

use crate::tensor::Real;

const LANES: usize = 8;

/// Dot product with a fixed 8-lane accumulation order (lane `l` sums
/// elements `l, l+8, l+16, ...`, lanes combine pairwise, the tail is added
/// last). Every dot product in the crate, forward or decode path, goes
/// through here, so the two paths agree bit for bit.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    if let Some(fast) = T::fast_dot(a, b) {
        return fast;
    }
    let mut lanes = [T::zero(); LANES];
    let split = a.len() - a.len() % LANES;
    for (ac, bc) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            lanes[l] = lanes[l] + ac[l] * bc[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]));
    for (&av, &bv) in a[split..].iter().zip(&b[split..]) {
        acc = acc + av * bv;
    }
    acc
}

fn dot4<T: Real>(a: &[T], b: [&[T]; 4]) -> [T; 4] {
    if let Some(fast) = T::fast_dot4(a, b) {
        return fast;
    }
    [dot(a, b[0]), dot(a, b[1]), dot(a, b[2]), dot(a, b[3])]
}

/// out[j] += s * b[j]. Element lanes are independent, so this vectorizes
/// without changing any per-element accumulation order.
fn axpy<T: Real>(s: T, b: &[T], out: &mut [T]) {
    if T::fast_axpy(s, b, out) {
        return;
    }
    for (o, &bv) in out.iter_mut().zip(b) {
        *o = *o + s * bv;
    }
}

#[allow(clippy::too_many_arguments)]
fn axpy4<T: Real>(
    s: [T; 4],
    b: &[T],
    o0: &mut [T],
    o1: &mut [T],
    o2: &mut [T],
    o3: &mut [T],
) {
    if T::fast_axpy4(s, b, [&mut *o0, &mut *o1, &mut *o2, &mut *o3]) {
        return;
    }
    for ((((&bv, r0), r1), r2), r3) in
        b.iter().zip(o0.iter_mut()).zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut())
    {
        *r0 = *r0 + s[0] * bv;
        *r1 = *r1 + s[1] * bv;
        *r2 = *r2 + s[2] * bv;
        *r3 = *r3 + s[3] * bv;
    }
}

/// C[m,n] = A[m,k] * B[k,n]. Row-major, `out` fully overwritten. Each output
/// element accumulates over the shared axis in ascending order; the 4-row
/// blocking only lets output rows share loaded B rows and never reorders any
/// element's accumulation, so row-sliced calls reproduce blocked calls.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in out.iter_mut() {
        *row = T::zero();
    }
    let blocks = m / 4;
    for block in 0..blocks {
        let i = block * 4;
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let a0 = a[i * k + kk];
            let a1 = a[(i + 1) * k + kk];
            let a2 = a[(i + 2) * k + kk];
            let a3 = a[(i + 3) * k + kk];
            if a0 == T::zero() && a1 == T::zero() && a2 == T::zero() && a3 == T::zero() {
                continue;
            }
            axpy4([a0, a1, a2, a3], b_row, o0, o1, o2, o3);
        }
    }
    for i in blocks * 4..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            axpy(aik, &b[kk * n..(kk + 1) * n], out_row);
        }
    }
}

/// C[k,n] = A^T[k,m] * B[m,n] with A stored as [m,k]. Used for matmul VJPs.
/// Four consecutive output rows share each loaded B row.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for row in out.iter_mut() {
        *row = T::zero();
    }
    let blocks = k / 4;
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for block in 0..blocks {
            let kk = block * 4;
            let s = [a_row[kk], a_row[kk + 1], a_row[kk + 2], a_row[kk + 3]];
            if s.iter().all(|&v| v == T::zero()) {
                continue;
            }
            let (o0, rest) = out[kk * n..(kk + 4) * n].split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            axpy4(s, b_row, o0, o1, o2, o3);
        }
        for kk in blocks * 4..k {
            let aik = a_row[kk];
            if aik == T::zero() {
                continue;
            }
            axpy(aik, b_row, &mut out[kk * n..(kk + 1) * n]);
        }
    }
}

/// C[m,k] = A[m,n] * B^T[n,k] with B stored as [k,n]. Used for matmul VJPs.
/// Each A row runs four dot products at a time against consecutive B rows,
/// each dot keeping the pinned lane order.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let blocks = k / 4;
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for block in 0..blocks {
            let kk = block * 4;
            let rows = [
                &b[kk * n..(kk + 1) * n],
                &b[(kk + 1) * n..(kk + 2) * n],
                &b[(kk + 2) * n..(kk + 3) * n],
                &b[(kk + 3) * n..(kk + 4) * n],
            ];
            let vals = dot4(a_row, rows);
            out[i * k + kk..i * k + kk + 4].copy_from_slice(&vals);
        }
        for kk in blocks * 4..k {
            out[i * k + kk] = dot(a_row, &b[kk * n..(kk + 1) * n]);
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// SiLU: x * sigmoid(x), elementwise.
pub fn silu<T: Real>(x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * sigmoid(v);
    }
}

/// d silu / dx = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub fn silu_backward<T: Real>(x: &[T], d_out: &[T], d_x: &mut [T]) {
    for ((dx, &v), &d) in d_x.iter_mut().zip(x).zip(d_out) {
        let s = sigmoid(v);
        *dx = *dx + d * s * (T::one() + v * (T::one() - s));
    }
}

/// Per-row RMS normalization with learned gain:
/// y = x / sqrt(mean(x^2) + eps) * gain.
pub fn rmsnorm_rows<T: Real>(x: &[T], gain: &[T], eps: T, rows: usize, d: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), rows * d);
    debug_assert_eq!(gain.len(), d);
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut ms = T::zero();
        for &v in row {
            ms = ms + v * v;
        }
        ms = ms * inv_d;
        let inv_rms = T::one() / (ms + eps).sqrt();
        let out_row = &mut out[r * d..(r + 1) * d];
        for ((o, &v), &g) in out_row.iter_mut().zip(row).zip(gain) {
            *o = v * inv_rms * g;
        }
    }
}

/// VJP of `rmsnorm_rows`. Accumulates into `d_x` and `d_gain`.
pub fn rmsnorm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    eps: T,
    rows: usize,
    d: usize,
    d_out: &[T],
    d_x: &mut [T],
    d_gain: &mut [T],
) {
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let dy = &d_out[r * d..(r + 1) * d];
        let mut ms = T::zero();
        for &v in row {
            ms = ms + v * v;
        }
        ms = ms * inv_d;
        let inv_rms = T::one() / (ms + eps).sqrt();
        // dot = sum_i dy_i * gain_i * x_i
        let mut dot = T::zero();
        for i in 0..d {
            dot = dot + dy[i] * gain[i] * row[i];
        }
        let scale = inv_rms * inv_rms * inv_rms * inv_d * dot;
        let dxr = &mut d_x[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] = dxr[i] + dy[i] * gain[i] * inv_rms - row[i] * scale;
            d_gain[i] = d_gain[i] + dy[i] * row[i] * inv_rms;
        }
    }
}

/// Softmax along the last axis, with max subtraction.
pub fn softmax_rows<T: Real>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        softmax_row(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
    }
}

/// Softmax over one contiguous row.
pub fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let mut max = x[0];
    for &v in &x[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// VJP of a softmax row: d_x = y * (d_y - dot(d_y, y)).
pub fn softmax_row_backward<T: Real>(y: &[T], d_y: &[T], d_x: &mut [T]) {
    let mut dot = T::zero();
    for (&yv, &dv) in y.iter().zip(d_y) {
        dot = dot + yv * dv;
    }
    for ((dx, &yv), &dv) in d_x.iter_mut().zip(y).zip(d_y) {
        *dx = *dx + yv * (dv - dot);
    }
}

/// Scaled causal attention logits. `q`, `k` are [t, heads, hd]; `out` is
/// [heads, t, t] with out[a, i, j] = dot(q[i,a,:], k[j,a,:]) / sqrt(hd) for
/// j <= i and exactly zero above the diagonal (those entries are never read).
pub fn attn_scores<T: Real>(q: &[T], k: &[T], t: usize, heads: usize, hd: usize, out: &mut [T]) {
    debug_assert_eq!(q.len(), t * heads * hd);
    debug_assert_eq!(out.len(), heads * t * t);
    let scale = T::one() / T::from_f64((hd as f64).sqrt());
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for a in 0..heads {
        for i in 0..t {
            let q_row = &q[(i * heads + a) * hd..(i * heads + a + 1) * hd];
            let out_row = &mut out[(a * t + i) * t..(a * t + i + 1) * t];
            for (j, o) in out_row.iter_mut().enumerate().take(i + 1) {
                let k_row = &k[(j * heads + a) * hd..(j * heads + a + 1) * hd];
                *o = dot(q_row, k_row) * scale;
            }
        }
    }
}

/// VJP of `attn_scores`. `d_scores` is [heads, t, t] (upper triangle ignored).
pub fn attn_scores_backward<T: Real>(
    q: &[T],
    k: &[T],
    t: usize,
    heads: usize,
    hd: usize,
    d_scores: &[T],
    d_q: &mut [T],
    d_k: &mut [T],
) {
    let scale = T::one() / T::from_f64((hd as f64).sqrt());
    for a in 0..heads {
        for i in 0..t {
            let ds_row = &d_scores[(a * t + i) * t..(a * t + i + 1) * t];
            let q_row = &q[(i * heads + a) * hd..(i * heads + a + 1) * hd];
            for (j, &ds) in ds_row.iter().enumerate().take(i + 1) {
                if ds == T::zero() {
                    continue;
                }
                let g = ds * scale;
                let k_row = &k[(j * heads + a) * hd..(j * heads + a + 1) * hd];
                axpy(g, k_row, &mut d_q[(i * heads + a) * hd..(i * heads + a + 1) * hd]);
                axpy(g, q_row, &mut d_k[(j * heads + a) * hd..(j * heads + a + 1) * hd]);
            }
        }
    }
}

/// Row-wise softmax over the causal prefix: for row (a, i) only entries
/// j <= i participate; entries above the diagonal are written as zero.
pub fn causal_softmax<T: Real>(scores: &[T], t: usize, heads: usize, out: &mut [T]) {
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for a in 0..heads {
        for i in 0..t {
            let base = (a * t + i) * t;
            softmax_row(&scores[base..base + i + 1], &mut out[base..base + i + 1]);
        }
    }
}

pub fn causal_softmax_backward<T: Real>(
    weights: &[T],
    t: usize,
    heads: usize,
    d_out: &[T],
    d_scores: &mut [T],
) {
    for a in 0..heads {
        for i in 0..t {
            let base = (a * t + i) * t;
            softmax_row_backward(
                &weights[base..base + i + 1],
                &d_out[base..base + i + 1],
                &mut d_scores[base..base + i + 1],
            );
        }
    }
}

/// Attention value mixing: `weights` is [heads, t, t] causal, `v` is
/// [t, heads, hd]; `out` is [t, heads*hd] with heads concatenated.
pub fn attn_mix<T: Real>(weights: &[T], v: &[T], t: usize, heads: usize, hd: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), t * heads * hd);
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for a in 0..heads {
        for i in 0..t {
            let w_row = &weights[(a * t + i) * t..(a * t + i) * t + i + 1];
            let out_seg = &mut out[i * heads * hd + a * hd..i * heads * hd + (a + 1) * hd];
            for (j, &w) in w_row.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                axpy(w, &v[(j * heads + a) * hd..(j * heads + a + 1) * hd], out_seg);
            }
        }
    }
}

pub fn attn_mix_backward<T: Real>(
    weights: &[T],
    v: &[T],
    t: usize,
    heads: usize,
    hd: usize,
    d_out: &[T],
    d_weights: &mut [T],
    d_v: &mut [T],
) {
    for a in 0..heads {
        for i in 0..t {
            let d_seg = &d_out[i * heads * hd + a * hd..i * heads * hd + (a + 1) * hd];
            let w_row = &weights[(a * t + i) * t..(a * t + i) * t + i + 1];
            let dw_row = &mut d_weights[(a * t + i) * t..(a * t + i) * t + i + 1];
            for (j, dw) in dw_row.iter_mut().enumerate() {
                let v_row = &v[(j * heads + a) * hd..(j * heads + a + 1) * hd];
                *dw = *dw + dot(d_seg, v_row);
                let w = w_row[j];
                if w == T::zero() {
                    continue;
                }
                axpy(w, d_seg, &mut d_v[(j * heads + a) * hd..(j * heads + a + 1) * hd]);
            }
        }
    }
}

/// Angle of the rotation applied to pair `pair` of a head of width `hd` at
/// absolute position `pos`.
pub fn rope_angle(pos: usize, pair: usize, hd: usize, theta: f64) -> f64 {
    let exponent = -2.0 * (pair as f64) / (hd as f64);
    (pos as f64) * theta.powf(exponent)
}

/// Rotary position embedding on [t, heads, hd] (hd even). Consecutive pairs
/// (x_{2p}, x_{2p+1}) rotate by `(offset + i) * theta^(-2p/hd)` at row i.
/// `invert` rotates by the negated angle (the VJP, since rotations are
/// orthogonal).
pub fn rope<T: Real>(
    x: &[T],
    t: usize,
    heads: usize,
    hd: usize,
    theta: f64,
    offset: usize,
    invert: bool,
    out: &mut [T],
) {
    debug_assert_eq!(hd % 2, 0);
    debug_assert_eq!(x.len(), t * heads * hd);
    let pairs = hd / 2;
    let inv_freq: Vec<f64> =
        (0..pairs).map(|p| theta.powf(-2.0 * (p as f64) / (hd as f64))).collect();
    let mut rotation = vec![(T::zero(), T::zero()); pairs];
    for i in 0..t {
        let pos = offset + i;
        for (p, rot) in rotation.iter_mut().enumerate() {
            let mut angle = (pos as f64) * inv_freq[p];
            if invert {
                angle = -angle;
            }
            *rot = (T::from_f64(angle.sin()), T::from_f64(angle.cos()));
        }
        for a in 0..heads {
            let base = (i * heads + a) * hd;
            for (p, &(sin, cos)) in rotation.iter().enumerate() {
                let x0 = x[base + 2 * p];
                let x1 = x[base + 2 * p + 1];
                out[base + 2 * p] = x0 * cos - x1 * sin;
                out[base + 2 * p + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

/// Token embedding lookup: out[i, :] = table[tokens[i], :].
pub fn embed<T: Real>(table: &[T], tokens: &[usize], d: usize, out: &mut [T]) {
    for (i, &tok) in tokens.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&table[tok * d..(tok + 1) * d]);
    }
}

/// Mean negative log-likelihood over positions, stabilized via log-sum-exp.
pub fn cross_entropy<T: Real>(logits: &[T], targets: &[usize], vocab: usize) -> T {
    let rows = targets.len();
    let mut total = T::zero();
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        total = total + (log_sum_exp(row) - row[target]);
    }
    total / T::from_f64(rows as f64)
}

/// VJP of `cross_entropy`: d_logits += d_loss * (softmax(row) - onehot) / rows.
pub fn cross_entropy_backward<T: Real>(
    logits: &[T],
    targets: &[usize],
    vocab: usize,
    d_loss: T,
    d_logits: &mut [T],
) {
    let rows = targets.len();
    let scale = d_loss / T::from_f64(rows as f64);
    let mut probs = vec![T::zero(); vocab];
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        softmax_row(row, &mut probs);
        let d_row = &mut d_logits[r * vocab..(r + 1) * vocab];
        for (j, dv) in d_row.iter_mut().enumerate() {
            let indicator = if j == target { T::one() } else { T::zero() };
            *dv = *dv + scale * (probs[j] - indicator);
        }
    }
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        matmul(&i2, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_by_hand() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut out = [0.0];
        matmul(&a, &b, 1, 2, 1, &mut out);
        assert_eq!(out, [11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut state = 0x12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let a: Vec<f64> = (0..12).map(|_| next()).collect();
        let b: Vec<f64> = (0..8).map(|_| next()).collect();
        let mut out = vec![0.0; 6];
        matmul(&a, &b, 3, 4, 2, &mut out);
        let expect = matmul_oracle(&a, &b, 3, 4, 2);
        for (o, e) in out.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn matmul_tn_nt_match_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..8).map(|v| v as f64 - 2.0).collect(); // 2x4
        let mut at = vec![0.0; 6];
        transpose(&a, 2, 3, &mut at);
        let mut want = vec![0.0; 12];
        matmul(&at, &b, 3, 2, 4, &mut want);
        let mut got = vec![0.0; 12];
        matmul_tn(&a, &b, 2, 3, 4, &mut got);
        assert_eq!(got, want);

        // A[2x4] * B^T with B stored [3x4]
        let c: Vec<f64> = (0..12).map(|v| 0.25 * v as f64).collect();
        let mut ct = vec![0.0; 12];
        transpose(&c, 3, 4, &mut ct);
        let mut want2 = vec![0.0; 6];
        matmul(&b, &ct, 2, 4, 3, &mut want2);
        let mut got2 = vec![0.0; 6];
        matmul_nt(&b, &c, 2, 4, 3, &mut got2);
        for (g, w) in got2.iter().zip(&want2) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_values() {
        // silu(0) = 0; silu(1) = 1/(1+e^-1); silu(-20) saturates toward 0.
        let x = [0.0f64, 1.0, -20.0];
        let mut out = [0.0; 3];
        silu(&x, &mut out);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((out[2] - (-4.122_307_244e-8)).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_scalar_oracle() {
        // Independent scalar evaluation of x / sqrt(mean(x^2)+eps) * gain.
        let x = [1.0f64, 2.0, 3.0];
        let gain = [1.0; 3];
        let eps = 1e-6f64;
        let rms = ((1.0 + 4.0 + 9.0) / 3.0 + eps).sqrt();
        let mut out = [0.0; 3];
        rmsnorm_rows(&x, &gain, eps, 1, 3, &mut out);
        for i in 0..3 {
            assert!((out[i] - x[i] / rms).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsnorm_simple_cases() {
        let ones = [1.0f64; 4];
        let gain = [1.0; 4];
        let mut out = [0.0; 4];
        rmsnorm_rows(&ones, &gain, 0.0, 1, 4, &mut out);
        assert_eq!(out, ones);

        let x = [3.0f64, -3.0];
        let mut out2 = [0.0; 2];
        rmsnorm_rows(&x, &gain[..2], 0.0, 1, 2, &mut out2);
        assert_eq!(out2, [1.0, -1.0]);
    }

    #[test]
    fn softmax_known_values() {
        // Scalar oracle: e^x / sum for [1,2,3].
        let x = [1.0f64, 2.0, 3.0];
        let mut out = [0.0; 3];
        softmax_row(&x, &mut out);
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_67, 0.665_240_955_774_821_9];
        for (o, e) in out.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-15);
        }
        let uniform = [7.5f64; 3];
        let mut u = [0.0; 3];
        softmax_row(&uniform, &mut u);
        for v in u {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = [0.3f64, -1.2, 2.7, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
        let mut a = [0.0; 4];
        let mut b = [0.0; 4];
        softmax_row(&x, &mut a);
        softmax_row(&shifted, &mut b);
        for (av, bv) in a.iter().zip(&b) {
            assert!((av - bv).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let logits = [0.0f64; 6]; // 2 rows, vocab 3
        let loss = cross_entropy(&logits, &[0, 2], 3);
        assert!((loss - 3.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_scalar_oracle() {
        // Independent oracle: -log softmax[target], written out longhand.
        let logits = [0.2f64, -1.1, 0.7, 1.5, 0.0, -0.4];
        let targets = [2usize, 0];
        let mut expect = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &logits[r * 3..(r + 1) * 3];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[tgt].exp() / denom).ln();
        }
        expect /= 2.0;
        let loss = cross_entropy(&logits, &targets, 3);
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x: Vec<f64> = (0..8).map(|v| v as f64 * 0.3 - 1.0).collect(); // t=1, heads=2, hd=4
        let mut out = vec![0.0; 8];
        rope(&x, 1, 2, 4, 10_000.0, 0, false, &mut out);
        assert_eq!(out, x);
    }
}
