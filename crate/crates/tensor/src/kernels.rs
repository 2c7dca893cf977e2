//! Slice-level forward/backward kernels shared by the tape and by the
//! cache-based inference path.

use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row layer normalization. Row `r` uses gain/bias row `groups[r]`.
/// Writes the normalized input `xhat` and reciprocal deviation for backward.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    groups: &[usize],
    eps: T,
    y: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (r, row) in x.chunks_exact(d).enumerate() {
        let g = &gain[groups[r] * d..(groups[r] + 1) * d];
        let b = &bias[groups[r] * d..(groups[r] + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let out = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
            out[j] = xh[j] * g[j] + b[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    d: usize,
    gain: &[T],
    groups: &[usize],
    xhat: &[T],
    rstd: &[T],
    dx: Option<&mut [T]>,
    mut dgain: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = dx;
    let mut dxhat = vec![T::zero(); d];
    for (r, dyr) in dy.chunks_exact(d).enumerate() {
        let grp = groups[r];
        let g = &gain[grp * d..(grp + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        if let Some(dg) = dgain.as_deref_mut() {
            let dg = &mut dg[grp * d..(grp + 1) * d];
            for j in 0..d {
                dg[j] = dg[j] + dyr[j] * xh[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            let db = &mut db[grp * d..(grp + 1) * d];
            for j in 0..d {
                db[j] = db[j] + dyr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for j in 0..d {
                dxhat[j] = dyr[j] * g[j];
                mean_dxh = mean_dxh + dxhat[j];
                mean_dxh_xh = mean_dxh_xh + dxhat[j] * xh[j];
            }
            mean_dxh = mean_dxh * inv_d;
            mean_dxh_xh = mean_dxh_xh * inv_d;
            let dxr = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                dxr[j] = dxr[j] + rstd[r] * (dxhat[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Log-softmax of one row, in place.
pub fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Multi-head scaled dot-product attention for a single query row against
/// `n_keys` contiguous key/value rows of width `d`.
///
/// `probs` receives `heads × n_keys` pre-dropout attention weights;
/// `drop`, when given, holds the matching keep-mask scale factors.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    n_keys: usize,
    d: usize,
    heads: usize,
    probs: &mut [T],
    drop: Option<&[T]>,
    out: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    out.iter_mut().for_each(|v| *v = T::zero());
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        for j in 0..n_keys {
            p[j] = dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
        }
        softmax_in_place(p);
        let oh = &mut out[h * dh..(h + 1) * dh];
        for j in 0..n_keys {
            let w = match drop {
                Some(m) => p[j] * m[h * n_keys + j],
                None => p[j],
            };
            axpy(w, &values[j * d + h * dh..j * d + (h + 1) * dh], oh);
        }
    }
}

/// Backward of [`attend_row`]; accumulates into `dq`, `dkeys`, `dvalues`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    keys: &[T],
    values: &[T],
    n_keys: usize,
    d: usize,
    heads: usize,
    probs: &[T],
    drop: Option<&[T]>,
    dq: &mut [T],
    dkeys: &mut [T],
    dvalues: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dp = vec![T::zero(); n_keys];
    for h in 0..heads {
        let doh = &dout[h * dh..(h + 1) * dh];
        let p = &probs[h * n_keys..(h + 1) * n_keys];
        for j in 0..n_keys {
            let m = drop.map_or(T::one(), |m| m[h * n_keys + j]);
            let vj = h * dh + j * d;
            dp[j] = dot(doh, &values[vj..vj + dh]) * m;
            axpy(p[j] * m, doh, &mut dvalues[vj..vj + dh]);
        }
        let c = dot(p, &dp);
        let qh = &q[h * dh..(h + 1) * dh];
        for j in 0..n_keys {
            let ds = p[j] * (dp[j] - c) * scale;
            let kj = h * dh + j * d;
            axpy(ds, &keys[kj..kj + dh], &mut dq[h * dh..(h + 1) * dh]);
            axpy(ds, qh, &mut dkeys[kj..kj + dh]);
        }
    }
}

/// Label-smoothed cross-entropy summed over rows with a gold label.
/// Returns `(loss_sum, counted_rows)` and fills `probs` with row softmaxes.
pub fn smoothed_xent_forward<T: Scalar>(
    logits: &[T],
    vocab: usize,
    gold: &[Option<usize>],
    eps_ls: f64,
    probs: &mut [T],
) -> (f64, usize) {
    let off = if vocab > 1 { eps_ls / (vocab - 1) as f64 } else { 0.0 };
    let mut total = 0.0;
    let mut count = 0;
    let mut lp = vec![T::zero(); vocab];
    for (r, row) in logits.chunks_exact(vocab).enumerate() {
        lp.copy_from_slice(row);
        log_softmax_in_place(&mut lp);
        for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(&lp) {
            *p = l.exp();
        }
        let Some(g) = gold[r] else { continue };
        count += 1;
        let mut row_loss = -(1.0 - eps_ls) * lp[g].as_f64();
        if off > 0.0 {
            let rest: f64 = lp.iter().map(|v| v.as_f64()).sum::<f64>() - lp[g].as_f64();
            row_loss -= off * rest;
        }
        total += row_loss;
    }
    (total, count)
}
