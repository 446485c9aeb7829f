// SPDX-License-Identifier: Apache-2.0

//! Row-batched transformer primitives with hand-written backward passes.
//!
//! Activations are row-major `[rows x width]` f32 buffers. Linear layers store
//! weights as `[out x in]`, so a forward pass is `Y = X W^T + b`.

pub(crate) const LN_EPS: f32 = 1e-5;

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_K: f32 = 0.044_715;

/// `out = x w^T` (`beta = 0`) or `out += x w^T` (`beta = 1`).
pub(crate) fn linear_fwd(x: &[f32], rows: usize, w: &[f32], n_in: usize, n_out: usize, out: &mut [f32]) {
    debug_assert_eq!(x.len(), rows * n_in);
    debug_assert_eq!(w.len(), n_out * n_in);
    debug_assert_eq!(out.len(), rows * n_out);
    // SAFETY: slice lengths checked above; strides describe those slices.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            n_in,
            n_out,
            1.0,
            x.as_ptr(),
            n_in as isize,
            1,
            w.as_ptr(),
            1,
            n_in as isize,
            0.0,
            out.as_mut_ptr(),
            n_out as isize,
            1,
        );
    }
}

/// Backward of [`linear_fwd`]: accumulates `dw += dy^T x`, `db += sum_rows dy`
/// and, when `dx` is given, `dx += dy w`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_bwd(
    x: &[f32],
    dy: &[f32],
    rows: usize,
    w: &[f32],
    n_in: usize,
    n_out: usize,
    dw: &mut [f32],
    db: &mut [f32],
    dx: Option<&mut [f32]>,
) {
    debug_assert_eq!(dy.len(), rows * n_out);
    // SAFETY: all buffers sized by the caller to the stated shapes.
    unsafe {
        matrixmultiply::sgemm(
            n_out,
            rows,
            n_in,
            1.0,
            dy.as_ptr(),
            1,
            n_out as isize,
            x.as_ptr(),
            n_in as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            n_in as isize,
            1,
        );
    }
    for r in 0..rows {
        for (b, &g) in db.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
            *b += g;
        }
    }
    if let Some(dx) = dx {
        debug_assert_eq!(dx.len(), rows * n_in);
        // SAFETY: as above.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                n_out,
                n_in,
                1.0,
                dy.as_ptr(),
                n_out as isize,
                1,
                w.as_ptr(),
                n_in as isize,
                1,
                1.0,
                dx.as_mut_ptr(),
                n_in as isize,
                1,
            );
        }
    }
}

pub(crate) fn add_bias(y: &mut [f32], bias: &[f32]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// LayerNorm over each row. Writes normalized-and-affine output to `out` and,
/// when requested, the per-row mean and reciprocal std for the backward pass.
pub(crate) fn layer_norm_fwd(
    x: &[f32],
    width: usize,
    gain: &[f32],
    bias: &[f32],
    out: &mut [f32],
    mut stats: Option<(&mut [f32], &mut [f32])>,
) {
    for (r, (xr, yr)) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)).enumerate() {
        let mean = xr.iter().sum::<f32>() / width as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / width as f32;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..width {
            yr[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        }
        if let Some((means, rstds)) = stats.as_mut() {
            means[r] = mean;
            rstds[r] = rstd;
        }
    }
}

/// Backward of [`layer_norm_fwd`]; accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_bwd(
    x: &[f32],
    dy: &[f32],
    width: usize,
    gain: &[f32],
    means: &[f32],
    rstds: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
) {
    let n = width as f32;
    let mut xhat = vec![0.0f32; width];
    let mut dxhat = vec![0.0f32; width];
    for r in 0..x.len() / width {
        let xr = &x[r * width..(r + 1) * width];
        let dyr = &dy[r * width..(r + 1) * width];
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_d = 0.0f32;
        let mut sum_dx = 0.0f32;
        for i in 0..width {
            xhat[i] = (xr[i] - mean) * rstd;
            dgain[i] += dyr[i] * xhat[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            sum_d += dxhat[i];
            sum_dx += dxhat[i] * xhat[i];
        }
        let dxr = &mut dx[r * width..(r + 1) * width];
        for i in 0..width {
            dxr[i] += rstd * (dxhat[i] - sum_d / n - xhat[i] * sum_dx / n);
        }
    }
}

#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Causal multi-head self-attention for one sequence.
///
/// `q`, `k`, `v` and `ctx` are `[len x d_model]`; head `h` owns columns
/// `h*dh..(h+1)*dh`. `probs`, if given, receives `[heads x len x len]`
/// attention weights (zero above the diagonal).
pub(crate) fn causal_attention_fwd(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    len: usize,
    d_model: usize,
    n_heads: usize,
    ctx: &mut [f32],
    mut probs: Option<&mut [f32]>,
) {
    let dh = d_model / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut scores = vec![0.0f32; len];
    ctx.fill(0.0);
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..len {
            let qi = &q[i * d_model + off..i * d_model + off + dh];
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k[j * d_model + off..j * d_model + off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0f32;
            for s in scores.iter_mut().take(i + 1) {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = 1.0 / sum;
            let ci = &mut ctx[i * d_model + off..i * d_model + off + dh];
            for j in 0..=i {
                let p = scores[j] * inv;
                scores[j] = p;
                let vj = &v[j * d_model + off..j * d_model + off + dh];
                for (c, &vv) in ci.iter_mut().zip(vj) {
                    *c += p * vv;
                }
            }
            if let Some(pr) = probs.as_mut() {
                let row = &mut pr[(h * len + i) * len..(h * len + i + 1) * len];
                row[..=i].copy_from_slice(&scores[..=i]);
                row[i + 1..].fill(0.0);
            }
        }
    }
}

/// Backward of [`causal_attention_fwd`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_attention_bwd(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dctx: &[f32],
    len: usize,
    d_model: usize,
    n_heads: usize,
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let dh = d_model / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dp = vec![0.0f32; len];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..len {
            let p = &probs[(h * len + i) * len..(h * len + i + 1) * len];
            let dci = &dctx[i * d_model + off..i * d_model + off + dh];
            let mut dot = 0.0f32;
            for j in 0..=i {
                let vj = &v[j * d_model + off..j * d_model + off + dh];
                dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += dp[j] * p[j];
                let dvj = &mut dv[j * d_model + off..j * d_model + off + dh];
                for (d, &g) in dvj.iter_mut().zip(dci) {
                    *d += p[j] * g;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    dq[i * d_model + off + t] += ds * k[j * d_model + off + t];
                    dk[j * d_model + off + t] += ds * q[i * d_model + off + t];
                }
            }
        }
    }
}
