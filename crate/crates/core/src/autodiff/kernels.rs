//! Dense kernels behind the tape's structured ops: 3x3 zero-padded conv2d
//! and per-channel instance normalization, forward and backward.
//!
//! The conv loops are written as fused three-tap row passes so LLVM can
//! vectorize them; output channels (forward, weight grads) and input
//! channels (input grads) are embarrassingly parallel, which keeps rayon
//! execution bit-deterministic regardless of thread count.

use rayon::prelude::*;

/// Work threshold below which the conv kernels stay single-threaded.
const PAR_MIN_FLOPS: usize = 1 << 20;

/// y[co] = b[co] + sum_ci x[ci] * w[co,ci] with a 3x3 kernel, stride 1,
/// zero padding 1. x: [cin,h,w], w: [cout,cin,3,3], y: [cout,h,w].
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    y: &mut [f64],
) {
    debug_assert_eq!(x.len(), cin * h * wd);
    debug_assert_eq!(w.len(), cout * cin * 9);
    debug_assert_eq!(y.len(), cout * h * wd);
    let plane = h * wd;
    let run = |co: usize, yc: &mut [f64]| {
        yc.fill(b[co]);
        for ci in 0..cin {
            let xc = &x[ci * plane..(ci + 1) * plane];
            let wk = &w[(co * cin + ci) * 9..][..9];
            // interior rows: all nine taps in one fused pass
            if h >= 3 {
                for r_out in 1..h - 1 {
                    let (above, rest) = xc[(r_out - 1) * wd..(r_out + 2) * wd].split_at(wd);
                    let (center, below) = rest.split_at(wd);
                    let yrow = &mut yc[r_out * wd..(r_out + 1) * wd];
                    row_conv9(yrow, above, center, below, wk);
                }
            }
            // boundary rows (every row when h <= 2): per-tap with clipping
            let edges = [0, h - 1];
            let n_edges = if h == 1 { 1 } else { 2 };
            for &r_out in &edges[..n_edges] {
                for (ky, tap) in wk.chunks_exact(3).enumerate() {
                    let r_in = r_out + ky;
                    if r_in < 1 || r_in > h {
                        continue;
                    }
                    let xrow = &xc[(r_in - 1) * wd..r_in * wd];
                    let yrow = &mut yc[r_out * wd..(r_out + 1) * wd];
                    row_conv_acc(yrow, xrow, tap[0], tap[1], tap[2]);
                }
            }
        }
    };
    if cout * cin * plane * 9 >= PAR_MIN_FLOPS {
        y.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(co, yc)| run(co, yc));
    } else {
        for (co, yc) in y.chunks_mut(plane).enumerate() {
            run(co, yc);
        }
    }
}

/// Gradients of [`conv2d_forward`] w.r.t. x, w and b given cotangent gy.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let plane = h * wd;
    let parallel = cout * cin * plane * 9 >= PAR_MIN_FLOPS;

    // bias: plain per-channel sums
    for co in 0..cout {
        gb[co] += gy[co * plane..(co + 1) * plane].iter().sum::<f64>();
    }

    // weights: gw[co,ci,ky,kx] = sum_{valid r,c} gy[co,r,c] * x[ci,r+ky-1,c+kx-1]
    let wgrad = |co: usize, gwc: &mut [f64]| {
        let gyc = &gy[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let xc = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..3usize {
                let Some(rows) = shifted_rows(h, ky) else {
                    continue;
                };
                let mut acc = [0.0f64; 3];
                for (r_out, r_in) in rows {
                    let gyrow = &gyc[r_out * wd..(r_out + 1) * wd];
                    let xrow = &xc[r_in * wd..(r_in + 1) * wd];
                    row_corr_taps(gyrow, xrow, &mut acc);
                }
                for kx in 0..3 {
                    gwc[ci * 9 + ky * 3 + kx] += acc[kx];
                }
            }
        }
    };
    if parallel {
        gw.par_chunks_mut(cin * 9)
            .enumerate()
            .for_each(|(co, gwc)| wgrad(co, gwc));
    } else {
        for (co, gwc) in gw.chunks_mut(cin * 9).enumerate() {
            wgrad(co, gwc);
        }
    }

    // input: the forward pairs (r_out, r_in) scatter w * x[r_in] into
    // y[r_out], so the transpose accumulates w * gy[r_out] into gx[r_in];
    // on interior rows this is a nine-tap pass with the kernel flipped in
    // both axes.
    let xgrad = |ci: usize, gxc: &mut [f64]| {
        for co in 0..cout {
            let gyc = &gy[co * plane..(co + 1) * plane];
            let wk = &w[(co * cin + ci) * 9..][..9];
            let flipped = [
                wk[8], wk[7], wk[6], wk[5], wk[4], wk[3], wk[2], wk[1], wk[0],
            ];
            if h >= 3 {
                for r in 1..h - 1 {
                    let (above, rest) = gyc[(r - 1) * wd..(r + 2) * wd].split_at(wd);
                    let (center, below) = rest.split_at(wd);
                    let gxrow = &mut gxc[r * wd..(r + 1) * wd];
                    row_conv9(gxrow, above, center, below, &flipped);
                }
            }
            let edges = [0, h - 1];
            let n_edges = if h == 1 { 1 } else { 2 };
            for &gx_r in &edges[..n_edges] {
                for ky in 0..3usize {
                    // gy row = gx row + 1 - ky must stay in range
                    let gy_r = gx_r + 1;
                    if gy_r < ky || gy_r - ky >= h {
                        continue;
                    }
                    let gy_r = gy_r - ky;
                    let gyrow = &gyc[gy_r * wd..(gy_r + 1) * wd];
                    let gxrow = &mut gxc[gx_r * wd..(gx_r + 1) * wd];
                    row_conv_acc(gxrow, gyrow, wk[ky * 3 + 2], wk[ky * 3 + 1], wk[ky * 3]);
                }
            }
        }
    };
    if parallel {
        gx.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(ci, gxc)| xgrad(ci, gxc));
    } else {
        for (ci, gxc) in gx.chunks_mut(plane).enumerate() {
            xgrad(ci, gxc);
        }
    }
}

/// (output row, input row) pairs for a vertical kernel offset `ky` in
/// {0,1,2}: input row = output row + ky - 1, clipped to the valid range.
fn shifted_rows(h: usize, ky: usize) -> Option<impl Iterator<Item = (usize, usize)>> {
    let (out_start, in_start, len) = match ky {
        0 => (1, 0, h.saturating_sub(1)),
        1 => (0, 0, h),
        2 => (0, 1, h.saturating_sub(1)),
        _ => unreachable!(),
    };
    if len == 0 {
        return None;
    }
    Some((0..len).map(move |i| (out_start + i, in_start + i)))
}

/// Fused nine-tap accumulation for an interior output row: above/center/
/// below are the three input rows, wk the 3x3 kernel row-major.
#[inline]
fn row_conv9(yrow: &mut [f64], above: &[f64], center: &[f64], below: &[f64], wk: &[f64]) {
    let n = yrow.len();
    if n == 1 {
        yrow[0] += wk[1] * above[0] + wk[4] * center[0] + wk[7] * below[0];
        return;
    }
    yrow[0] += wk[1] * above[0]
        + wk[2] * above[1]
        + wk[4] * center[0]
        + wk[5] * center[1]
        + wk[7] * below[0]
        + wk[8] * below[1];
    for c in 1..n - 1 {
        yrow[c] += wk[0] * above[c - 1]
            + wk[1] * above[c]
            + wk[2] * above[c + 1]
            + wk[3] * center[c - 1]
            + wk[4] * center[c]
            + wk[5] * center[c + 1]
            + wk[6] * below[c - 1]
            + wk[7] * below[c]
            + wk[8] * below[c + 1];
    }
    yrow[n - 1] += wk[0] * above[n - 2]
        + wk[1] * above[n - 1]
        + wk[3] * center[n - 2]
        + wk[4] * center[n - 1]
        + wk[6] * below[n - 2]
        + wk[7] * below[n - 1];
}

/// yrow += w0*xrow[c-1] + w1*xrow[c] + w2*xrow[c+1], zero outside.
#[inline]
fn row_conv_acc(yrow: &mut [f64], xrow: &[f64], w0: f64, w1: f64, w2: f64) {
    let n = yrow.len();
    if n == 1 {
        yrow[0] += w1 * xrow[0];
        return;
    }
    yrow[0] += w1 * xrow[0] + w2 * xrow[1];
    for c in 1..n - 1 {
        yrow[c] += w0 * xrow[c - 1] + w1 * xrow[c] + w2 * xrow[c + 1];
    }
    yrow[n - 1] += w0 * xrow[n - 2] + w1 * xrow[n - 1];
}

/// acc[kx] += sum_c gyrow[c] * xrow[c + kx - 1], zero outside.
#[inline]
fn row_corr_taps(gyrow: &[f64], xrow: &[f64], acc: &mut [f64; 3]) {
    let n = gyrow.len();
    let mut a0 = 0.0;
    let mut a1 = 0.0;
    let mut a2 = 0.0;
    for c in 0..n {
        let g = gyrow[c];
        if c >= 1 {
            a0 += g * xrow[c - 1];
        }
        a1 += g * xrow[c];
        if c + 1 < n {
            a2 += g * xrow[c + 1];
        }
    }
    acc[0] += a0;
    acc[1] += a1;
    acc[2] += a2;
}

/// Per-channel statistics cached by the forward pass for reuse in backward.
pub struct InstanceNormStats {
    pub mu: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// y_c = (x_c - mu_c) / sqrt(var_c + eps) * gain_c + bias_c, statistics taken
/// per channel over H*W. Biased variance (1/n), matching the usual layer.
pub fn instance_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    channels: usize,
    plane: usize,
    eps: f64,
    y: &mut [f64],
) -> InstanceNormStats {
    let mut mu = vec![0.0; channels];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let xc = &x[c * plane..(c + 1) * plane];
        let m = xc.iter().sum::<f64>() / plane as f64;
        let var = xc.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
        let is = 1.0 / (var + eps).sqrt();
        mu[c] = m;
        inv_std[c] = is;
        let yc = &mut y[c * plane..(c + 1) * plane];
        for (yo, &xi) in yc.iter_mut().zip(xc) {
            *yo = (xi - m) * is * gain[c] + bias[c];
        }
    }
    InstanceNormStats { mu, inv_std }
}

pub fn instance_norm_backward(
    x: &[f64],
    gain: &[f64],
    stats: &InstanceNormStats,
    gy: &[f64],
    channels: usize,
    plane: usize,
    gx: &mut [f64],
    ggain: &mut [f64],
    gbias: &mut [f64],
) {
    let n = plane as f64;
    for c in 0..channels {
        let xc = &x[c * plane..(c + 1) * plane];
        let gyc = &gy[c * plane..(c + 1) * plane];
        let (mu, is) = (stats.mu[c], stats.inv_std[c]);
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for (&g, &xi) in gyc.iter().zip(xc) {
            sum_gy += g;
            sum_gy_xhat += g * (xi - mu) * is;
        }
        gbias[c] += sum_gy;
        ggain[c] += sum_gy_xhat;
        let k = gain[c] * is;
        let mean_gy = sum_gy / n;
        let mean_gy_xhat = sum_gy_xhat / n;
        let gxc = &mut gx[c * plane..(c + 1) * plane];
        for i in 0..plane {
            let xhat = (xc[i] - mu) * is;
            gxc[i] += k * (gyc[i] - mean_gy - xhat * mean_gy_xhat);
        }
    }
}
