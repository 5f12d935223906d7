//! Raw numeric loops shared by tape ops and the value-side data pipeline.
//! Everything here is deterministic: fixed iteration order, no threading.

use super::Scalar;

/// out[m,n] = a[m,k] . b[k,n]
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == F::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_il * b_row[j];
            }
        }
    }
}

/// out[m,n] = a[m,k] . b[n,k]^T  (dot products of rows)
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for l in 0..k {
                acc = acc + a_row[l] * b_row[l];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out[m,n] = a[k,m]^T . b[k,n]
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for l in 0..k {
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let a_li = a[l * m + i];
            if a_li == F::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_li * b_row[j];
            }
        }
    }
}

/// Valid output-column range [lo, hi) such that `o*stride + tap - pad` lands
/// inside [0, limit) for all o in the range.
fn tap_range(out_len: usize, limit: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let s = stride as isize;
    let shift = tap as isize - pad as isize;
    // o*s + shift >= 0  =>  o >= ceil(-shift / s)
    let lo = (-shift + s - 1).div_euclid(s).max(0) as usize;
    // o*s + shift <= limit-1  =>  o <= floor((limit-1-shift)/s)
    let hi_i = (limit as isize - 1 - shift).div_euclid(s) + 1;
    let hi = hi_i.clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Cross-correlation (machine-learning "conv") over NCHW input with an
/// OIKK kernel, zero padding. Output dims must be precomputed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    nb: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [F],
) {
    debug_assert_eq!(out.len(), nb * co * oh * ow);
    for n in 0..nb {
        for o in 0..co {
            let out_plane = &mut out[(n * co + o) * oh * ow..][..oh * ow];
            for c in 0..ci {
                let x_plane = &x[(n * ci + c) * h * wd..][..h * wd];
                let w_tap = &w[(o * ci + c) * k * k..][..k * k];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w_tap[kh * k + kw];
                        let (lo, hi) = tap_range(ow, wd, stride, kw, pad);
                        for oy in 0..oh {
                            let iy = (oy * stride + kh) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * wd..][..wd];
                            let out_row = &mut out_plane[oy * ow..][..ow];
                            if stride == 1 {
                                let shift = kw as isize - pad as isize;
                                for ox in lo..hi {
                                    out_row[ox] =
                                        out_row[ox] + wv * x_row[(ox as isize + shift) as usize];
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * stride + kw) as isize - pad as isize;
                                    out_row[ox] = out_row[ox] + wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass of `conv2d_forward`. Accumulates into `dx`/`dw` when the
/// corresponding slot is `Some`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    g: &[F],
    nb: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
) {
    for n in 0..nb {
        for o in 0..co {
            let g_plane = &g[(n * co + o) * oh * ow..][..oh * ow];
            for c in 0..ci {
                let x_plane = &x[(n * ci + c) * h * wd..][..h * wd];
                let w_tap = &w[(o * ci + c) * k * k..][..k * k];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w_tap[kh * k + kw];
                        let (lo, hi) = tap_range(ow, wd, stride, kw, pad);
                        let mut dw_acc = F::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + kh) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let g_row = &g_plane[oy * ow..][..ow];
                            let x_row = &x_plane[iy as usize * wd..][..wd];
                            if dw.is_some() {
                                for ox in lo..hi {
                                    let ix = (ox * stride + kw) as isize - pad as isize;
                                    dw_acc = dw_acc + g_row[ox] * x_row[ix as usize];
                                }
                            }
                            if let Some(dx_buf) = dx.as_deref_mut() {
                                let dx_row =
                                    &mut dx_buf[(n * ci + c) * h * wd + iy as usize * wd..][..wd];
                                for ox in lo..hi {
                                    let ix = (ox * stride + kw) as isize - pad as isize;
                                    dx_row[ix as usize] = dx_row[ix as usize] + wv * g_row[ox];
                                }
                            }
                        }
                        if let Some(dw_buf) = dw.as_deref_mut() {
                            let slot = (o * ci + c) * k * k + kh * k + kw;
                            dw_buf[slot] = dw_buf[slot] + dw_acc;
                        }
                    }
                }
            }
        }
    }
}

/// Per-output-index source taps for 1-D bilinear resampling with the
/// half-pixel (align_corners = false) convention. Fractions stay in f64 so
/// the same table drives f32 and f64 tensors identically.
pub fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = (floor as isize).clamp(0, in_len as isize - 1) as usize;
            let i1 = (floor as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of an NCHW block. Exact identity when sizes match.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_resize_nchw<F: Scalar>(
    x: &[F],
    nb: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let mut out = vec![F::zero(); nb * c * oh * ow];
    for plane in 0..nb * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src[y0 * w..][..w];
            let r1 = &src[y1 * w..][..w];
            let fy = F::from_f64(fy);
            let gy = F::one() - fy;
            let drow = &mut dst[oy * ow..][..ow];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = F::from_f64(fx);
                let gx = F::one() - fx;
                let top = gx * r0[x0] + fx * r0[x1];
                let bot = gx * r1[x0] + fx * r1[x1];
                drow[ox] = gy * top + fy * bot;
            }
        }
    }
    out
}

/// Backward of `bilinear_resize_nchw`: scatter output grads through the same
/// interpolation weights.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_resize_backward_nchw<F: Scalar>(
    g: &[F],
    nb: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [F],
) {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    for plane in 0..nb * c {
        let gp = &g[plane * oh * ow..][..oh * ow];
        let dp = &mut dx[plane * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = F::from_f64(fy);
            let gy = F::one() - fy;
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gv = gp[oy * ow + ox];
                let fx = F::from_f64(fx);
                let gx = F::one() - fx;
                dp[y0 * w + x0] = dp[y0 * w + x0] + gv * gy * gx;
                dp[y0 * w + x1] = dp[y0 * w + x1] + gv * gy * fx;
                dp[y1 * w + x0] = dp[y1 * w + x0] + gv * fy * gx;
                dp[y1 * w + x1] = dp[y1 * w + x1] + gv * fy * fx;
            }
        }
    }
}

/// 1-D box-overlap weights for area-average downsampling: output cell `o`
/// integrates the source interval [o*r, (o+1)*r), r = in/out.
pub fn area_axis(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let r = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let lo = o as f64 * r;
            let hi = (o as f64 + 1.0) * r;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(in_len);
            let mut taps = Vec::new();
            for i in first..last {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / r));
                }
            }
            taps
        })
        .collect()
}

/// Area-average resample of a single H*W plane (used to pool ground-truth
/// masks down to prediction resolutions).
pub fn area_average_2d<F: Scalar>(x: &[F], h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let ys = area_axis(h, oh);
    let xs = area_axis(w, ow);
    let mut out = vec![F::zero(); oh * ow];
    for (oy, ytaps) in ys.iter().enumerate() {
        for (ox, xtaps) in xs.iter().enumerate() {
            let mut acc = 0.0f64;
            for &(iy, wy) in ytaps {
                for &(ix, wx) in xtaps {
                    acc += wy * wx * x[iy * w + ix].to_f64();
                }
            }
            out[oy * ow + ox] = F::from_f64(acc);
        }
    }
    out
}
