//! Evaluation metrics, all in f64: MAE, the thresholded F-measure curve
//! (histogram fast path, exactly equal to brute force), S-measure, E-measure,
//! and symmetric boundary displacement error. Degenerate inputs (empty
//! ground truth, empty boundaries, constant maps) take documented branches
//! instead of NaNs.

use crate::error::{GraftError, Result};
use crate::tensor::{kernels, Tensor};

/// beta^2 in the F-measure.
pub const F_BETA_SQ: f64 = 0.3;

fn check_pair(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<(usize, usize)> {
    if p.rank() != 2 || g.rank() != 2 || p.shape() != g.shape() {
        return Err(GraftError::shape(
            "metrics",
            format!("want matching [H,W] maps, got {:?} and {:?}", p.shape(), g.shape()),
        ));
    }
    if p.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(GraftError::domain("metrics", "prediction values must lie in [0,1]"));
    }
    Ok((p.shape()[0], p.shape()[1]))
}

fn fg(g: &Tensor<f64>) -> Vec<bool> {
    g.data().iter().map(|&v| v >= 0.5).collect()
}

pub fn mae(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<f64> {
    check_pair(p, g)?;
    let n = p.numel() as f64;
    Ok(p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

pub struct FCurve {
    /// F at thresholds k/256 for k = 1..=255.
    pub curve: Vec<f64>,
    pub f_max: f64,
    /// Ground truth had no foreground; the whole curve is forced to 0.
    pub empty_gt: bool,
}

/// 256-bin histograms of prediction values over fg/bg pixels; suffix sums
/// give exact TP/FP counts for every threshold k/256 at once.
pub fn f_histograms(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<([u64; 256], [u64; 256], u64)> {
    check_pair(p, g)?;
    let gb = fg(g);
    let mut fg_hist = [0u64; 256];
    let mut bg_hist = [0u64; 256];
    let mut gt_count = 0u64;
    for (&pv, &is_fg) in p.data().iter().zip(&gb) {
        let bin = ((pv * 256.0).floor() as usize).min(255);
        if is_fg {
            fg_hist[bin] += 1;
            gt_count += 1;
        } else {
            bg_hist[bin] += 1;
        }
    }
    Ok((fg_hist, bg_hist, gt_count))
}

/// Turns fg/bg histograms into the 255-entry F curve. Shared by per-sample
/// and dataset-level aggregation (which sums histograms first).
pub fn f_curve_from_histograms(
    fg_hist: &[u64; 256],
    bg_hist: &[u64; 256],
    gt_count: u64,
) -> FCurve {
    if gt_count == 0 {
        return FCurve { curve: vec![0.0; 255], f_max: 0.0, empty_gt: true };
    }
    // suffix[k] = number of pixels with value >= k/256
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut curve = vec![0.0; 255];
    for k in (1..=255usize).rev() {
        tp += fg_hist[k];
        fp += bg_hist[k];
        let predicted = tp + fp;
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = tp as f64 / gt_count as f64;
        let denom = F_BETA_SQ * precision + recall;
        curve[k - 1] =
            if denom == 0.0 { 0.0 } else { (1.0 + F_BETA_SQ) * precision * recall / denom };
    }
    let f_max = curve.iter().cloned().fold(0.0, f64::max);
    FCurve { curve, f_max, empty_gt: false }
}

pub fn f_measure_curve(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<FCurve> {
    let (fg_hist, bg_hist, gt_count) = f_histograms(p, g)?;
    Ok(f_curve_from_histograms(&fg_hist, &bg_hist, gt_count))
}

/// Structure measure: 0.5*S_object + 0.5*S_region. Constant ground truths
/// take the standard degenerate branches; the final score clamps at 0.
pub fn s_measure(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_pair(p, g)?;
    let gb = fg(g);
    let n = h * w;
    let fg_count = gb.iter().filter(|&&b| b).count();
    let mean_p = p.data().iter().sum::<f64>() / n as f64;
    if fg_count == 0 {
        return Ok(1.0 - mean_p);
    }
    if fg_count == n {
        return Ok(mean_p);
    }
    let s = 0.5 * s_object(p, &gb) + 0.5 * s_region(p, &gb, h, w);
    Ok(s.max(0.0))
}

/// Mean/sample-std similarity of P over the foreground plus 1-P over the
/// background, weighted by the foreground fraction.
fn s_object(p: &Tensor<f64>, gb: &[bool]) -> f64 {
    let score = |values: &mut dyn Iterator<Item = f64>| -> f64 {
        let vals: Vec<f64> = values.collect();
        let n = vals.len();
        if n == 0 {
            return 0.0;
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let std = if n <= 1 {
            0.0
        } else {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
        };
        2.0 * mean / (mean * mean + 1.0 + std)
    };
    let d = p.data();
    let o_fg = score(&mut d.iter().zip(gb).filter(|(_, &m)| m).map(|(&v, _)| v));
    let o_bg = score(&mut d.iter().zip(gb).filter(|(_, &m)| !m).map(|(&v, _)| 1.0 - v));
    let u = gb.iter().filter(|&&b| b).count() as f64 / gb.len() as f64;
    u * o_fg + (1.0 - u) * o_bg
}

/// SSIM-style similarity over the four blocks split at the ground-truth
/// centroid (centroid cell goes to the top/left block), weighted by area.
fn s_region(p: &Tensor<f64>, gb: &[bool], h: usize, w: usize) -> f64 {
    let (mut sum_r, mut sum_c, mut cnt) = (0.0, 0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            if gb[r * w + c] {
                sum_r += r as f64;
                sum_c += c as f64;
                cnt += 1;
            }
        }
    }
    let (mu_r, mu_c) = (sum_r / cnt as f64, sum_c / cnt as f64);
    let pr = if h >= 2 { ((mu_r.floor() as usize) + 1).min(h - 1) } else { h };
    let pc = if w >= 2 { ((mu_c.floor() as usize) + 1).min(w - 1) } else { w };
    let blocks: [(std::ops::Range<usize>, std::ops::Range<usize>); 4] =
        [(0..pr, 0..pc), (0..pr, pc..w), (pr..h, 0..pc), (pr..h, pc..w)];
    let mut total = 0.0;
    for (rows, cols) in blocks {
        let count = rows.len() * cols.len();
        if count == 0 {
            continue;
        }
        let weight = count as f64 / (h * w) as f64;
        total += weight * block_ssim(p, gb, w, rows, cols);
    }
    total
}

fn block_ssim(
    p: &Tensor<f64>,
    gb: &[bool],
    w: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> f64 {
    let n = (rows.len() * cols.len()) as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in rows.clone() {
        for c in cols.clone() {
            sx += p.data()[r * w + c];
            sy += if gb[r * w + c] { 1.0 } else { 0.0 };
        }
    }
    let (x, y) = (sx / n, sy / n);
    let (mut vx, mut vy, mut vxy) = (0.0, 0.0, 0.0);
    for r in rows.clone() {
        for c in cols.clone() {
            let dx = p.data()[r * w + c] - x;
            let dy = (if gb[r * w + c] { 1.0 } else { 0.0 }) - y;
            vx += dx * dx;
            vy += dy * dy;
            vxy += dx * dy;
        }
    }
    if n > 1.0 {
        vx /= n - 1.0;
        vy /= n - 1.0;
        vxy /= n - 1.0;
    } else {
        vx = 0.0;
        vy = 0.0;
        vxy = 0.0;
    }
    let alpha = 4.0 * x * y * vxy;
    let beta = (x * x + y * y) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Enhanced-alignment measure: P is binarized at min(2*mean(P), 1), both
/// maps are demeaned, and the alignment is averaged over all pixels.
/// Constant ground truths reduce to rewarding agreement with the constant.
pub fn e_measure(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_pair(p, g)?;
    let n = (h * w) as f64;
    let gb = fg(g);
    let mean_p = p.data().iter().sum::<f64>() / n;
    let th = (2.0 * mean_p).min(1.0);
    // a zero threshold (all-black prediction) binarizes strictly above zero,
    // so an empty prediction stays empty
    let keep = |v: f64| if th > 0.0 { v >= th } else { v > 0.0 };
    let fm: Vec<f64> = p.data().iter().map(|&v| if keep(v) { 1.0 } else { 0.0 }).collect();
    let fg_count = gb.iter().filter(|&&b| b).count();
    if fg_count == 0 {
        return Ok(fm.iter().map(|&v| 1.0 - v).sum::<f64>() / n);
    }
    if fg_count == gb.len() {
        return Ok(fm.iter().sum::<f64>() / n);
    }
    let mean_fm = fm.iter().sum::<f64>() / n;
    let mean_g = fg_count as f64 / n;
    let mut total = 0.0;
    for (&f, &m) in fm.iter().zip(&gb) {
        let phi_p = f - mean_fm;
        let phi_g = (if m { 1.0 } else { 0.0 }) - mean_g;
        // phi_g is never 0 here (G is non-constant binary), so no epsilon
        let align = 2.0 * phi_g * phi_p / (phi_g * phi_g + phi_p * phi_p);
        total += (align + 1.0).powi(2) / 4.0;
    }
    Ok(total / n)
}

pub struct BdeResult {
    pub value: f64,
    /// A boundary set was empty; value is the image diagonal (max penalty).
    pub flagged: bool,
}

/// Inner boundary under 4-connectivity: foreground pixels with at least one
/// background 4-neighbor, where out-of-image counts as background.
pub(crate) fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            let exposed = (r == 0 || !mask[(r - 1) * w + c])
                || (r + 1 == h || !mask[(r + 1) * w + c])
                || (c == 0 || !mask[r * w + c - 1])
                || (c + 1 == w || !mask[r * w + c + 1]);
            if exposed {
                out.push((r, c));
            }
        }
    }
    out
}

fn mean_nearest(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(r, c) in from {
        let mut best = f64::INFINITY;
        for &(r2, c2) in to {
            let dr = r as f64 - r2 as f64;
            let dc = c as f64 - c2 as f64;
            best = best.min(dr * dr + dc * dc);
        }
        total += best.sqrt();
    }
    total / from.len() as f64
}

/// Symmetric mean boundary displacement in pixels; `t` binarizes P.
pub fn bde(p: &Tensor<f64>, g: &Tensor<f64>, t: f64) -> Result<BdeResult> {
    let (h, w) = check_pair(p, g)?;
    let pm: Vec<bool> = p.data().iter().map(|&v| v >= t).collect();
    let gm = fg(g);
    let pb = boundary_pixels(&pm, h, w);
    let gb = boundary_pixels(&gm, h, w);
    if pb.is_empty() || gb.is_empty() {
        let diag = ((h * h + w * w) as f64).sqrt();
        return Ok(BdeResult { value: diag, flagged: true });
    }
    let value = 0.5 * (mean_nearest(&pb, &gb) + mean_nearest(&gb, &pb));
    Ok(BdeResult { value, flagged: false })
}

/// Everything `eval` reports for one sample.
pub struct EvalResult {
    pub mae: f64,
    pub f_max: f64,
    pub f_curve: Vec<f64>,
    pub s_measure: f64,
    pub e_measure: f64,
    pub bde: f64,
}

/// Runs the full metric suite on one prediction/ground-truth pair. The
/// prediction is bilinearly resized to the ground truth's dims first.
/// Returns human-readable warnings for the degenerate branches taken.
pub fn evaluate_pair(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<(EvalResult, Vec<String>)> {
    if p.rank() != 2 || g.rank() != 2 {
        return Err(GraftError::shape(
            "evaluate_pair",
            format!("want [H,W] maps, got {:?} and {:?}", p.shape(), g.shape()),
        ));
    }
    let p = if p.shape() == g.shape() {
        p.clone()
    } else {
        let (h, w) = (p.shape()[0], p.shape()[1]);
        let (oh, ow) = (g.shape()[0], g.shape()[1]);
        Tensor::new(
            vec![oh, ow],
            kernels::bilinear_resize_nchw(p.data(), 1, 1, h, w, oh, ow),
        )?
    };
    let mut warnings = Vec::new();
    let mae_v = mae(&p, g)?;
    let fc = f_measure_curve(&p, g)?;
    if fc.empty_gt {
        warnings.push("ground truth has no foreground; F forced to 0".to_string());
    }
    let s = s_measure(&p, g)?;
    let e = e_measure(&p, g)?;
    let b = bde(&p, g, 0.5)?;
    if b.flagged {
        warnings.push("empty boundary set; BDE set to the image diagonal".to_string());
    }
    Ok((
        EvalResult {
            mae: mae_v,
            f_max: fc.f_max,
            f_curve: fc.curve,
            s_measure: s,
            e_measure: e,
            bde: b.value,
        },
        warnings,
    ))
}
