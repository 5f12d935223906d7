//! Training objective: pixel BCE, soft IoU, the attention-guided loss over
//! the cross-attention map, and their weighted composite. The AGL weight
//! tensor is a heuristic computed from the side predictions' values and is
//! deliberately kept out of the gradient graph.

use crate::error::{GraftError, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{kernels, Scalar, Tensor};

/// Predictions are clamped to [EPS, 1-EPS] before any log.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnSource {
    G,
    Rp,
    Sp,
    Cam,
}

/// Rank-1 similarity matrix of a flattened mask; entries of a binary source
/// are exactly 0 or 1 and the matrix is exactly symmetric.
pub struct AttentionMatrix<F: Scalar> {
    pub values: Tensor<F>,
    pub source: AttnSource,
}

/// Outer product of the row-major-flattened mask with itself:
/// out[x][y] = m[x] * m[y], for a [H,W] mask in [0,1].
pub fn attn_matrix<F: Scalar>(m: &Tensor<F>, source: AttnSource) -> Result<AttentionMatrix<F>> {
    if m.rank() != 2 {
        return Err(GraftError::shape("attn_matrix", format!("want [H,W], got {:?}", m.shape())));
    }
    if m.data().iter().any(|&v| v < F::zero() || v > F::one()) {
        return Err(GraftError::domain("attn_matrix", "mask values must lie in [0,1]"));
    }
    let t = m.numel();
    let d = m.data();
    let mut out = Vec::with_capacity(t * t);
    for x in 0..t {
        for y in 0..t {
            out.push(d[x] * d[y]);
        }
    }
    Ok(AttentionMatrix { values: Tensor::new(vec![t, t], out)?, source })
}

/// Per-sample attention matrices for a [N,1,H,W] batch of masks: [N,1,T,T].
pub fn attn_matrix_batch<F: Scalar>(m: &Tensor<F>, source: AttnSource) -> Result<Tensor<F>> {
    let s = m.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(GraftError::shape(
            "attn_matrix",
            format!("want [N,1,H,W], got {:?}", m.shape()),
        ));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let t = h * w;
    let mut out = Vec::with_capacity(n * t * t);
    for i in 0..n {
        let slice = Tensor::new(vec![h, w], m.data()[i * t..(i + 1) * t].to_vec())?;
        out.extend_from_slice(attn_matrix(&slice, source)?.values.data());
    }
    Tensor::new(vec![n, 1, t, t], out)
}

/// Unnegated elementwise cross-entropy term g*ln(p) + (1-g)*ln(1-p), with p
/// clamped away from {0,1}. `g` is a constant in the graph.
pub fn bce_pixel<F: Scalar>(tape: &mut Tape<F>, p: Var, g: Var) -> Result<Var> {
    let pc = tape.clamp(p, CLAMP_EPS, 1.0 - CLAMP_EPS)?;
    let ln_p = tape.ln(pc)?;
    let q = tape.one_minus(pc)?;
    let ln_q = tape.ln(q)?;
    let pos = tape.mul(g, ln_p)?;
    let g_neg = tape.one_minus(g)?;
    let neg = tape.mul(g_neg, ln_q)?;
    tape.add(pos, neg)
}

/// Mean binary cross entropy over every element: -mean(bce_pixel).
pub fn bce_loss<F: Scalar>(tape: &mut Tape<F>, p: Var, g: &Tensor<F>) -> Result<Var> {
    if tape.shape(p) != g.shape() {
        return Err(GraftError::shape(
            "bce_loss",
            format!("prediction {:?} vs target {:?}", tape.shape(p), g.shape()),
        ));
    }
    let gv = tape.constant(g.clone());
    let elem = bce_pixel(tape, p, gv)?;
    let m = tape.mean(elem)?;
    tape.scale(m, -1.0)
}

/// Smoothed soft IoU loss, averaged over the batch (first axis):
/// 1 - (sum(P*G)+1) / (sum(P+G-P*G)+1) per sample.
pub fn iou_loss<F: Scalar>(tape: &mut Tape<F>, p: Var, g: &Tensor<F>) -> Result<Var> {
    if tape.shape(p) != g.shape() {
        return Err(GraftError::shape(
            "iou_loss",
            format!("prediction {:?} vs target {:?}", tape.shape(p), g.shape()),
        ));
    }
    let gv = tape.constant(g.clone());
    let inter = tape.mul(p, gv)?;
    let pg = tape.add(p, gv)?;
    let union = tape.sub(pg, inter)?;
    let inter_s = tape.sum_per_sample(inter)?;
    let union_s = tape.sum_per_sample(union)?;
    let num = tape.add_scalar(inter_s, 1.0)?;
    let den = tape.add_scalar(union_s, 1.0)?;
    let ratio = tape.div(num, den)?;
    let frac = tape.one_minus(ratio)?;
    tape.mean(frac)
}

/// bce + iou against the same target; also reports the two component values.
pub fn bce_iou<F: Scalar>(tape: &mut Tape<F>, p: Var, g: &Tensor<F>) -> Result<(Var, f64, f64)> {
    let b = bce_loss(tape, p, g)?;
    let i = iou_loss(tape, p, g)?;
    let s = tape.add(b, i)?;
    Ok((s, scalar_of(tape, b), scalar_of(tape, i)))
}

fn scalar_of<F: Scalar>(tape: &Tape<F>, v: Var) -> f64 {
    tape.value(v).data()[0].to_f64()
}

/// The AGL weight map: w = (|G_a - RP_a| + |G_a - SP_a|)/2 + 1, in [1,2].
/// Pure value arithmetic — the weights never join the gradient graph.
pub fn agl_weights<F: Scalar>(
    g_a: &Tensor<F>,
    rp_a: &Tensor<F>,
    sp_a: &Tensor<F>,
) -> Result<Tensor<F>> {
    if g_a.shape() != rp_a.shape() || g_a.shape() != sp_a.shape() {
        return Err(GraftError::shape(
            "agl_weights",
            format!("{:?} vs {:?} vs {:?}", g_a.shape(), rp_a.shape(), sp_a.shape()),
        ));
    }
    let half = F::from_f64(0.5);
    let one = F::one();
    let data = g_a
        .data()
        .iter()
        .zip(rp_a.data())
        .zip(sp_a.data())
        .map(|((&g, &r), &s)| ((g - r).abs() + (g - s).abs()) * half + one)
        .collect();
    Tensor::new(g_a.shape().to_vec(), data)
}

/// Weighted BCE over the CAM with a fixed weight map:
/// -sum((1+beta*omega) * bce_pixel(CAM, G_a)) / sum(1+beta*omega).
pub fn agl_with_weights<F: Scalar>(
    tape: &mut Tape<F>,
    cam: Var,
    g_a: &Tensor<F>,
    omega: &Tensor<F>,
    beta: f64,
) -> Result<Var> {
    if tape.shape(cam) != g_a.shape() || g_a.shape() != omega.shape() {
        return Err(GraftError::shape(
            "agl",
            format!(
                "cam {:?} vs target {:?} vs weights {:?}",
                tape.shape(cam),
                g_a.shape(),
                omega.shape()
            ),
        ));
    }
    let b = F::from_f64(beta);
    let w = omega.map(|o| F::one() + b * o);
    let denom: f64 = w.data().iter().map(|&x| x.to_f64()).sum();
    let gv = tape.constant(g_a.clone());
    let elem = bce_pixel(tape, cam, gv)?;
    let wv = tape.constant(w);
    let weighted = tape.mul(wv, elem)?;
    let s = tape.sum(weighted)?;
    tape.scale(s, -1.0 / denom)
}

/// Attention-guided loss: weights derived from the side predictions' current
/// values (detached, so only the CAM receives gradient), then the weighted
/// BCE above.
pub fn agl<F: Scalar>(
    tape: &mut Tape<F>,
    cam: Var,
    g_a: &Tensor<F>,
    rp_a: &Tensor<F>,
    sp_a: &Tensor<F>,
    beta: f64,
) -> Result<Var> {
    let omega = agl_weights(g_a, rp_a, sp_a)?;
    agl_with_weights(tape, cam, g_a, &omega, beta)
}

/// Area-average a [N,1,H,W] mask down to oh x ow, then re-binarize at 0.5.
pub fn downsample_mask<F: Scalar>(g: &Tensor<F>, oh: usize, ow: usize) -> Result<Tensor<F>> {
    let s = g.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(GraftError::shape(
            "downsample_mask",
            format!("want [N,1,H,W], got {:?}", g.shape()),
        ));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let mut out = Vec::with_capacity(n * oh * ow);
    let threshold = F::from_f64(0.5);
    for i in 0..n {
        let avg = kernels::area_average_2d(&g.data()[i * h * w..(i + 1) * h * w], h, w, oh, ow);
        out.extend(avg.into_iter().map(|v| if v >= threshold { F::one() } else { F::zero() }));
    }
    Tensor::new(vec![n, 1, oh, ow], out)
}

/// Component values for logging (total is the differentiable scalar).
pub struct LossBreakdown {
    pub total: Var,
    pub bce_p: f64,
    pub iou_p: f64,
    pub agl: f64,
    pub aux: f64,
}

/// The full composite objective:
/// [bce+iou](P,G) + AGL(CAM) + 1/8 * ([bce+iou](RP,G_rp) + [bce+iou](SP,G_sp)).
/// G arrives at P's resolution; side targets are area-downsampled and
/// re-binarized; attention matrices are built at RP's (grafting) geometry.
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    p: Var,
    rp: Var,
    sp: Var,
    cam: Var,
    g: &Tensor<F>,
    beta: f64,
) -> Result<LossBreakdown> {
    let (g_a, omega) = cam_target_and_weights(tape, rp, sp, g)?;
    total_loss_frozen(tape, p, rp, sp, cam, g, beta, &g_a, &omega)
}

/// Builds the CAM's binary target G_a and the detached weight map from the
/// side predictions' current values.
pub fn cam_target_and_weights<F: Scalar>(
    tape: &Tape<F>,
    rp: Var,
    sp: Var,
    g: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let rs = tape.shape(rp).to_vec();
    if rs.len() != 4 || rs[1] != 1 {
        return Err(GraftError::shape("total_loss", format!("rp must be [N,1,h,w], got {rs:?}")));
    }
    let (rh, rw) = (rs[2], rs[3]);
    let g_rp = downsample_mask(g, rh, rw)?;
    let g_a = attn_matrix_batch(&g_rp, AttnSource::G)?;
    let rp_a = attn_matrix_batch(tape.value(rp), AttnSource::Rp)?;
    let sp_val = tape.value(sp);
    let ss = sp_val.shape().to_vec();
    let sp_at_graft = if (ss[2], ss[3]) == (rh, rw) {
        sp_val.clone()
    } else {
        let resized =
            kernels::bilinear_resize_nchw(sp_val.data(), ss[0], ss[1], ss[2], ss[3], rh, rw);
        Tensor::new(vec![ss[0], ss[1], rh, rw], resized)?
    };
    let sp_a = attn_matrix_batch(&sp_at_graft, AttnSource::Sp)?;
    let omega = agl_weights(&g_a, &rp_a, &sp_a)?;
    Ok((g_a, omega))
}

/// `total_loss` with the CAM target and weight map supplied by the caller.
/// The trainer lets `total_loss` derive them; verification harnesses pass a
/// fixed pair so finite differences see the same constants the graph used.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_frozen<F: Scalar>(
    tape: &mut Tape<F>,
    p: Var,
    rp: Var,
    sp: Var,
    cam: Var,
    g: &Tensor<F>,
    beta: f64,
    g_a: &Tensor<F>,
    omega: &Tensor<F>,
) -> Result<LossBreakdown> {
    let rs = tape.shape(rp).to_vec();
    let ss = tape.shape(sp).to_vec();
    let g_rp = downsample_mask(g, rs[2], rs[3])?;
    let g_sp = downsample_mask(g, ss[2], ss[3])?;

    let (main, bce_p, iou_p) = bce_iou(tape, p, g)?;
    let ag = agl_with_weights(tape, cam, g_a, omega, beta)?;
    let (aux_rp, _, _) = bce_iou(tape, rp, &g_rp)?;
    let (aux_sp, _, _) = bce_iou(tape, sp, &g_sp)?;
    let aux = tape.add(aux_rp, aux_sp)?;
    let aux_scaled = tape.scale(aux, 0.125)?;
    let main_ag = tape.add(main, ag)?;
    let total = tape.add(main_ag, aux_scaled)?;
    Ok(LossBreakdown {
        total,
        bce_p,
        iou_p,
        agl: scalar_of(tape, ag),
        aux: scalar_of(tape, aux),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::gradcheck;

    #[test]
    fn attn_matrix_of_identity_mask() {
        let m = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let a = attn_matrix(&m, AttnSource::G).unwrap();
        assert_eq!(a.values.shape(), &[4, 4]);
        for x in 0..4 {
            for y in 0..4 {
                let want = if (x == 0 || x == 3) && (y == 0 || y == 3) { 1.0 } else { 0.0 };
                assert_eq!(a.values.at(&[x, y]), want, "({x},{y})");
            }
        }
    }

    #[test]
    fn attn_matrix_is_symmetric_psd_and_binary_for_binary_masks() {
        let mut rng = SplitMix64::new(60);
        for _ in 0..50 {
            let m = Tensor::<f64>::from_fn(&[3, 3], |_| {
                if rng.bernoulli(0.5) {
                    1.0
                } else {
                    0.0
                }
            });
            let a = attn_matrix(&m, AttnSource::G).unwrap().values;
            let t = 9;
            for x in 0..t {
                for y in 0..t {
                    assert_eq!(a.at(&[x, y]), a.at(&[y, x]));
                    assert!(a.at(&[x, y]) == 0.0 || a.at(&[x, y]) == 1.0);
                }
            }
            // rank-1 PSD: v^T A v = (m . v)^2 >= 0
            let v: Vec<f64> = (0..t).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let mut quad = 0.0;
            for x in 0..t {
                for y in 0..t {
                    quad += v[x] * a.at(&[x, y]) * v[y];
                }
            }
            assert!(quad >= -1e-12, "quadratic form {quad}");
        }
        assert!(attn_matrix(&Tensor::new(vec![1, 2], vec![1.5f64, 0.0]).unwrap(), AttnSource::G)
            .is_err());
    }

    #[test]
    fn bce_pixel_matches_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(vec![3], vec![0.5, 1e-9, 0.999999999]).unwrap(), false);
        let g = tape.constant(Tensor::new(vec![3], vec![0.0, 1.0, 1.0]).unwrap());
        let e = bce_pixel(&mut tape, p, g).unwrap();
        let d = tape.value(e).data();
        assert!((d[0] - 0.5f64.ln()).abs() < 1e-12); // g=0, p=.5
        assert!((d[1] - 1e-7f64.ln()).abs() < 1e-9); // clamp kicked in
        assert!(d[2].abs() < 1e-6); // near-perfect positive
    }

    #[test]
    fn iou_loss_closed_forms_and_oracle() {
        // perfect binary match -> 0
        let g = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 0.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(g.clone(), false);
        let l = iou_loss(&mut tape, p, &g).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        // P=0 against n positives -> n/(n+1)
        let g1 = Tensor::new(vec![1, 1, 1, 3], vec![1.0f64, 1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let p0 = tape.leaf(Tensor::zeros(&[1, 1, 1, 3]), false);
        let l = iou_loss(&mut tape, p0, &g1).unwrap();
        assert!((tape.value(l).data()[0] - 0.75).abs() < 1e-12);

        // random 3x3 against a scalar oracle
        let mut rng = SplitMix64::new(61);
        let pv = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |_| rng.next_f64());
        let gv = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |_| {
            if rng.bernoulli(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let (mut inter, mut uni) = (0.0, 0.0);
        for (a, b) in pv.data().iter().zip(gv.data()) {
            inter += a * b;
            uni += a + b - a * b;
        }
        let want = 1.0 - (inter + 1.0) / (uni + 1.0);
        let mut tape = Tape::new();
        let p = tape.leaf(pv, false);
        let l = iou_loss(&mut tape, p, &gv).unwrap();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn iou_is_per_sample_before_batch_mean() {
        // two samples with very different areas; a global-sum version would
        // differ from the per-sample mean
        let g = Tensor::new(vec![2, 1, 1, 2], vec![1.0f64, 1.0, 0.0, 1.0]).unwrap();
        let pv = Tensor::new(vec![2, 1, 1, 2], vec![0.5f64, 0.5, 0.25, 0.75]).unwrap();
        let per_sample = |p: &[f64], g: &[f64]| {
            let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            let uni: f64 = p.iter().zip(g).map(|(a, b)| a + b - a * b).sum();
            1.0 - (inter + 1.0) / (uni + 1.0)
        };
        let want = 0.5
            * (per_sample(&pv.data()[..2], &g.data()[..2])
                + per_sample(&pv.data()[2..], &g.data()[2..]));
        let mut tape = Tape::new();
        let p = tape.leaf(pv, false);
        let l = iou_loss(&mut tape, p, &g).unwrap();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn agl_weights_stay_in_bounds_and_equal_weights_cancel() {
        let mut rng = SplitMix64::new(62);
        let g_a = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| {
            if rng.bernoulli(0.4) {
                1.0
            } else {
                0.0
            }
        });
        let rp_a = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| rng.next_f64());
        let sp_a = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| rng.next_f64());
        let w = agl_weights(&g_a, &rp_a, &sp_a).unwrap();
        assert!(w.data().iter().all(|&x| (1.0..=2.0).contains(&x)));

        // residual-free weights: loss equals plain mean bce for any beta
        let cam_v = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| rng.uniform(0.05, 0.95));
        for beta in [0.0, 0.7, 3.0] {
            let mut tape = Tape::new();
            let cam = tape.leaf(cam_v.clone(), false);
            let l = agl(&mut tape, cam, &g_a, &g_a, &g_a, beta).unwrap();
            let mut tape2 = Tape::new();
            let cam2 = tape2.leaf(cam_v.clone(), false);
            let plain = bce_loss(&mut tape2, cam2, &g_a).unwrap();
            let (a, b) = (tape.value(l).data()[0], tape2.value(plain).data()[0]);
            assert!((a - b).abs() < 1e-12, "beta {beta}: {a} vs {b}");
        }
    }

    #[test]
    fn agl_with_zero_beta_is_exactly_mean_bce() {
        let mut rng = SplitMix64::new(63);
        let g_a = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |_| {
            if rng.bernoulli(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let rp_a = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |_| rng.next_f64());
        let sp_a = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |_| rng.next_f64());
        let cam_v = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |_| rng.uniform(0.01, 0.99));
        let mut tape = Tape::new();
        let cam = tape.leaf(cam_v.clone(), false);
        let l = agl(&mut tape, cam, &g_a, &rp_a, &sp_a, 0.0).unwrap();
        let mut tape2 = Tape::new();
        let cam2 = tape2.leaf(cam_v, false);
        let plain = bce_loss(&mut tape2, cam2, &g_a).unwrap();
        assert!((tape.value(l).data()[0] - tape2.value(plain).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn agl_two_by_two_hand_case() {
        // G_a=[[1,0],[0,0]], CAM=0.5, RP_a=0, SP_a=1, beta=1
        let g_a = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        let rp_a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let sp_a = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let cam_v = Tensor::<f64>::full(&[1, 1, 2, 2], 0.5);
        // scalar brute force of the weight map and the weighted mean
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..4 {
            let g = g_a.data()[i];
            let omega = 0.5 * ((g - 0.0f64).abs() + (g - 1.0f64).abs()) + 1.0;
            let w = 1.0 + 1.0 * omega;
            let bce = g * 0.5f64.ln() + (1.0 - g) * 0.5f64.ln();
            num += w * bce;
            den += w;
        }
        let want = -num / den;
        let mut tape = Tape::new();
        let cam = tape.leaf(cam_v, false);
        let l = agl(&mut tape, cam, &g_a, &rp_a, &sp_a, 1.0).unwrap();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn agl_is_invariant_to_joint_index_permutation() {
        let mut rng = SplitMix64::new(64);
        let shape = [1usize, 1, 3, 3];
        let g_a = Tensor::<f64>::from_fn(&shape, |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
        let rp_a = Tensor::<f64>::from_fn(&shape, |_| rng.next_f64());
        let sp_a = Tensor::<f64>::from_fn(&shape, |_| rng.next_f64());
        let cam_v = Tensor::<f64>::from_fn(&shape, |_| rng.uniform(0.1, 0.9));
        let mut perm: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut perm);
        let apply = |t: &Tensor<f64>| {
            Tensor::from_fn(&shape, |i| t.data()[perm[i]])
        };
        let eval = |cam_v: &Tensor<f64>, g: &Tensor<f64>, r: &Tensor<f64>, s: &Tensor<f64>| {
            let mut tape = Tape::new();
            let cam = tape.leaf(cam_v.clone(), false);
            let l = agl(&mut tape, cam, g, r, s, 1.3).unwrap();
            tape.value(l).data()[0]
        };
        let a = eval(&cam_v, &g_a, &rp_a, &sp_a);
        let b = eval(&apply(&cam_v), &apply(&g_a), &apply(&rp_a), &apply(&sp_a));
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_give_near_zero_total() {
        // a mask whose every downsampled version is still clean binary
        let g = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| {
            let (r, c) = (i / 8, i % 8);
            if r < 4 && c < 4 {
                1.0
            } else {
                0.0
            }
        });
        let g_rp = downsample_mask(&g, 2, 2).unwrap();
        let g_a = attn_matrix_batch(&g_rp, AttnSource::G).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(g.clone(), false);
        let rp = tape.leaf(g_rp.clone(), false);
        let sp = tape.leaf(g_rp.clone(), false);
        let cam = tape.leaf(g_a, false);
        let out = total_loss(&mut tape, p, rp, sp, cam, &g, 1.0).unwrap();
        let total = tape.value(out.total).data()[0];
        assert!(total.abs() <= 1e-5, "total {total}");
        assert!(total >= 0.0);
    }

    #[test]
    fn breakdown_components_recompose_the_total() {
        let mut rng = SplitMix64::new(65);
        let g = Tensor::<f64>::from_fn(&[2, 1, 8, 8], |_| {
            if rng.bernoulli(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_fn(&[2, 1, 8, 8], |_| rng.uniform(0.1, 0.9)), false);
        let rp = tape.leaf(Tensor::from_fn(&[2, 1, 2, 2], |_| rng.uniform(0.1, 0.9)), false);
        let sp = tape.leaf(Tensor::from_fn(&[2, 1, 4, 4], |_| rng.uniform(0.1, 0.9)), false);
        let cam = tape.leaf(Tensor::from_fn(&[2, 1, 4, 4], |_| rng.uniform(0.1, 0.9)), false);
        let out = total_loss(&mut tape, p, rp, sp, cam, &g, 1.0).unwrap();
        let total = tape.value(out.total).data()[0];
        let recomposed = out.bce_p + out.iou_p + out.agl + out.aux / 8.0;
        assert!((total - recomposed).abs() < 1e-12, "{total} vs {recomposed}");
        assert!(total >= 0.0);

        // the auxiliary pair really is bce+iou on each side read
        let g_rp = downsample_mask(&g, 2, 2).unwrap();
        let g_sp = downsample_mask(&g, 4, 4).unwrap();
        let mut t2 = Tape::new();
        let rp2 = t2.leaf(tape.value(rp).clone(), false);
        let sp2 = t2.leaf(tape.value(sp).clone(), false);
        let (arp, _, _) = bce_iou(&mut t2, rp2, &g_rp).unwrap();
        let (asp, _, _) = bce_iou(&mut t2, sp2, &g_sp).unwrap();
        let aux_direct = t2.value(arp).data()[0] + t2.value(asp).data()[0];
        assert!((out.aux - aux_direct).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(66);
        let g = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| {
            if rng.bernoulli(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let p0 = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| rng.uniform(0.2, 0.8));
        let rp0 = Tensor::<f64>::from_fn(&[1, 1, 2, 2], |_| rng.uniform(0.2, 0.8));
        let sp0 = Tensor::<f64>::from_fn(&[1, 1, 2, 2], |_| rng.uniform(0.2, 0.8));
        let cam0 = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| rng.uniform(0.2, 0.8));

        // weights are a detached heuristic: freeze them at the base point so
        // finite differences probe only the differentiated path
        let (g_a, omega) = {
            let mut tape = Tape::new();
            let rp = tape.leaf(rp0.clone(), false);
            let sp = tape.leaf(sp0.clone(), false);
            cam_target_and_weights(&tape, rp, sp, &g).unwrap()
        };
        let g2 = g.clone();
        let err = gradcheck::grad_check(
            move |tape, vars| {
                let out = total_loss_frozen(
                    tape, vars[0], vars[1], vars[2], vars[3], &g2, 1.0, &g_a, &omega,
                )?;
                Ok(out.total)
            },
            &[p0, rp0, sp0, cam0],
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }
}
