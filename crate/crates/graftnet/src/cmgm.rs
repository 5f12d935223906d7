//! Cross-branch grafting: the transformer feature attends into the CNN
//! feature at the graft point. Queries and values come from the CNN tokens,
//! keys from the (resized) transformer tokens; the attention matrix is also
//! symmetrized and squashed into a cross-attention map (CAM) that the
//! attention-guided loss supervises.

use crate::encoders::{merge_heads, split_heads};
use crate::error::{GraftError, Result};
use crate::nn::{
    BatchNorm2dLayer, Conv2dLayer, ConvBnRelu, FwdCtx, LayerNormLayer, LinearLayer, LrGroup,
    ParamStore,
};
use crate::rng::SplitMix64;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Everything the graft produces. `z` feeds the CNN decoder; `cam` feeds the
/// attention-guided loss; `y` / `y_sym` are kept for inspection.
pub struct CamOutput {
    /// Grafted feature, [N, d, h, w] at the CNN feature's geometry.
    pub z: Var,
    /// Cross-attention map in (0,1), [N, 1, T, T] with T = h*w.
    pub cam: Var,
    /// Row-stochastic attention, [N, heads, T, T].
    pub y: Var,
    /// y + y^T (exactly symmetric), [N, heads, T, T].
    pub y_sym: Var,
    /// Attention output tokens after the output projection, [N, T, d].
    pub attended: Var,
}

pub struct Cmgm {
    norm_r: LayerNormLayer,
    norm_s: LayerNormLayer,
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    wo: LinearLayer,
    cam_conv: Conv2dLayer,
    cam_bn: BatchNorm2dLayer,
    fuse: ConvBnRelu,
    heads: usize,
    /// Hard limit on token count; T*T attention buffers grow fast.
    attention_cap: usize,
}

impl Cmgm {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        cnn_channels: usize,
        attn_channels: usize,
        heads: usize,
        attention_cap: usize,
    ) -> Result<Self> {
        if heads == 0 || cnn_channels % heads != 0 {
            return Err(GraftError::Config(format!(
                "cmgm heads {heads} must divide the cnn width {cnn_channels}"
            )));
        }
        let g = LrGroup::Other;
        let d = cnn_channels;
        Ok(Cmgm {
            norm_r: LayerNormLayer::init(st, &format!("{name}.norm_r"), d, g)?,
            norm_s: LayerNormLayer::init(st, &format!("{name}.norm_s"), attn_channels, g)?,
            wq: LinearLayer::init(st, rng, &format!("{name}.wq"), d, d, true, g)?,
            wk: LinearLayer::init(st, rng, &format!("{name}.wk"), attn_channels, d, true, g)?,
            wv: LinearLayer::init(st, rng, &format!("{name}.wv"), d, d, true, g)?,
            wo: LinearLayer::init(st, rng, &format!("{name}.wo"), d, d, true, g)?,
            cam_conv: Conv2dLayer::init(
                st,
                rng,
                &format!("{name}.cam_conv"),
                heads,
                1,
                1,
                1,
                0,
                false,
                g,
            )?,
            cam_bn: BatchNorm2dLayer::init(st, &format!("{name}.cam_bn"), 1, g)?,
            fuse: ConvBnRelu::init(st, rng, &format!("{name}.fuse"), d, d, 3, 1, g)?,
            heads,
            attention_cap,
        })
    }

    /// Grafts `f_s` (transformer feature, any spatial size) onto `f_r` (CNN
    /// feature, [N, d, h, w]). `f_s` is bilinearly resized to h x w first.
    pub fn graft<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        f_r: Var,
        f_s: Var,
    ) -> Result<CamOutput> {
        let sr = tape.shape(f_r).to_vec();
        let ss = tape.shape(f_s).to_vec();
        if sr.len() != 4 || ss.len() != 4 || sr[0] != ss[0] {
            return Err(GraftError::shape(
                "cmgm",
                format!("want two NCHW features with equal batch, got {sr:?} and {ss:?}"),
            ));
        }
        let (n, d, h, w) = (sr[0], sr[1], sr[2], sr[3]);
        let t = h * w;
        if t > self.attention_cap {
            return Err(GraftError::AttentionCap { positions: t, cap: self.attention_cap });
        }
        let dh = d / self.heads;

        let s_resized = tape.bilinear_resize(f_s, h, w)?;
        let r_tok = tape.flatten_spatial(f_r)?;
        let s_tok = tape.flatten_spatial(s_resized)?;
        let rn = self.norm_r.forward(tape, ctx, r_tok)?;
        let sn = self.norm_s.forward(tape, ctx, s_tok)?;

        let q = self.wq.forward(tape, ctx, rn)?;
        let k = self.wk.forward(tape, ctx, sn)?;
        let v = self.wv.forward(tape, ctx, rn)?;
        let qh = split_heads(tape, q, self.heads)?;
        let kh = split_heads(tape, k, self.heads)?;
        let vh = split_heads(tape, v, self.heads)?;

        let kt = tape.transpose_last2(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let flat = tape.reshape(scaled, &[n * self.heads * t, t])?;
        let y_flat = tape.softmax_rows(flat)?;
        let y_bat = tape.reshape(y_flat, &[n * self.heads, t, t])?;
        let y = tape.reshape(y_bat, &[n, self.heads, t, t])?;

        // CAM: symmetrize, collapse heads, normalize, squash to (0,1)
        let y_t = tape.transpose_last2(y)?;
        let y_sym = tape.add(y, y_t)?;
        let cam_pre = self.cam_conv.forward(tape, ctx, y_sym)?;
        let cam_pre = self.cam_bn.forward(tape, ctx, cam_pre)?;
        let cam_pre = tape.relu(cam_pre)?;
        let cam = tape.sigmoid(cam_pre)?;

        // grafted feature: attention output with two shortcuts back to the CNN side
        let att_h = tape.bmm(y_bat, vh)?;
        let att = merge_heads(tape, att_h, n, self.heads)?;
        let attended = self.wo.forward(tape, ctx, att)?;
        let z_tok = tape.add(attended, v)?;
        let z_spatial = tape.unflatten_spatial(z_tok, h, w)?;
        let fused = self.fuse.forward(tape, ctx, z_spatial)?;
        let z = tape.add(fused, z_spatial)?;

        Ok(CamOutput { z, cam, y, y_sym, attended })
    }
}

/// 1x1 conv + sigmoid: turns a feature map into a single-channel saliency
/// map in (0,1). Used for the coarse side reads and the final prediction.
pub struct PredictionHead {
    conv: Conv2dLayer,
}

impl PredictionHead {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        in_c: usize,
    ) -> Result<Self> {
        Ok(PredictionHead {
            conv: Conv2dLayer::init(st, rng, &format!("{name}.conv"), in_c, 1, 1, 1, 0, true, LrGroup::Other)?,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv.forward(tape, ctx, x)?;
        tape.sigmoid(y)
    }
}
