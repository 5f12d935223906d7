//! The assembled network and its ablation variants. The dual-branch model
//! encodes the image twice (CNN pyramid at the main resolution, transformer
//! pyramid at a fixed smaller resolution), grafts the decoded transformer
//! feature onto R5, decodes up to R2, and reads out saliency maps with 1x1
//! sigmoid heads. Baseline variants drop one branch entirely.

use crate::cmgm::{CamOutput, Cmgm, PredictionHead};
use crate::decoder::{AttnDecoder, CnnDecoder};
use crate::encoders::{attn_base_channels, cnn_base_channels, AttnEncoder, CnnEncoder, PyramidSpec};
use crate::error::{GraftError, Result};
use crate::nn::{FwdCtx, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// CNN branch only: encoder, plain decoder, head.
    BaselineCnn,
    /// Transformer branch only: encoder, decoder to stage 1, head.
    BaselineAttn,
    /// Both branches grafted; trains with the main and side losses.
    Cmgm,
    /// Grafted model plus the attention-guided loss on the CAM.
    CmgmAgl,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::BaselineCnn => "baseline_cnn",
            Variant::BaselineAttn => "baseline_attn",
            Variant::Cmgm => "cmgm",
            Variant::CmgmAgl => "cmgm_agl",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "baseline_cnn" => Some(Variant::BaselineCnn),
            "baseline_attn" => Some(Variant::BaselineAttn),
            "cmgm" => Some(Variant::Cmgm),
            "cmgm_agl" => Some(Variant::CmgmAgl),
            _ => None,
        }
    }

    pub const ALL: [Variant; 4] =
        [Variant::BaselineCnn, Variant::BaselineAttn, Variant::Cmgm, Variant::CmgmAgl];

    pub fn has_graft(self) -> bool {
        matches!(self, Variant::Cmgm | Variant::CmgmAgl)
    }

    pub fn uses_agl(self) -> bool {
        self == Variant::CmgmAgl
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Nominal square input side for the CNN branch (multiple of 32).
    pub cnn_hw: usize,
    /// Fixed square input side for the transformer branch.
    pub attn_hw: usize,
    pub patch_size: usize,
    /// Scales both backbones' widths; 1.0 is the reference size.
    pub channel_factor: f64,
    /// Heads in the transformer encoder blocks.
    pub attn_heads: usize,
    /// Heads in the grafting attention.
    pub cmgm_heads: usize,
    /// Which transformer stage (1..=4) is grafted onto R5.
    pub graft_stage: usize,
    /// Maximum token count the grafting attention accepts.
    pub attention_cap: usize,
}

/// Attention-branch input side for a given CNN side: a quarter of it, snapped
/// to the transformer's divisibility unit, never below 16.
pub fn default_attn_hw(cnn_hw: usize, patch_size: usize) -> usize {
    let unit = patch_size * 4;
    let raw = cnn_hw / 4;
    let snapped = ((raw as f64 / unit as f64).round() as usize).max(1) * unit;
    snapped.max(16)
}

impl Default for ModelConfig {
    /// Desk-scale defaults: tiny widths, 64px inputs, graft at stage 2.
    fn default() -> Self {
        ModelConfig {
            variant: Variant::CmgmAgl,
            cnn_hw: 64,
            attn_hw: default_attn_hw(64, 4),
            patch_size: 4,
            channel_factor: 0.125,
            attn_heads: 2,
            cmgm_heads: 1,
            graft_stage: 2,
            attention_cap: 4096,
        }
    }
}

impl ModelConfig {
    pub fn cnn_spec(&self) -> PyramidSpec {
        PyramidSpec::cnn(self.cnn_hw, cnn_base_channels(self.channel_factor))
    }

    pub fn attn_spec(&self) -> PyramidSpec {
        PyramidSpec::attn(
            self.attn_hw,
            attn_base_channels(self.channel_factor),
            self.patch_size,
            self.attn_heads,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.graft_stage) {
            return Err(GraftError::Config(format!(
                "graft_stage {} not in 1..=4",
                self.graft_stage
            )));
        }
        if !(self.channel_factor > 0.0) {
            return Err(GraftError::Config("channel_factor must be positive".into()));
        }
        self.cnn_spec().validate()?;
        if self.variant != Variant::BaselineCnn {
            self.attn_spec().validate()?;
        }
        if self.variant.has_graft() {
            let d = self.cnn_spec().stage_channels(5);
            if self.cmgm_heads == 0 || d % self.cmgm_heads != 0 {
                return Err(GraftError::Config(format!(
                    "cmgm_heads {} must divide the R5 width {d}",
                    self.cmgm_heads
                )));
            }
        }
        Ok(())
    }
}

/// Saliency maps from one forward pass. All maps are sigmoid outputs.
pub struct ModelOutputs {
    /// Final prediction at the CNN input's resolution, [N,1,H,W].
    pub p: Var,
    /// Coarse read of R5, [N,1,H/32,W/32]; grafted variants only.
    pub rp: Option<Var>,
    /// Coarse read of the decoded graft-stage feature; grafted variants only.
    pub sp: Option<Var>,
    /// Cross-attention map [N,1,T,T]; grafted variants only.
    pub cam: Option<Var>,
}

pub struct GraftNet {
    pub config: ModelConfig,
    cnn: Option<CnnEncoder>,
    attn: Option<AttnEncoder>,
    attn_dec: Option<AttnDecoder>,
    cmgm: Option<Cmgm>,
    cnn_dec: Option<CnnDecoder>,
    head_main: PredictionHead,
    head_rp: Option<PredictionHead>,
    head_sp: Option<PredictionHead>,
}

impl GraftNet {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        config: ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let cnn_spec = config.cnn_spec();
        let attn_spec = config.attn_spec();
        let v = config.variant;

        let cnn = if v == Variant::BaselineAttn {
            None
        } else {
            Some(CnnEncoder::init(st, rng, cnn_spec.clone())?)
        };
        let attn = if v == Variant::BaselineCnn {
            None
        } else {
            Some(AttnEncoder::init(st, rng, attn_spec.clone())?)
        };
        let attn_dec = match v {
            Variant::BaselineCnn => None,
            Variant::BaselineAttn => {
                Some(AttnDecoder::init(st, rng, "dec_attn", &attn_spec, 1)?)
            }
            _ => Some(AttnDecoder::init(st, rng, "dec_attn", &attn_spec, config.graft_stage)?),
        };
        let cmgm = if v.has_graft() {
            Some(Cmgm::init(
                st,
                rng,
                "cmgm",
                cnn_spec.stage_channels(5),
                attn_spec.stage_channels(config.graft_stage),
                config.cmgm_heads,
                config.attention_cap,
            )?)
        } else {
            None
        };
        let cnn_dec = if v == Variant::BaselineAttn {
            None
        } else {
            Some(CnnDecoder::init(st, rng, "dec_cnn", &cnn_spec, v.has_graft())?)
        };
        let head_main_in = match v {
            Variant::BaselineAttn => attn_spec.stage_channels(1),
            _ => cnn_spec.stage_channels(2),
        };
        let head_main = PredictionHead::init(st, rng, "head_main", head_main_in)?;
        let (head_rp, head_sp) = if v.has_graft() {
            (
                Some(PredictionHead::init(st, rng, "head_rp", cnn_spec.stage_channels(5))?),
                Some(PredictionHead::init(
                    st,
                    rng,
                    "head_sp",
                    attn_spec.stage_channels(config.graft_stage),
                )?),
            )
        } else {
            (None, None)
        };

        Ok(GraftNet { config, cnn, attn, attn_dec, cmgm, cnn_dec, head_main, head_rp, head_sp })
    }

    /// Full forward pass. `img_cnn` is [N,3,Hc,Wc] (the jittered training
    /// size), `img_attn` is [N,3,Ha,Wa] at the fixed transformer size. The
    /// final map always comes back at `img_cnn`'s resolution.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        img_cnn: Var,
        img_attn: Var,
    ) -> Result<ModelOutputs> {
        let out_hw = {
            let s = tape.shape(img_cnn);
            if s.len() != 4 {
                return Err(GraftError::shape("model", format!("want NCHW image, got {s:?}")));
            }
            (s[2], s[3])
        };

        if self.config.variant == Variant::BaselineAttn {
            let pyr = self.attn.as_ref().unwrap().forward(tape, ctx, img_attn)?;
            let d1 = self.attn_dec.as_ref().unwrap().forward(tape, ctx, &pyr)?;
            let p_small = self.head_main.forward(tape, ctx, d1)?;
            let p = tape.bilinear_resize(p_small, out_hw.0, out_hw.1)?;
            return Ok(ModelOutputs { p, rp: None, sp: None, cam: None });
        }

        let cnn_pyr = self.cnn.as_ref().unwrap().forward(tape, ctx, img_cnn)?;

        let (graft, rp, sp, cam) = if self.config.variant.has_graft() {
            let attn_pyr = self.attn.as_ref().unwrap().forward(tape, ctx, img_attn)?;
            let f_s = self.attn_dec.as_ref().unwrap().forward(tape, ctx, &attn_pyr)?;
            let r5 = cnn_pyr.stage(5)?;
            let CamOutput { z, cam, .. } =
                self.cmgm.as_ref().unwrap().graft(tape, ctx, r5, f_s)?;
            let rp = self.head_rp.as_ref().unwrap().forward(tape, ctx, r5)?;
            let sp = self.head_sp.as_ref().unwrap().forward(tape, ctx, f_s)?;
            (Some(z), Some(rp), Some(sp), Some(cam))
        } else {
            (None, None, None, None)
        };

        let decoded = self.cnn_dec.as_ref().unwrap().forward(tape, ctx, &cnn_pyr, graft)?;
        let p_small = self.head_main.forward(tape, ctx, decoded)?;
        let p = tape.bilinear_resize(p_small, out_hw.0, out_hw.1)?;
        Ok(ModelOutputs { p, rp, sp, cam })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy_config(variant: Variant) -> ModelConfig {
        ModelConfig { variant, ..ModelConfig::default() }
    }

    fn forward_once(
        variant: Variant,
        seed: u64,
    ) -> (ModelOutputs, Tape<f32>, ParamStore<f32>) {
        let mut st = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(seed);
        let net = GraftNet::init(&mut st, &mut rng, toy_config(variant)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&st, false);
        let mut data_rng = SplitMix64::new(seed + 100);
        let ic = tape.leaf(Tensor::rand_uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut data_rng), false);
        let ia = tape.leaf(Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut data_rng), false);
        let out = net.forward(&mut tape, &mut ctx, ic, ia).unwrap();
        (out, tape, st)
    }

    #[test]
    fn all_variants_wire_up() {
        for variant in Variant::ALL {
            let (out, tape, _st) = forward_once(variant, 50);
            assert_eq!(tape.shape(out.p), &[2, 1, 64, 64], "{variant:?}");
            assert_eq!(out.rp.is_some(), variant.has_graft());
            assert_eq!(out.sp.is_some(), variant.has_graft());
            assert_eq!(out.cam.is_some(), variant.has_graft());
            assert!(tape.value(out.p).data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            if let (Some(rp), Some(sp), Some(cam)) = (out.rp, out.sp, out.cam) {
                assert_eq!(tape.shape(rp), &[2, 1, 2, 2]); // 64/32
                assert_eq!(tape.shape(sp), &[2, 1, 2, 2]); // (16/4)/2
                assert_eq!(tape.shape(cam), &[2, 1, 4, 4]); // T = 2*2
            }
        }
    }

    #[test]
    fn multiscale_input_changes_output_size() {
        let mut st = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(51);
        let net = GraftNet::init(&mut st, &mut rng, toy_config(Variant::CmgmAgl)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&st, false);
        let ic = tape.leaf(Tensor::<f32>::full(&[1, 3, 96, 96], 0.5), false);
        let ia = tape.leaf(Tensor::<f32>::full(&[1, 3, 16, 16], 0.5), false);
        let out = net.forward(&mut tape, &mut ctx, ic, ia).unwrap();
        assert_eq!(tape.shape(out.p), &[1, 1, 96, 96]);
        assert_eq!(tape.shape(out.rp.unwrap()), &[1, 1, 3, 3]);
        assert_eq!(tape.shape(out.cam.unwrap()), &[1, 1, 9, 9]);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_outputs_bitwise() {
        let mut st = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(52);
        let net = GraftNet::init(&mut st, &mut rng, toy_config(Variant::CmgmAgl)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        st.save(dir.path()).unwrap();

        // different init seed, then restore
        let mut st2 = ParamStore::<f32>::new();
        let mut rng2 = SplitMix64::new(999);
        let net2 = GraftNet::init(&mut st2, &mut rng2, toy_config(Variant::CmgmAgl)).unwrap();
        st2.load(dir.path()).unwrap();

        let mut data_rng = SplitMix64::new(53);
        let img_c = Tensor::<f32>::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut data_rng);
        let img_a = Tensor::<f32>::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut data_rng);

        let run = |net: &GraftNet, st: &ParamStore<f32>| {
            let mut tape = Tape::new();
            let mut ctx = FwdCtx::new(st, false);
            let ic = tape.leaf(img_c.clone(), false);
            let ia = tape.leaf(img_a.clone(), false);
            let out = net.forward(&mut tape, &mut ctx, ic, ia).unwrap();
            tape.value(out.p).data().to_vec()
        };
        let a = run(&net, &st);
        let b = run(&net2, &st2);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn graft_stage_sweep_builds_and_runs() {
        for graft_stage in 1..=4usize {
            let cfg = ModelConfig { graft_stage, ..toy_config(Variant::Cmgm) };
            let mut st = ParamStore::<f32>::new();
            let mut rng = SplitMix64::new(54);
            let net = GraftNet::init(&mut st, &mut rng, cfg).unwrap();
            let mut tape = Tape::new();
            let mut ctx = FwdCtx::new(&st, false);
            let ic = tape.leaf(Tensor::<f32>::full(&[1, 3, 64, 64], 0.3), false);
            let ia = tape.leaf(Tensor::<f32>::full(&[1, 3, 16, 16], 0.3), false);
            let out = net.forward(&mut tape, &mut ctx, ic, ia).unwrap();
            assert_eq!(tape.shape(out.p), &[1, 1, 64, 64], "graft {graft_stage}");
        }
    }
}
