//! Top-down decoders. A `DecoderBlock` adapts each of its inputs with a 3x3
//! conv-bn-relu, resizes everything to the largest spatial size present,
//! sums, and fuses with another 3x3 conv-bn-relu. The attention decoder
//! refines S4 down to the graft stage; the CNN decoder carries the grafted
//! feature from R5 up to R2 resolution.

use crate::encoders::PyramidSpec;
use crate::error::{GraftError, Result};
use crate::nn::{ConvBnRelu, FwdCtx, LrGroup, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;

pub struct DecoderBlock {
    adapters: Vec<ConvBnRelu>,
    fuse: ConvBnRelu,
}

impl DecoderBlock {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        in_channels: &[usize],
        out_c: usize,
    ) -> Result<Self> {
        if in_channels.is_empty() {
            return Err(GraftError::Config(format!("decoder block {name} needs inputs")));
        }
        let g = LrGroup::Other;
        let adapters = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvBnRelu::init(st, rng, &format!("{name}.adapt{i}"), c, out_c, 3, 1, g))
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvBnRelu::init(st, rng, &format!("{name}.fuse"), out_c, out_c, 3, 1, g)?;
        Ok(DecoderBlock { adapters, fuse })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        inputs: &[Var],
    ) -> Result<Var> {
        if inputs.len() != self.adapters.len() {
            return Err(GraftError::shape(
                "decoder_block",
                format!("expected {} inputs, got {}", self.adapters.len(), inputs.len()),
            ));
        }
        let mut target = (0usize, 0usize);
        for &v in inputs {
            let s = tape.shape(v);
            if s.len() != 4 {
                return Err(GraftError::shape("decoder_block", format!("want NCHW, got {s:?}")));
            }
            target = (target.0.max(s[2]), target.1.max(s[3]));
        }
        let mut acc: Option<Var> = None;
        for (adapter, &v) in self.adapters.iter().zip(inputs) {
            let mut a = adapter.forward(tape, ctx, v)?;
            let s = tape.shape(a).to_vec();
            if (s[2], s[3]) != target {
                a = tape.bilinear_resize(a, target.0, target.1)?;
            }
            acc = Some(match acc {
                None => a,
                Some(prev) => tape.add(prev, a)?,
            });
        }
        self.fuse.forward(tape, ctx, acc.unwrap())
    }
}

/// Refines the attention pyramid from stage 4 down to `graft_stage`,
/// doubling resolution at each step below stage 3.
pub struct AttnDecoder {
    blocks: Vec<(usize, DecoderBlock)>,
    pub graft_stage: usize,
    pub out_channels: usize,
}

impl AttnDecoder {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        spec: &PyramidSpec,
        graft_stage: usize,
    ) -> Result<Self> {
        if !(1..=4).contains(&graft_stage) {
            return Err(GraftError::Config(format!("graft stage {graft_stage} not in 1..=4")));
        }
        let c = |s: usize| spec.stage_channels(s);
        let mut blocks = vec![(
            4usize,
            DecoderBlock::init(st, rng, &format!("{name}.level4"), &[c(4)], c(4))?,
        )];
        for stage in (graft_stage..4).rev() {
            blocks.push((
                stage,
                DecoderBlock::init(
                    st,
                    rng,
                    &format!("{name}.level{stage}"),
                    &[c(stage + 1), c(stage)],
                    c(stage),
                )?,
            ));
        }
        Ok(AttnDecoder { blocks, graft_stage, out_channels: c(graft_stage) })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        pyr: &crate::encoders::FeaturePyramid,
    ) -> Result<Var> {
        let mut x = None;
        for (stage, block) in &self.blocks {
            let feat = pyr.stage(*stage)?;
            x = Some(match x {
                None => block.forward(tape, ctx, &[feat])?,
                Some(prev) => block.forward(tape, ctx, &[prev, feat])?,
            });
        }
        Ok(x.unwrap())
    }
}

/// Carries the deepest CNN feature (optionally grafted) up through R4..R2.
/// Output sits at R2 resolution with R2's width.
pub struct CnnDecoder {
    entry: DecoderBlock,
    ups: Vec<(usize, DecoderBlock)>,
    pub with_graft: bool,
    pub out_channels: usize,
}

impl CnnDecoder {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        spec: &PyramidSpec,
        with_graft: bool,
    ) -> Result<Self> {
        let c = |s: usize| spec.stage_channels(s);
        let entry_in: Vec<usize> = if with_graft { vec![c(5), c(5)] } else { vec![c(5)] };
        let entry = DecoderBlock::init(st, rng, &format!("{name}.level5"), &entry_in, c(5))?;
        let mut ups = Vec::new();
        for stage in (2..=4).rev() {
            ups.push((
                stage,
                DecoderBlock::init(
                    st,
                    rng,
                    &format!("{name}.level{stage}"),
                    &[c(stage + 1), c(stage)],
                    c(stage),
                )?,
            ));
        }
        Ok(CnnDecoder { entry, ups, with_graft, out_channels: c(2) })
    }

    /// `graft` must be present exactly when the decoder was built with one.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        pyr: &crate::encoders::FeaturePyramid,
        graft: Option<Var>,
    ) -> Result<Var> {
        let r5 = pyr.stage(5)?;
        let mut x = match (self.with_graft, graft) {
            (true, Some(z)) => self.entry.forward(tape, ctx, &[z, r5])?,
            (false, None) => self.entry.forward(tape, ctx, &[r5])?,
            (true, None) => {
                return Err(GraftError::shape("cnn_decoder", "built with graft, none given"))
            }
            (false, Some(_)) => {
                return Err(GraftError::shape("cnn_decoder", "built without graft, one given"))
            }
        };
        for (stage, block) in &self.ups {
            let feat = pyr.stage(*stage)?;
            x = block.forward(tape, ctx, &[x, feat])?;
        }
        Ok(x)
    }
}
