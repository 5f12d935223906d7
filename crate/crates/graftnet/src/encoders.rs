//! The two backbone pyramids. The CNN branch is a residual network exposing
//! stages R2..R5 (stride doubling per stage, channels doubling per stage).
//! The attention branch is a patch-embedding transformer exposing S1..S4,
//! where stage 4 runs at stage 3's resolution and width. Features are plain
//! NCHW maps so the decoders can treat both branches uniformly.

use crate::error::{GraftError, Result};
use crate::nn::{
    BatchNorm2dLayer, Conv2dLayer, ConvBnRelu, FwdCtx, LayerNormLayer, LinearLayer, LrGroup,
    ParamStore,
};
use crate::rng::SplitMix64;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Cnn,
    Attn,
}

/// Static description of one pyramid: nominal input size, base width, branch.
/// Spatial/channel formulas for every stage derive from this.
#[derive(Clone, Debug)]
pub struct PyramidSpec {
    pub branch: Branch,
    pub input_hw: usize,
    pub base_channels: usize,
    /// Patch size for the attention branch; ignored by the CNN branch.
    pub patch_size: usize,
    /// Attention heads per transformer block; ignored by the CNN branch.
    pub heads: usize,
}

/// Base width for the CNN branch at a given channel factor (factor 1.0 is the
/// reference width 32; floor of 4 keeps toy configs functional).
pub fn cnn_base_channels(factor: f64) -> usize {
    ((32.0 * factor).ceil() as usize).max(4)
}

/// Base width for the attention branch (reference width 64).
pub fn attn_base_channels(factor: f64) -> usize {
    ((64.0 * factor).ceil() as usize).max(4)
}

impl PyramidSpec {
    pub fn cnn(input_hw: usize, base_channels: usize) -> Self {
        PyramidSpec { branch: Branch::Cnn, input_hw, base_channels, patch_size: 1, heads: 1 }
    }

    pub fn attn(input_hw: usize, base_channels: usize, patch_size: usize, heads: usize) -> Self {
        PyramidSpec { branch: Branch::Attn, input_hw, base_channels, patch_size, heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(GraftError::Config("base_channels must be positive".into()));
        }
        match self.branch {
            Branch::Cnn => {
                if self.input_hw == 0 || self.input_hw % 32 != 0 {
                    return Err(GraftError::Config(format!(
                        "cnn input {} must be a positive multiple of 32",
                        self.input_hw
                    )));
                }
            }
            Branch::Attn => {
                let unit = self.patch_size * 4;
                if self.patch_size == 0 {
                    return Err(GraftError::Config("patch_size must be positive".into()));
                }
                if self.input_hw == 0 || self.input_hw % unit != 0 {
                    return Err(GraftError::Config(format!(
                        "attn input {} must be a positive multiple of patch_size*4 = {}",
                        self.input_hw, unit
                    )));
                }
                if self.heads == 0 || (self.base_channels * 2) % self.heads != 0 {
                    return Err(GraftError::Config(format!(
                        "heads {} must divide the stage-1 width {}",
                        self.heads,
                        self.base_channels * 2
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stages this pyramid exposes, shallowest first.
    pub fn stage_indices(&self) -> &'static [usize] {
        match self.branch {
            Branch::Cnn => &[2, 3, 4, 5],
            Branch::Attn => &[1, 2, 3, 4],
        }
    }

    /// Spatial side length of a stage's feature map for a given input side.
    pub fn stage_spatial_for(&self, stage: usize, input_hw: usize) -> usize {
        match self.branch {
            Branch::Cnn => input_hw >> stage,
            Branch::Attn => {
                let s = stage.min(3); // stage 4 keeps stage 3's grid
                (input_hw / self.patch_size) >> (s - 1)
            }
        }
    }

    pub fn stage_spatial(&self, stage: usize) -> usize {
        self.stage_spatial_for(stage, self.input_hw)
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        match self.branch {
            Branch::Cnn => self.base_channels << (stage - 1),
            Branch::Attn => self.base_channels << stage.min(3), // stage 4 keeps stage 3's width
        }
    }
}

/// Multi-scale features from one branch: (stage index, NCHW feature) pairs.
pub struct FeaturePyramid {
    pub branch: Branch,
    stages: Vec<(usize, Var)>,
}

impl FeaturePyramid {
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn from_stages(branch: Branch, stages: Vec<(usize, Var)>) -> Self {
        FeaturePyramid { branch, stages }
    }

    pub fn stage(&self, i: usize) -> Result<Var> {
        self.stages
            .iter()
            .find(|&&(s, _)| s == i)
            .map(|&(_, v)| v)
            .ok_or_else(|| GraftError::dim("pyramid", format!("no stage {i}")))
    }

    pub fn stages(&self) -> &[(usize, Var)] {
        &self.stages
    }
}

// ---- CNN branch --------------------------------------------------------------

/// Classic two-conv residual block (post-activation). `stride > 1` downsamples
/// via the first conv and a projected shortcut.
struct ResidualBlock {
    conv1: Conv2dLayer,
    bn1: BatchNorm2dLayer,
    conv2: Conv2dLayer,
    bn2: BatchNorm2dLayer,
    proj: Option<(Conv2dLayer, BatchNorm2dLayer)>,
}

impl ResidualBlock {
    fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
    ) -> Result<Self> {
        let g = LrGroup::Other;
        let conv1 = Conv2dLayer::init(
            st, rng, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1, false, g,
        )?;
        let bn1 = BatchNorm2dLayer::init(st, &format!("{name}.bn1"), out_c, g)?;
        let conv2 =
            Conv2dLayer::init(st, rng, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1, false, g)?;
        let bn2 = BatchNorm2dLayer::init(st, &format!("{name}.bn2"), out_c, g)?;
        let proj = if stride != 1 || in_c != out_c {
            let pc = Conv2dLayer::init(
                st, rng, &format!("{name}.proj_conv"), in_c, out_c, 1, stride, 0, false, g,
            )?;
            let pb = BatchNorm2dLayer::init(st, &format!("{name}.proj_bn"), out_c, g)?;
            Some((pc, pb))
        } else {
            None
        };
        Ok(ResidualBlock { conv1, bn1, conv2, bn2, proj })
    }

    fn forward<F: Scalar>(&self, tape: &mut Tape<F>, ctx: &mut FwdCtx<F>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, ctx, x)?;
        let h = self.bn1.forward(tape, ctx, h)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, ctx, h)?;
        let h = self.bn2.forward(tape, ctx, h)?;
        let shortcut = match &self.proj {
            Some((pc, pb)) => {
                let s = pc.forward(tape, ctx, x)?;
                pb.forward(tape, ctx, s)?
            }
            None => x,
        };
        let sum = tape.add(h, shortcut)?;
        tape.relu(sum)
    }
}

pub struct CnnEncoder {
    pub spec: PyramidSpec,
    stem: ConvBnRelu,
    stages: Vec<[ResidualBlock; 2]>,
}

impl CnnEncoder {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        spec: PyramidSpec,
    ) -> Result<Self> {
        if spec.branch != Branch::Cnn {
            return Err(GraftError::Config("CnnEncoder needs a Cnn spec".into()));
        }
        spec.validate()?;
        let base = spec.base_channels;
        let stem = ConvBnRelu::init(st, rng, "cnn.stem", 3, base, 3, 2, LrGroup::Other)?;
        let mut stages = Vec::new();
        for stage in 2..=5usize {
            let in_c = if stage == 2 { base } else { base << (stage - 2) };
            let out_c = base << (stage - 1);
            let name = format!("cnn.stage{stage}");
            stages.push([
                ResidualBlock::init(st, rng, &format!("{name}.block1"), in_c, out_c, 2)?,
                ResidualBlock::init(st, rng, &format!("{name}.block2"), out_c, out_c, 1)?,
            ]);
        }
        Ok(CnnEncoder { spec, stem, stages })
    }

    /// Runs the pyramid on an [N,3,H,W] image. H must equal W and divide by
    /// 32 (the multi-scale trainer feeds varying sizes).
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        img: Var,
    ) -> Result<FeaturePyramid> {
        let s = tape.shape(img).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(GraftError::shape("cnn_forward", format!("want [N,3,H,W], got {s:?}")));
        }
        if s[2] != s[3] || s[2] % 32 != 0 || s[2] == 0 {
            return Err(GraftError::dim(
                "cnn_forward",
                format!("input must be square with side a multiple of 32, got {}x{}", s[2], s[3]),
            ));
        }
        let mut x = self.stem.forward(tape, ctx, img)?;
        let mut feats = Vec::new();
        for (i, blocks) in self.stages.iter().enumerate() {
            x = blocks[0].forward(tape, ctx, x)?;
            x = blocks[1].forward(tape, ctx, x)?;
            feats.push((i + 2, x));
        }
        Ok(FeaturePyramid { branch: Branch::Cnn, stages: feats })
    }
}

// ---- attention branch ----------------------------------------------------------

/// Space-to-depth: [N,C,H,W] -> [N,(H/p)*(W/p), C*p*p] tokens, positions
/// row-major over the patch grid, features channel-major within a patch.
fn patchify<F: Scalar>(tape: &mut Tape<F>, x: Var, p: usize) -> Result<(Var, usize, usize)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(GraftError::shape(
            "patchify",
            format!("{s:?} not divisible into {p}x{p} patches"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let r = tape.reshape(x, &[n, c, gh, p, gw, p])?;
    let perm = tape.permute(r, &[0, 2, 4, 1, 3, 5])?;
    let tokens = tape.reshape(perm, &[n, gh * gw, c * p * p])?;
    Ok((tokens, gh, gw))
}

/// [N,T,C] -> [N*heads, T, C/heads]
pub(crate) fn split_heads<F: Scalar>(tape: &mut Tape<F>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, t, c) = (s[0], s[1], s[2]);
    if c % heads != 0 {
        return Err(GraftError::dim("split_heads", format!("{heads} heads nmid width {c}")));
    }
    let dh = c / heads;
    let r = tape.reshape(x, &[n, t, heads, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[n * heads, t, dh])
}

/// [N*heads, T, C/heads] -> [N,T,C]
pub(crate) fn merge_heads<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    n: usize,
    heads: usize,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let r = tape.reshape(x, &[n, heads, t, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[n, t, heads * dh])
}

/// Pre-norm transformer block with global multi-head self-attention and a
/// 4x MLP, both residual.
pub struct TransformerBlock {
    norm1: LayerNormLayer,
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    wo: LinearLayer,
    norm2: LayerNormLayer,
    mlp1: LinearLayer,
    mlp2: LinearLayer,
    heads: usize,
}

impl TransformerBlock {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        c: usize,
        heads: usize,
        group: LrGroup,
    ) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(GraftError::Config(format!("heads {heads} must divide width {c}")));
        }
        Ok(TransformerBlock {
            norm1: LayerNormLayer::init(st, &format!("{name}.norm1"), c, group)?,
            wq: LinearLayer::init(st, rng, &format!("{name}.wq"), c, c, true, group)?,
            wk: LinearLayer::init(st, rng, &format!("{name}.wk"), c, c, true, group)?,
            wv: LinearLayer::init(st, rng, &format!("{name}.wv"), c, c, true, group)?,
            wo: LinearLayer::init(st, rng, &format!("{name}.wo"), c, c, true, group)?,
            norm2: LayerNormLayer::init(st, &format!("{name}.norm2"), c, group)?,
            mlp1: LinearLayer::init(st, rng, &format!("{name}.mlp1"), c, 4 * c, true, group)?,
            mlp2: LinearLayer::init(st, rng, &format!("{name}.mlp2"), 4 * c, c, true, group)?,
            heads,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        x: Var,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (n, t, c) = (s[0], s[1], s[2]);
        let dh = c / self.heads;

        let y = self.norm1.forward(tape, ctx, x)?;
        let q = self.wq.forward(tape, ctx, y)?;
        let k = self.wk.forward(tape, ctx, y)?;
        let v = self.wv.forward(tape, ctx, y)?;
        let qh = split_heads(tape, q, self.heads)?;
        let kh = split_heads(tape, k, self.heads)?;
        let vh = split_heads(tape, v, self.heads)?;
        let kt = tape.transpose_last2(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let flat = tape.reshape(scaled, &[n * self.heads * t, t])?;
        let att = tape.softmax_rows(flat)?;
        let att = tape.reshape(att, &[n * self.heads, t, t])?;
        let ctx_h = tape.bmm(att, vh)?;
        let merged = merge_heads(tape, ctx_h, n, self.heads)?;
        let o = self.wo.forward(tape, ctx, merged)?;
        let x = tape.add(x, o)?;

        let m = self.norm2.forward(tape, ctx, x)?;
        let m = self.mlp1.forward(tape, ctx, m)?;
        let m = tape.relu(m)?;
        let m = self.mlp2.forward(tape, ctx, m)?;
        tape.add(x, m)
    }
}

/// Token-grid halving: gather 2x2 neighborhoods, normalize, project 4c -> 2c.
struct PatchMerge {
    norm: LayerNormLayer,
    reduce: LinearLayer,
}

impl PatchMerge {
    fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        in_c: usize,
        group: LrGroup,
    ) -> Result<Self> {
        Ok(PatchMerge {
            norm: LayerNormLayer::init(st, &format!("{name}.norm"), 4 * in_c, group)?,
            reduce: LinearLayer::init(
                st,
                rng,
                &format!("{name}.reduce"),
                4 * in_c,
                2 * in_c,
                false,
                group,
            )?,
        })
    }

    fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        tokens: Var,
        grid: usize,
    ) -> Result<(Var, usize)> {
        let spatial = tape.unflatten_spatial(tokens, grid, grid)?;
        let (gathered, gh, _) = patchify(tape, spatial, 2)?;
        let normed = self.norm.forward(tape, ctx, gathered)?;
        let reduced = self.reduce.forward(tape, ctx, normed)?;
        Ok((reduced, gh))
    }
}

pub struct AttnEncoder {
    pub spec: PyramidSpec,
    patch_embed: LinearLayer,
    embed_norm: LayerNormLayer,
    block1: TransformerBlock,
    merge2: PatchMerge,
    block2: TransformerBlock,
    merge3: PatchMerge,
    block3: TransformerBlock,
    block4: TransformerBlock,
}

impl AttnEncoder {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        spec: PyramidSpec,
    ) -> Result<Self> {
        if spec.branch != Branch::Attn {
            return Err(GraftError::Config("AttnEncoder needs an Attn spec".into()));
        }
        spec.validate()?;
        let g = LrGroup::AttnBackbone;
        let p = spec.patch_size;
        let (c1, c2, c3) =
            (spec.stage_channels(1), spec.stage_channels(2), spec.stage_channels(3));
        let heads = spec.heads;
        Ok(AttnEncoder {
            patch_embed: LinearLayer::init(st, rng, "attn.patch_embed", 3 * p * p, c1, true, g)?,
            embed_norm: LayerNormLayer::init(st, "attn.embed_norm", c1, g)?,
            block1: TransformerBlock::init(st, rng, "attn.stage1.block", c1, heads, g)?,
            merge2: PatchMerge::init(st, rng, "attn.stage2.merge", c1, g)?,
            block2: TransformerBlock::init(st, rng, "attn.stage2.block", c2, heads, g)?,
            merge3: PatchMerge::init(st, rng, "attn.stage3.merge", c2, g)?,
            block3: TransformerBlock::init(st, rng, "attn.stage3.block", c3, heads, g)?,
            block4: TransformerBlock::init(st, rng, "attn.stage4.block", c3, heads, g)?,
            spec,
        })
    }

    /// Runs the pyramid on an [N,3,H,W] image; H must equal W and divide by
    /// patch_size*4.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        img: Var,
    ) -> Result<FeaturePyramid> {
        let s = tape.shape(img).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(GraftError::shape("attn_forward", format!("want [N,3,H,W], got {s:?}")));
        }
        let unit = self.spec.patch_size * 4;
        if s[2] != s[3] || s[2] % unit != 0 || s[2] == 0 {
            return Err(GraftError::dim(
                "attn_forward",
                format!(
                    "input must be square with side a multiple of {unit}, got {}x{}",
                    s[2], s[3]
                ),
            ));
        }
        let (tokens, g1, _) = patchify(tape, img, self.spec.patch_size)?;
        let embedded = self.patch_embed.forward(tape, ctx, tokens)?;
        let embedded = self.embed_norm.forward(tape, ctx, embedded)?;

        let t1 = self.block1.forward(tape, ctx, embedded)?;
        let s1 = tape.unflatten_spatial(t1, g1, g1)?;

        let (m2, g2) = self.merge2.forward(tape, ctx, t1, g1)?;
        let t2 = self.block2.forward(tape, ctx, m2)?;
        let s2 = tape.unflatten_spatial(t2, g2, g2)?;

        let (m3, g3) = self.merge3.forward(tape, ctx, t2, g2)?;
        let t3 = self.block3.forward(tape, ctx, m3)?;
        let s3 = tape.unflatten_spatial(t3, g3, g3)?;

        let t4 = self.block4.forward(tape, ctx, t3)?;
        let s4 = tape.unflatten_spatial(t4, g3, g3)?;

        Ok(FeaturePyramid {
            branch: Branch::Attn,
            stages: vec![(1, s1), (2, s2), (3, s3), (4, s4)],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn run_cnn(input: usize, base: usize) -> Vec<(usize, Vec<usize>)> {
        let mut st = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(1);
        let enc = CnnEncoder::init(&mut st, &mut rng, PyramidSpec::cnn(input, base)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&st, false);
        let img = tape.leaf(Tensor::rand_uniform(&[1, 3, input, input], -1.0, 1.0, &mut rng), false);
        let pyr = enc.forward(&mut tape, &mut ctx, img).unwrap();
        pyr.stages().iter().map(|&(s, v)| (s, tape.shape(v).to_vec())).collect()
    }

    fn run_attn(input: usize, base: usize, patch: usize, heads: usize) -> Vec<(usize, Vec<usize>)> {
        let mut st = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(2);
        let enc =
            AttnEncoder::init(&mut st, &mut rng, PyramidSpec::attn(input, base, patch, heads))
                .unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&st, false);
        let img = tape.leaf(Tensor::rand_uniform(&[1, 3, input, input], -1.0, 1.0, &mut rng), false);
        let pyr = enc.forward(&mut tape, &mut ctx, img).unwrap();
        pyr.stages().iter().map(|&(s, v)| (s, tape.shape(v).to_vec())).collect()
    }

    #[test]
    fn cnn_stage_dims_at_64() {
        let shapes = run_cnn(64, 4);
        assert_eq!(
            shapes,
            vec![
                (2, vec![1, 8, 16, 16]),
                (3, vec![1, 16, 8, 8]),
                (4, vec![1, 32, 4, 4]),
                (5, vec![1, 64, 2, 2]),
            ]
        );
    }

    #[test]
    fn attn_stage_dims_at_32() {
        // patch 4: stage 1 grid 8, halving twice, stage 4 holds at stage 3
        let shapes = run_attn(32, 4, 4, 2);
        assert_eq!(
            shapes,
            vec![
                (1, vec![1, 8, 8, 8]),
                (2, vec![1, 16, 4, 4]),
                (3, vec![1, 32, 2, 2]),
                (4, vec![1, 32, 2, 2]),
            ]
        );
    }

    #[test]
    fn spec_validation_rejects_bad_sizes() {
        assert!(PyramidSpec::cnn(48, 4).validate().is_err()); // not /32
        assert!(PyramidSpec::cnn(0, 4).validate().is_err());
        assert!(PyramidSpec::attn(24, 4, 4, 1).validate().is_err()); // not /16
        assert!(PyramidSpec::attn(32, 4, 4, 3).validate().is_err()); // heads nmid 8
        assert!(PyramidSpec::attn(32, 4, 4, 2).validate().is_ok());
    }

    #[test]
    fn zero_image_with_zeroed_residual_gains_stays_finite() {
        let mut st = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(3);
        let enc = CnnEncoder::init(&mut st, &mut rng, PyramidSpec::cnn(32, 4)).unwrap();
        // zero the gain of each block's final norm
        let squash: Vec<_> = st
            .iter()
            .filter(|(_, e)| e.name.ends_with(".bn2.gamma"))
            .map(|(id, e)| (id, e.value.shape().to_vec()))
            .collect();
        assert!(!squash.is_empty());
        for (id, shape) in squash {
            st.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&st, false);
        let img = tape.leaf(Tensor::zeros(&[1, 3, 32, 32]), false);
        let pyr = enc.forward(&mut tape, &mut ctx, img).unwrap();
        for &(_, v) in pyr.stages() {
            assert!(tape.value(v).all_finite());
        }
    }

    #[test]
    fn forward_rejects_offsize_inputs() {
        let mut st = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(4);
        let enc = CnnEncoder::init(&mut st, &mut rng, PyramidSpec::cnn(32, 4)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&st, false);
        let bad = tape.leaf(Tensor::<f32>::zeros(&[1, 3, 48, 48]), false);
        assert!(enc.forward(&mut tape, &mut ctx, bad).is_err());
        let rect = tape.leaf(Tensor::<f32>::zeros(&[1, 3, 32, 64]), false);
        assert!(enc.forward(&mut tape, &mut ctx, rect).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn cnn_shapes_follow_formulas(mult in 1usize..=3, base in 2usize..=5) {
            let input = 32 * mult;
            let spec = PyramidSpec::cnn(input, base);
            let shapes = run_cnn(input, base);
            for (stage, shape) in shapes {
                prop_assert_eq!(shape[1], spec.stage_channels(stage));
                prop_assert_eq!(shape[2], spec.stage_spatial(stage));
                prop_assert_eq!(shape[3], spec.stage_spatial(stage));
            }
        }

        #[test]
        fn attn_shapes_follow_formulas(mult in 1usize..=2, base in 2usize..=4, patch in 1usize..=2) {
            let patch = patch * 2; // 2 or 4
            let input = patch * 4 * mult;
            let spec = PyramidSpec::attn(input, base, patch, 2);
            let shapes = run_attn(input, base, patch, 2);
            for (stage, shape) in shapes {
                prop_assert_eq!(shape[1], spec.stage_channels(stage));
                prop_assert_eq!(shape[2], spec.stage_spatial(stage));
                prop_assert_eq!(shape[3], spec.stage_spatial(stage));
            }
        }
    }
}
