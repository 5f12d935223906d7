//! Parameter storage and the small layer vocabulary the network is built
//! from. Parameters live outside the tape in a `ParamStore`; each forward
//! pass registers them as leaves on a fresh tape (cached per pass, so a
//! twice-used parameter accumulates one gradient). Batch-norm running stats
//! are buffers: non-trainable entries updated through `FwdCtx::updates`
//! after the optimizer step.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{GraftError, Result};
use crate::rng::SplitMix64;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{gtns, Scalar, Tensor};

/// Learning-rate group. The attention backbone trains 10x slower than
/// everything else by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    AttnBackbone,
    Other,
}

impl LrGroup {
    fn tag(self) -> &'static str {
        match self {
            LrGroup::AttnBackbone => "attn_backbone",
            LrGroup::Other => "other",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "attn_backbone" => Some(LrGroup::AttnBackbone),
            "other" => Some(LrGroup::Other),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Insertion index within the store; stable for a given architecture.
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub group: LrGroup,
    /// false marks a buffer (running stats): saved/loaded but never stepped.
    pub trainable: bool,
}

pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(
        &mut self,
        name: &str,
        value: Tensor<F>,
        group: LrGroup,
        trainable: bool,
    ) -> Result<ParamId> {
        if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_') {
            return Err(GraftError::Config(format!("bad parameter name {name:?}")));
        }
        if self.by_name.contains_key(name) {
            return Err(GraftError::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry { name: name.to_string(), value, group, trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(GraftError::shape(
                "param_store",
                format!("{}: stored {:?}, new {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Insertion-order iteration (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Writes `manifest.tsv` plus one GTNS file per parameter under
    /// `dir/params/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join("params");
        std::fs::create_dir_all(&pdir).map_err(|e| GraftError::io(&pdir, e))?;
        let mut manifest = String::new();
        for e in &self.entries {
            let file = format!("params/{}.gtns", e.name);
            gtns::save(&dir.join(&file), &e.value)?;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.name,
                file,
                e.group.tag(),
                if e.trainable { 1 } else { 0 }
            ));
        }
        let mpath = dir.join("manifest.tsv");
        std::fs::write(&mpath, manifest).map_err(|e| GraftError::io(&mpath, e))
    }

    /// Restores values from a checkpoint directory. The manifest must cover
    /// exactly this store's parameter names with matching shapes.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let mpath = dir.join("manifest.tsv");
        let text = std::fs::read_to_string(&mpath).map_err(|e| GraftError::io(&mpath, e))?;
        let mut seen = vec![false; self.entries.len()];
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(GraftError::parse(
                    &mpath,
                    format!("line {}: expected 4 tab-separated columns", lineno + 1),
                ));
            }
            let (name, file, group_tag, _trainable) = (cols[0], cols[1], cols[2], cols[3]);
            LrGroup::from_tag(group_tag)
                .ok_or_else(|| GraftError::parse(&mpath, format!("unknown group {group_tag:?}")))?;
            let idx = *self.by_name.get(name).ok_or_else(|| {
                GraftError::Checkpoint(format!("checkpoint has unknown parameter {name:?}"))
            })?;
            if seen[idx] {
                return Err(GraftError::Checkpoint(format!("duplicate manifest entry {name:?}")));
            }
            seen[idx] = true;
            let value: Tensor<F> = gtns::load(&dir.join(file))?;
            if value.shape() != self.entries[idx].value.shape() {
                return Err(GraftError::Checkpoint(format!(
                    "{name}: checkpoint shape {:?} != model shape {:?}",
                    value.shape(),
                    self.entries[idx].value.shape()
                )));
            }
            self.entries[idx].value = value;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(GraftError::Checkpoint(format!(
                "checkpoint is missing parameter {:?}",
                self.entries[missing].name
            )));
        }
        Ok(())
    }

    /// Writes back buffer updates collected by a `FwdCtx`.
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<F>)>) -> Result<()> {
        for (id, value) in updates {
            self.set_value(id, value)?;
        }
        Ok(())
    }
}

/// Per-forward-pass context: which store feeds the tape, train/eval mode,
/// the parameter-leaf cache, and pending buffer updates.
pub struct FwdCtx<'a, F: Scalar> {
    pub store: &'a ParamStore<F>,
    pub training: bool,
    pub updates: Vec<(ParamId, Tensor<F>)>,
    cache: HashMap<usize, Var>,
}

impl<'a, F: Scalar> FwdCtx<'a, F> {
    pub fn new(store: &'a ParamStore<F>, training: bool) -> Self {
        FwdCtx { store, training, updates: Vec::new(), cache: HashMap::new() }
    }

    /// Leaf for a parameter, created once per tape. Trainable parameters
    /// require gradients only in training mode.
    pub fn param(&mut self, tape: &mut Tape<F>, id: ParamId) -> Var {
        if let Some(&v) = self.cache.get(&id.0) {
            return v;
        }
        let e = self.store.entry(id);
        let v = tape.leaf(e.value.clone(), e.trainable && self.training);
        self.cache.insert(id.0, v);
        v
    }

    /// The leaf this context created for `id` on the current tape, if the
    /// forward pass touched that parameter.
    pub fn leaf_of(&self, id: ParamId) -> Option<Var> {
        self.cache.get(&id.0).copied()
    }

    /// Consumes the context, releasing its store borrow and handing back the
    /// buffer updates gathered during forward (BN running stats). Apply them
    /// with `ParamStore::apply_updates`.
    pub fn into_updates(self) -> Vec<(ParamId, Tensor<F>)> {
        self.updates
    }
}

/// He-uniform limit for a given fan-in.
fn he_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

// ---- layers ----------------------------------------------------------------

pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        group: LrGroup,
    ) -> Result<Self> {
        let lim = he_limit(in_c * k * k);
        let w = st.add(
            &format!("{name}.w"),
            Tensor::rand_uniform(&[out_c, in_c, k, k], -lim, lim, rng),
            group,
            true,
        )?;
        let b = if bias {
            Some(st.add(&format!("{name}.b"), Tensor::zeros(&[out_c]), group, true)?)
        } else {
            None
        };
        Ok(Conv2dLayer { w, b, stride, pad })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        x: Var,
    ) -> Result<Var> {
        let w = ctx.param(tape, self.w);
        let mut y = tape.conv2d(x, w, self.stride, self.pad)?;
        if let Some(bid) = self.b {
            let b = ctx.param(tape, bid);
            let c = tape.shape(y)[1];
            let b4 = tape.reshape(b, &[1, c, 1, 1])?;
            y = tape.add(y, b4)?;
        }
        Ok(y)
    }
}

pub struct BatchNorm2dLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

/// Running-stat blend factor for batch norm, PyTorch-style.
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2dLayer {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        name: &str,
        c: usize,
        group: LrGroup,
    ) -> Result<Self> {
        Ok(BatchNorm2dLayer {
            gamma: st.add(&format!("{name}.gamma"), Tensor::ones(&[c]), group, true)?,
            beta: st.add(&format!("{name}.beta"), Tensor::zeros(&[c]), group, true)?,
            run_mean: st.add(&format!("{name}.running_mean"), Tensor::zeros(&[c]), group, false)?,
            run_var: st.add(&format!("{name}.running_var"), Tensor::ones(&[c]), group, false)?,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        x: Var,
    ) -> Result<Var> {
        let gamma = ctx.param(tape, self.gamma);
        let beta = ctx.param(tape, self.beta);
        let rm = ctx.store.value(self.run_mean).data().to_vec();
        let rv = ctx.store.value(self.run_var).data().to_vec();
        let bn = tape.batch_norm2d(x, gamma, beta, &rm, &rv, ctx.training, BN_MOMENTUM)?;
        if let Some((new_mean, new_var)) = bn.updated {
            let c = rm.len();
            ctx.updates.push((self.run_mean, Tensor::new(vec![c], new_mean)?));
            ctx.updates.push((self.run_var, Tensor::new(vec![c], new_var)?));
        }
        Ok(bn.out)
    }
}

/// conv -> batch norm -> relu, the workhorse block of both decoders.
pub struct ConvBnRelu {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2dLayer,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        group: LrGroup,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2dLayer::init(
                st,
                rng,
                &format!("{name}.conv"),
                in_c,
                out_c,
                k,
                stride,
                k / 2,
                false,
                group,
            )?,
            bn: BatchNorm2dLayer::init(st, &format!("{name}.bn"), out_c, group)?,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv.forward(tape, ctx, x)?;
        let y = self.bn.forward(tape, ctx, y)?;
        tape.relu(y)
    }
}

pub struct LinearLayer {
    /// Stored as [in, out] so tokens multiply from the left.
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearLayer {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        rng: &mut SplitMix64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: LrGroup,
    ) -> Result<Self> {
        let lim = he_limit(in_dim);
        let w = st.add(
            &format!("{name}.w"),
            Tensor::rand_uniform(&[in_dim, out_dim], -lim, lim, rng),
            group,
            true,
        )?;
        let b = if bias {
            Some(st.add(&format!("{name}.b"), Tensor::zeros(&[out_dim]), group, true)?)
        } else {
            None
        };
        Ok(LinearLayer { w, b })
    }

    /// Applies the map over the last axis of a rank >= 2 input.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        x: Var,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() < 2 {
            return Err(GraftError::shape("linear", format!("rank must be >= 2, got {s:?}")));
        }
        let in_dim = *s.last().unwrap();
        let rows: usize = s[..s.len() - 1].iter().product();
        let w = ctx.param(tape, self.w);
        let out_dim = tape.shape(w)[1];
        let flat = tape.reshape(x, &[rows, in_dim])?;
        let mut y = tape.matmul(flat, w)?;
        if let Some(bid) = self.b {
            let b = ctx.param(tape, bid);
            let b2 = tape.reshape(b, &[1, out_dim])?;
            y = tape.add(y, b2)?;
        }
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = out_dim;
        tape.reshape(y, &out_shape)
    }
}

pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormLayer {
    pub fn init<F: Scalar>(
        st: &mut ParamStore<F>,
        name: &str,
        c: usize,
        group: LrGroup,
    ) -> Result<Self> {
        Ok(LayerNormLayer {
            gamma: st.add(&format!("{name}.gamma"), Tensor::ones(&[c]), group, true)?,
            beta: st.add(&format!("{name}.beta"), Tensor::zeros(&[c]), group, true)?,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        ctx: &mut FwdCtx<F>,
        x: Var,
    ) -> Result<Var> {
        let gamma = ctx.param(tape, self.gamma);
        let beta = ctx.param(tape, self.beta);
        tape.layer_norm(x, gamma, beta)
    }
}
