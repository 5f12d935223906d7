//! Training loop, optimizer, evaluation, and inference.
//!
//! Runs are fully determined by the config seed: dataset shuffling, scale
//! jitter, augmentation, and initialization all draw from one seeded stream,
//! so identical configs produce bit-identical checkpoints and logs.

use std::path::{Path, PathBuf};

use crate::config::TrainConfig;
use crate::data::{self, Dataset, Sample};
use crate::error::{GraftError, Result};
use crate::losses::{self, LossBreakdown};
use crate::metrics;
use crate::model::{GraftNet, Variant};
use crate::nn::{FwdCtx, LrGroup, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Worker-count cap read from `GRAFTNET_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("GRAFTNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

// ---- schedule and optimizer -------------------------------------------------

/// Piecewise-linear rate factor: 0 -> 1 over the warmup steps, then 1 -> 0
/// over the remainder. With no warmup, step 0 already runs at the maximum.
pub fn lr_factor(step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = (warmup_fraction * total_steps as f64).floor() as usize;
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        let rest = (total_steps - warmup).max(1) as f64;
        1.0 - (step - warmup) as f64 / rest
    }
}

/// SGD with classical momentum and decoupled-from-nothing weight decay folded
/// into the gradient: v = mu*v + g + wd*w; w -= lr*v. Parameters without a
/// gradient this step are left untouched.
pub struct SgdMomentum {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Vec<f32>>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[(ParamId, Tensor<f32>)],
        lr_attn: f64,
        lr_other: f64,
    ) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, grad) in grads {
            let entry = store.entry(*id);
            if !entry.trainable {
                continue;
            }
            let lr = match entry.group {
                LrGroup::AttnBackbone => lr_attn,
                LrGroup::Other => lr_other,
            } as f32;
            let mu = self.momentum as f32;
            let wd = self.weight_decay as f32;
            let mut w = entry.value.clone();
            if grad.shape() != w.shape() {
                return Err(GraftError::shape(
                    "sgd",
                    format!("grad {:?} vs param {:?} for {}", grad.shape(), w.shape(), entry.name),
                ));
            }
            let slot = &mut self.velocity[id.index()];
            if slot.is_none() {
                *slot = Some(vec![0.0; w.numel()]);
            }
            let v = slot.as_mut().unwrap();
            let wd_data = w.data_mut();
            for ((vi, &gi), wi) in v.iter_mut().zip(grad.data()).zip(wd_data.iter_mut()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
            let next = w;
            store.set_value(*id, next)?;
        }
        Ok(())
    }
}

// ---- batches ----------------------------------------------------------------

/// A stacked training batch: the main image at the (possibly jittered) CNN
/// resolution, the same source at the fixed transformer resolution, and the
/// binary mask at the CNN resolution.
pub struct Batch {
    pub img_cnn: Tensor<f32>,
    pub img_attn: Tensor<f32>,
    pub mask: Tensor<f32>,
}

pub fn assemble_batch(samples: &[&Sample], cnn_side: usize, attn_side: usize) -> Result<Batch> {
    let n = samples.len();
    if n == 0 {
        return Err(GraftError::Config("empty batch".into()));
    }
    let mut img_cnn = vec![0f32; n * 3 * cnn_side * cnn_side];
    let mut img_attn = vec![0f32; n * 3 * attn_side * attn_side];
    let mut mask = vec![0f32; n * cnn_side * cnn_side];
    for (i, s) in samples.iter().enumerate() {
        let ic = data::resize_chw(&s.image, cnn_side, cnn_side)?;
        let ia = data::resize_chw(&s.image, attn_side, attn_side)?;
        let m = data::resize_mask(&s.mask, cnn_side, cnn_side)?;
        img_cnn[i * 3 * cnn_side * cnn_side..][..3 * cnn_side * cnn_side]
            .copy_from_slice(ic.data());
        img_attn[i * 3 * attn_side * attn_side..][..3 * attn_side * attn_side]
            .copy_from_slice(ia.data());
        mask[i * cnn_side * cnn_side..][..cnn_side * cnn_side].copy_from_slice(m.data());
    }
    Ok(Batch {
        img_cnn: Tensor::new(vec![n, 3, cnn_side, cnn_side], img_cnn)?,
        img_attn: Tensor::new(vec![n, 3, attn_side, attn_side], img_attn)?,
        mask: Tensor::new(vec![n, 1, cnn_side, cnn_side], mask)?,
    })
}

// ---- loss assembly per variant ----------------------------------------------

/// Builds the objective this variant trains with. Baselines use the main
/// bce+iou only; grafted variants add the scaled side losses; the full model
/// adds the attention-guided term.
pub fn variant_loss(
    tape: &mut Tape<f32>,
    outputs: &crate::model::ModelOutputs,
    g: &Tensor<f32>,
    beta: f64,
    variant: Variant,
) -> Result<LossBreakdown> {
    match variant {
        Variant::BaselineCnn | Variant::BaselineAttn => {
            let (total, bce_p, iou_p) = losses::bce_iou(tape, outputs.p, g)?;
            Ok(LossBreakdown { total, bce_p, iou_p, agl: 0.0, aux: 0.0 })
        }
        Variant::Cmgm => {
            let (rp, sp) = (outputs.rp.unwrap(), outputs.sp.unwrap());
            let (main, bce_p, iou_p) = losses::bce_iou(tape, outputs.p, g)?;
            let rs = tape.shape(rp).to_vec();
            let ss = tape.shape(sp).to_vec();
            let g_rp = losses::downsample_mask(g, rs[2], rs[3])?;
            let g_sp = losses::downsample_mask(g, ss[2], ss[3])?;
            let (l_rp, _, _) = losses::bce_iou(tape, rp, &g_rp)?;
            let (l_sp, _, _) = losses::bce_iou(tape, sp, &g_sp)?;
            let aux_sum = tape.add(l_rp, l_sp)?;
            let aux_val = tape.value(aux_sum).data()[0] as f64;
            let scaled = tape.scale(aux_sum, 0.125)?;
            let total = tape.add(main, scaled)?;
            Ok(LossBreakdown { total, bce_p, iou_p, agl: 0.0, aux: aux_val })
        }
        Variant::CmgmAgl => losses::total_loss(
            tape,
            outputs.p,
            outputs.rp.unwrap(),
            outputs.sp.unwrap(),
            outputs.cam.unwrap(),
            g,
            beta,
        ),
    }
}

// ---- checkpoints --------------------------------------------------------------

pub fn save_checkpoint(dir: &Path, store: &ParamStore<f32>, cfg: &TrainConfig) -> Result<()> {
    store.save(dir)?;
    let cfg_path = dir.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| GraftError::io(&cfg_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainConfig, GraftNet, ParamStore<f32>)> {
    let cfg = TrainConfig::load(&dir.join("config.txt"))?;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(cfg.seed);
    let net = GraftNet::init(&mut store, &mut rng, cfg.model.clone())?;
    store.load(dir)?;
    Ok((cfg, net, store))
}

// ---- training ----------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct StepRow {
    pub step: usize,
    pub total: f64,
    pub bce_p: f64,
    pub iou_p: f64,
    pub agl: f64,
    pub aux: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub ckpt_dir: PathBuf,
    pub steps: usize,
    pub step_rows: Vec<StepRow>,
    pub val_maes: Vec<(usize, f64)>,
}

/// Default validation holdout: every tenth sample by sorted position. Falls
/// back to the full set when the dataset is too small to spare any.
pub fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let val: Vec<usize> = (0..n).filter(|i| i % 10 == 9).collect();
    if val.is_empty() {
        return ((0..n).collect(), (0..n).collect());
    }
    let train = (0..n).filter(|i| i % 10 != 9).collect();
    (train, val)
}

fn load_all(ds: &Dataset) -> Result<Vec<Sample>> {
    (0..ds.len()).map(|i| ds.load_sample(i)).collect()
}

/// Runs an eval-mode forward on one sample and returns the saliency map at
/// the requested output resolution, as f64 [H,W].
pub fn predict_map(
    net: &GraftNet,
    store: &ParamStore<f32>,
    sample: &Sample,
    cnn_hw: usize,
    attn_hw: usize,
    out_hw: (usize, usize),
) -> Result<Tensor<f64>> {
    let batch = assemble_batch(&[sample], cnn_hw, attn_hw)?;
    let mut tape = Tape::<f32>::new();
    let mut ctx = FwdCtx::new(store, false);
    let ic = tape.leaf(batch.img_cnn, false);
    let ia = tape.leaf(batch.img_attn, false);
    let out = net.forward(&mut tape, &mut ctx, ic, ia)?;
    let p = tape.bilinear_resize(out.p, out_hw.0, out_hw.1)?;
    Ok(tape.value(p).cast::<f64>().reshaped(&[out_hw.0, out_hw.1])?)
}

fn val_mae(
    net: &GraftNet,
    store: &ParamStore<f32>,
    samples: &[Sample],
    cnn_hw: usize,
    attn_hw: usize,
) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let (h, w) = s.original_hw;
        let p = predict_map(net, store, s, cnn_hw, attn_hw, (h, w))?;
        let g = s.mask.cast::<f64>().reshaped(&[h, w])?;
        acc += metrics::mae(&p, &g)?;
    }
    Ok(acc / samples.len() as f64)
}

struct StepOutcome {
    row: StepRow,
    grads: Vec<(ParamId, Tensor<f32>)>,
    updates: Vec<(ParamId, Tensor<f32>)>,
}

fn run_step(
    net: &GraftNet,
    store: &ParamStore<f32>,
    batch: &Batch,
    beta: f64,
    step: usize,
) -> Result<StepOutcome> {
    let mut tape = Tape::<f32>::new();
    let mut ctx = FwdCtx::new(store, true);
    let ic = tape.leaf(batch.img_cnn.clone(), false);
    let ia = tape.leaf(batch.img_attn.clone(), false);
    let outputs = net.forward(&mut tape, &mut ctx, ic, ia)?;
    let breakdown = variant_loss(&mut tape, &outputs, &batch.mask, beta, net.config.variant)?;
    let total = tape.value(breakdown.total).data()[0] as f64;
    let row = StepRow {
        step,
        total,
        bce_p: breakdown.bce_p,
        iou_p: breakdown.iou_p,
        agl: breakdown.agl,
        aux: breakdown.aux,
    };
    if !total.is_finite() {
        return Err(GraftError::NanLoss { step, breakdown: format_row(&row) });
    }
    tape.backward(breakdown.total)?;
    let mut grads = Vec::new();
    for (id, entry) in store.iter() {
        if !entry.trainable {
            continue;
        }
        if let Some(var) = ctx.leaf_of(id) {
            if let Some(g) = tape.grad(var) {
                grads.push((id, g));
            }
        }
    }
    Ok(StepOutcome { row, grads, updates: ctx.into_updates() })
}

fn format_row(r: &StepRow) -> String {
    format!(
        "total={} bce_P={} iou_P={} agl={} aux={}",
        r.total, r.bce_p, r.iou_p, r.agl, r.aux
    )
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| GraftError::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| GraftError::io(path, e))
}

/// Trains per the config on the manifest's samples and writes `train.csv`,
/// `val.csv`, and `checkpoint/` under `out_dir`. With no explicit validation
/// manifest, every tenth sample is held out.
pub fn train(
    cfg: &TrainConfig,
    train_manifest: &Path,
    val_manifest: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| GraftError::io(out_dir, e))?;
    let ds = Dataset::load(train_manifest)?;
    if ds.is_empty() {
        return Err(GraftError::Config("training manifest has no samples".into()));
    }
    let all = load_all(&ds)?;
    let (train_samples, val_samples): (Vec<Sample>, Vec<Sample>) = match val_manifest {
        Some(vm) => {
            let vds = Dataset::load(vm)?;
            (all, load_all(&vds)?)
        }
        None => {
            let (ti, vi) = holdout_split(all.len());
            let pick = |idx: &[usize]| -> Vec<Sample> {
                idx.iter()
                    .map(|&i| Sample {
                        id: all[i].id.clone(),
                        image: all[i].image.clone(),
                        mask: all[i].mask.clone(),
                        original_hw: all[i].original_hw,
                    })
                    .collect()
            };
            (pick(&ti), pick(&vi))
        }
    };

    let mut store = ParamStore::<f32>::new();
    let mut init_rng = SplitMix64::new(cfg.seed);
    let net = GraftNet::init(&mut store, &mut init_rng, cfg.model.clone())?;
    let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);

    // a trailing single-sample batch is dropped: several pyramid stages are
    // 1x1 at desk scale, and batch statistics are undefined over one value
    let full = train_samples.len() / cfg.batch_size;
    let rem = train_samples.len() % cfg.batch_size;
    let steps_per_epoch = full + usize::from(rem > 1);
    if steps_per_epoch == 0 {
        return Err(GraftError::Config(format!(
            "{} training sample(s) cannot fill a batch of {}",
            train_samples.len(),
            cfg.batch_size
        )));
    }
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step_rows = Vec::with_capacity(total_steps);
    let mut val_maes = Vec::with_capacity(cfg.epochs);
    let mut epoch_stream = SplitMix64::new(cfg.seed);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut erng = epoch_stream.split();
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        erng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() == 1 && cfg.batch_size > 1 {
                continue;
            }
            let scale = data::SCALE_JITTER[erng.below(data::SCALE_JITTER.len())];
            let cnn_side = data::snap_side(cfg.model.cnn_hw as f64 * scale, 32);
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&i| data::augment(&train_samples[i], &mut erng))
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = augmented.iter().collect();
            let batch = assemble_batch(&refs, cnn_side, cfg.model.attn_hw)?;
            let outcome = match run_step(&net, &store, &batch, cfg.beta, step) {
                Ok(o) => o,
                Err(GraftError::NonFinite { op }) => {
                    return Err(GraftError::NanLoss {
                        step,
                        breakdown: format!("non-finite value produced by {op}"),
                    })
                }
                Err(e) => return Err(e),
            };
            let factor = lr_factor(step, total_steps, cfg.warmup_fraction);
            opt.step(
                &mut store,
                &outcome.grads,
                cfg.lr_backbone_attn * factor,
                cfg.lr_other * factor,
            )?;
            store.apply_updates(outcome.updates)?;
            step_rows.push(outcome.row);
            step += 1;
        }
        let mae = match val_mae(&net, &store, &val_samples, cfg.model.cnn_hw, cfg.model.attn_hw) {
            Ok(m) => m,
            Err(GraftError::NonFinite { op }) => {
                return Err(GraftError::NanLoss {
                    step,
                    breakdown: format!("non-finite value produced by {op} during validation"),
                })
            }
            Err(e) => return Err(e),
        };
        val_maes.push((epoch, mae));
    }

    let train_lines: Vec<String> = step_rows
        .iter()
        .map(|r| {
            format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.step, r.total, r.bce_p, r.iou_p, r.agl, r.aux
            )
        })
        .collect();
    write_csv(&out_dir.join("train.csv"), "step,total,bce_P,iou_P,agl,aux", &train_lines)?;
    let val_lines: Vec<String> =
        val_maes.iter().map(|(e, m)| format!("{e},{m:.6}")).collect();
    write_csv(&out_dir.join("val.csv"), "epoch,mae", &val_lines)?;

    let ckpt_dir = out_dir.join("checkpoint");
    save_checkpoint(&ckpt_dir, &store, cfg)?;
    Ok(TrainReport { ckpt_dir, steps: step, step_rows, val_maes })
}

// ---- evaluation ----------------------------------------------------------------

pub struct EvalRow {
    pub id: String,
    pub mae: f64,
    pub f_max: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub bde: f64,
    pub f_curve: Vec<f64>,
    pub warnings: Vec<String>,
}

pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean_mae: f64,
    pub dataset_f_max: f64,
    pub mean_s: f64,
    pub mean_e: f64,
    pub mean_bde: f64,
}

fn eval_one(
    net: &GraftNet,
    store: &ParamStore<f32>,
    ds: &Dataset,
    index: usize,
    cnn_hw: usize,
    attn_hw: usize,
) -> Result<EvalRow> {
    let sample = ds.load_sample(index)?;
    let (h, w) = sample.original_hw;
    let p = predict_map(net, store, &sample, cnn_hw, attn_hw, (h, w))?;
    let g = sample.mask.cast::<f64>().reshaped(&[h, w])?;
    let (res, warnings) = metrics::evaluate_pair(&p, &g)?;
    Ok(EvalRow {
        id: sample.id,
        mae: res.mae,
        f_max: res.f_max,
        s_measure: res.s_measure,
        e_measure: res.e_measure,
        bde: res.bde,
        f_curve: res.f_curve,
        warnings,
    })
}

/// Evaluates a checkpoint over a manifest, writing one CSV row per sample plus
/// an aggregate row. The dataset F-max is the maximum of the mean F-curve.
/// Worker count is capped by `GRAFTNET_THREADS`.
pub fn evaluate(ckpt_dir: &Path, manifest: &Path, csv_out: &Path) -> Result<EvalSummary> {
    let (cfg, net, store) = load_checkpoint(ckpt_dir)?;
    let ds = Dataset::load(manifest)?;
    if ds.is_empty() {
        return Err(GraftError::Config("evaluation manifest has no samples".into()));
    }
    let n = ds.len();
    let workers = worker_threads().min(n);
    let mut slots: Vec<Option<Result<EvalRow>>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (t, piece) in slots.chunks_mut(chunk).enumerate() {
            let (net, store, ds, cfg) = (&net, &store, &ds, &cfg);
            scope.spawn(move || {
                for (off, slot) in piece.iter_mut().enumerate() {
                    let i = t * chunk + off;
                    *slot = Some(eval_one(net, store, ds, i, cfg.model.cnn_hw, cfg.model.attn_hw));
                }
            });
        }
    });
    let mut rows = Vec::with_capacity(n);
    for slot in slots {
        rows.push(slot.expect("all slots filled")?);
    }
    for row in &rows {
        for wmsg in &row.warnings {
            eprintln!("warning: {}: {wmsg}", row.id);
        }
    }

    let nf = n as f64;
    let mean_mae = rows.iter().map(|r| r.mae).sum::<f64>() / nf;
    let mean_s = rows.iter().map(|r| r.s_measure).sum::<f64>() / nf;
    let mean_e = rows.iter().map(|r| r.e_measure).sum::<f64>() / nf;
    let mean_bde = rows.iter().map(|r| r.bde).sum::<f64>() / nf;
    let curve_len = rows[0].f_curve.len();
    let mut mean_curve = vec![0.0f64; curve_len];
    for r in &rows {
        for (acc, v) in mean_curve.iter_mut().zip(&r.f_curve) {
            *acc += v / nf;
        }
    }
    let dataset_f_max = mean_curve.iter().cloned().fold(0.0f64, f64::max);

    let mut lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.id, r.mae, r.f_max, r.s_measure, r.e_measure, r.bde
            )
        })
        .collect();
    lines.push(format!(
        "aggregate,{:.6},{:.6},{:.6},{:.6},{:.6}",
        mean_mae, dataset_f_max, mean_s, mean_e, mean_bde
    ));
    write_csv(csv_out, "sample_id,mae,f_max,s,e,bde", &lines)?;
    Ok(EvalSummary { rows, mean_mae, dataset_f_max, mean_s, mean_e, mean_bde })
}

// ---- inference -------------------------------------------------------------------

/// Predicts a saliency map for one image and writes it as an 8-bit PGM at the
/// image's original resolution.
pub fn infer(ckpt_dir: &Path, image_path: &Path, out_path: &Path) -> Result<()> {
    let (cfg, net, store) = load_checkpoint(ckpt_dir)?;
    let image = data::pnm::load_image(image_path)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let sample = Sample {
        id: "infer".into(),
        mask: Tensor::zeros(&[1, h, w]),
        original_hw: (h, w),
        image,
    };
    let p = predict_map(&net, &store, &sample, cfg.model.cnn_hw, cfg.model.attn_hw, (h, w))?;
    data::pnm::save_pgm(out_path, &p.cast::<f32>())
}
