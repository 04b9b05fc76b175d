//! Training and evaluation loops.
//!
//! Two phases share one epoch counter: pretraining covers epochs
//! `[0, pretrain_epochs)` and updates only the segmentation/auth groups at
//! `lr_seg` with `w_seg·L_seg + w_auth·L_auth` (the SD-Former and denoiser
//! stay untouched, `s_2 = s_1`); the joint phase covers
//! `[pretrain_epochs, total_epochs)` and optimizes
//! `w_seg·L_seg + w_auth·L_auth + w_diff·L_diff` with the denoising-side
//! groups at `lr_denoise`. A loss term whose weight is zero is never built,
//! so its gradient contribution is absent exactly (parameters reached only
//! by that term keep their values bit-for-bit).
//!
//! Evaluation follows the session-split verification protocol: the gallery
//! is the per-class mean embedding over the session-1 (train) images, each
//! session-2 probe scores a genuine cosine similarity against its own class
//! and impostor similarities against every other class, and identification
//! comes from the reverse-trajectory prediction. Segmentation metrics are
//! computed per probe against its mask and averaged.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{self, CheckpointMeta};
use crate::classical::ProbMask;
use crate::config::TrainConfig;
use crate::dataset::{eval_batches, train_batches, Batch, InMemoryDataset};
use crate::diffusion::default_schedule;
use crate::error::{Result, VeinError};
use crate::losses::{circle_loss, diff_loss, seg_loss};
use crate::metrics::{
    cl_dice, det_csv, det_curve, dice_suite, eer, identification_acc, DetPoint, MetricsReport,
};
use crate::model::{AblationFlags, DiffVein, DENOISE_GROUPS, SEG_GROUPS};
use crate::rng::{substream, Stream};
use crate::synth::{split_by_session, BinaryMask, DatasetManifest};
use crate::tensor::{ops, AdamW};

/// Mean loss components of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub seg: f64,
    pub auth: f64,
    pub diff: f64,
}

/// Model, optimizer and progress counters — everything the loops mutate.
pub struct TrainState {
    pub model: DiffVein,
    pub opt: AdamW,
    /// Epochs completed so far (pretraining counts toward the total).
    pub epochs_done: usize,
    /// One entry per completed epoch. Entries restored from a checkpoint
    /// keep only the total (component means are tracked within a run).
    pub history: Vec<EpochLoss>,
}

impl TrainState {
    /// Fresh f32 model and optimizer per the config.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            model: DiffVein::new(DType::F32, cfg.seed, cfg.num_classes)?,
            opt: AdamW::new(cfg.weight_decay),
            epochs_done: 0,
            history: Vec::new(),
        })
    }

    fn meta(&self, cfg: &TrainConfig) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epochs_done,
            seed: cfg.seed,
            adamw_step: self.opt.step_count(),
            n_classes: self.model.n_classes(),
            loss_history: self.history.iter().map(|e| e.total).collect(),
        }
    }

    /// Write a checkpoint of the current parameters and optimizer moments.
    pub fn save(&self, cfg: &TrainConfig, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model.store, Some(&self.opt), &self.meta(cfg))
    }
}

/// Load the manifest under `cfg.data_root` and split it into the session-1
/// train set and the session-2 test set.
pub fn load_split(cfg: &TrainConfig) -> Result<(InMemoryDataset, InMemoryDataset)> {
    let manifest = DatasetManifest::load(&cfg.data_root.join("manifest.txt"))?;
    if manifest.num_classes != cfg.num_classes {
        return Err(VeinError::config(format!(
            "manifest under {} has {} classes but the config says num_classes = {}",
            cfg.data_root.display(),
            manifest.num_classes,
            cfg.num_classes
        )));
    }
    let (train_m, test_m) = split_by_session(&manifest)?;
    Ok((
        InMemoryDataset::load(&cfg.data_root, &train_m)?,
        InMemoryDataset::load(&cfg.data_root, &test_m)?,
    ))
}

fn standard_normal(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    dtype: DType,
) -> Result<Tensor> {
    let v: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.detach().to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// A step's total loss tensor plus the component values for logging.
struct StepLoss {
    total: Tensor,
    total_v: f64,
    seg_v: f64,
    auth_v: f64,
    diff_v: f64,
}

/// Weighted sum of whichever loss terms exist. Callers only build a term
/// when its weight is nonzero, so a zero weight removes the term from the
/// graph entirely rather than scaling it.
fn compose(
    cfg: &TrainConfig,
    l_seg: Option<Tensor>,
    l_auth: Option<Tensor>,
    l_diff: Option<Tensor>,
) -> Result<StepLoss> {
    let seg_v = l_seg.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
    let auth_v = l_auth.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
    let diff_v = l_diff.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
    let mut total: Option<Tensor> = None;
    for (w, term) in [(cfg.w_seg, l_seg), (cfg.w_auth, l_auth), (cfg.w_diff, l_diff)] {
        let Some(term) = term else { continue };
        let scaled = (term * w)?;
        total = Some(match total {
            Some(acc) => (acc + scaled)?,
            None => scaled,
        });
    }
    let total =
        total.ok_or_else(|| VeinError::config("every active loss weight is zero — nothing to train"))?;
    let total_v = scalar(&total)?;
    Ok(StepLoss { total, total_v, seg_v, auth_v, diff_v })
}

fn ensure_finite(
    loss: &StepLoss,
    phase: &str,
    epoch: usize,
    step: usize,
    t: Option<usize>,
    batch: &Batch,
) -> Result<()> {
    let finite = loss.total_v.is_finite()
        && loss.seg_v.is_finite()
        && loss.auth_v.is_finite()
        && loss.diff_v.is_finite();
    if finite {
        return Ok(());
    }
    Err(VeinError::invariant(format!(
        "non-finite {phase} loss at epoch {epoch} step {step}: total={}, seg={}, auth={}, \
         diff={}, t={t:?}, sample indices {:?}, labels {:?}",
        loss.total_v, loss.seg_v, loss.auth_v, loss.diff_v, batch.indices, batch.labels
    )))
}

fn circle(cfg: &TrainConfig, embeddings: &Tensor, labels: &[usize]) -> Result<Tensor> {
    circle_loss(embeddings, labels, cfg.circle_gamma, cfg.circle_delta_p, cfg.circle_delta_n)
}

/// Pretraining epochs `[epochs_done, pretrain_epochs)`: segmentation + auth
/// groups only, at `lr_seg`, with the fusion path inactive.
pub fn run_pretrain(cfg: &TrainConfig, ds: &InMemoryDataset, state: &mut TrainState) -> Result<()> {
    if cfg.w_seg == 0.0 && cfg.w_auth == 0.0 {
        return Err(VeinError::config("pretraining needs w_seg or w_auth nonzero"));
    }
    let dtype = state.model.store.dtype();
    let seg_params = state.model.store.trainable_with_prefixes(&SEG_GROUPS);
    while state.epochs_done < cfg.pretrain_epochs {
        let epoch = state.epochs_done;
        let batches = train_batches(ds, cfg.batch_size, cfg.seed, epoch, dtype, &Device::Cpu)?;
        let mut sums = EpochLoss { epoch, total: 0.0, seg: 0.0, auth: 0.0, diff: 0.0 };
        for (step, batch) in batches.iter().enumerate() {
            let (seg, auth) = state.model.pretrain_forward(&batch.images, true)?;
            let l_seg = (cfg.w_seg != 0.0)
                .then(|| seg_loss(&seg.mask_logits, &batch.masks, cfg.alpha))
                .transpose()?;
            let l_auth = (cfg.w_auth != 0.0)
                .then(|| circle(cfg, &auth.embedding, &batch.labels))
                .transpose()?;
            let loss = compose(cfg, l_seg, l_auth, None)?;
            ensure_finite(&loss, "pretrain", epoch, step, None, batch)?;
            let grads = loss.total.backward()?;
            state.opt.step(&grads, &[(cfg.lr_seg, &seg_params)])?;
            sums.total += loss.total_v;
            sums.seg += loss.seg_v;
            sums.auth += loss.auth_v;
        }
        let n = batches.len() as f64;
        sums.total /= n;
        sums.seg /= n;
        sums.auth /= n;
        eprintln!(
            "pretrain epoch {}/{}: loss {:.6} (seg {:.6}, auth {:.6})",
            epoch + 1,
            cfg.pretrain_epochs,
            sums.total,
            sums.seg,
            sums.auth
        );
        state.history.push(sums);
        state.epochs_done += 1;
    }
    Ok(())
}

/// Joint epochs `[epochs_done, total_epochs)`: every batch samples one
/// `(t, ε)`, runs the bidirectional forward, and updates the segmentation
/// groups at `lr_seg` and the denoising groups at `lr_denoise`.
pub fn run_joint(cfg: &TrainConfig, ds: &InMemoryDataset, state: &mut TrainState) -> Result<()> {
    if cfg.w_seg == 0.0 && cfg.w_auth == 0.0 && cfg.w_diff == 0.0 {
        return Err(VeinError::config("joint training needs a nonzero loss weight"));
    }
    let flags = AblationFlags::from_config(cfg);
    let sched = default_schedule(cfg.t_steps)?;
    let lambda = if cfg.use_fouriersim { cfg.lambda } else { 0.0 };
    let dtype = state.model.store.dtype();
    let seg_params = state.model.store.trainable_with_prefixes(&SEG_GROUPS);
    let den_params = state.model.store.trainable_with_prefixes(&DENOISE_GROUPS);
    while state.epochs_done < cfg.total_epochs {
        let epoch = state.epochs_done;
        let batches = train_batches(ds, cfg.batch_size, cfg.seed, epoch, dtype, &Device::Cpu)?;
        let mut sums = EpochLoss { epoch, total: 0.0, seg: 0.0, auth: 0.0, diff: 0.0 };
        for (step, batch) in batches.iter().enumerate() {
            let mut drng = substream(cfg.seed, Stream::Diffusion, &[epoch as u64, step as u64]);
            let t: usize = drng.random_range(1..=cfg.t_steps);
            let eps = standard_normal(&mut drng, batch.labels.len(), cfg.num_classes, dtype)?;
            let out = state
                .model
                .joint_forward(&batch.images, &batch.onehot, t, &eps, &sched, flags, true)?;
            let l_seg = (cfg.w_seg != 0.0)
                .then(|| seg_loss(&out.seg.mask_logits, &batch.masks, cfg.alpha))
                .transpose()?;
            let l_auth = (cfg.w_auth != 0.0)
                .then(|| circle(cfg, &out.auth.embedding, &batch.labels))
                .transpose()?;
            let l_diff = match (&out.eps_hat, cfg.w_diff != 0.0) {
                (Some(eps_hat), true) => Some(diff_loss(&eps, eps_hat, lambda)?),
                _ => None,
            };
            let loss = compose(cfg, l_seg, l_auth, l_diff)?;
            ensure_finite(&loss, "joint", epoch, step, Some(t), batch)?;
            let grads = loss.total.backward()?;
            state
                .opt
                .step(&grads, &[(cfg.lr_seg, &seg_params), (cfg.lr_denoise, &den_params)])?;
            sums.total += loss.total_v;
            sums.seg += loss.seg_v;
            sums.auth += loss.auth_v;
            sums.diff += loss.diff_v;
        }
        let n = batches.len() as f64;
        sums.total /= n;
        sums.seg /= n;
        sums.auth /= n;
        sums.diff /= n;
        eprintln!(
            "joint epoch {}/{}: loss {:.6} (seg {:.6}, auth {:.6}, diff {:.6})",
            epoch + 1,
            cfg.total_epochs,
            sums.total,
            sums.seg,
            sums.auth,
            sums.diff
        );
        state.history.push(sums);
        state.epochs_done += 1;
    }
    Ok(())
}

/// `pretrain` operation: fresh model, pretraining phase, checkpoint out.
pub fn pretrain_segmentation(cfg: &TrainConfig, ckpt_out: &Path) -> Result<TrainState> {
    let (train_ds, _test_ds) = load_split(cfg)?;
    let mut state = TrainState::new(cfg)?;
    run_pretrain(cfg, &train_ds, &mut state)?;
    state.save(cfg, ckpt_out)?;
    Ok(state)
}

/// `train` operation: resume from a pretraining checkpoint and run the
/// joint phase. The optimizer starts fresh — the trainable set and the
/// learning-rate split both change at the phase boundary.
pub fn joint_train(cfg: &TrainConfig, start: &Path, ckpt_out: &Path) -> Result<TrainState> {
    let (train_ds, _test_ds) = load_split(cfg)?;
    let mut state = TrainState::new(cfg)?;
    let meta = checkpoint::load_into(start, &state.model.store, None)?;
    if meta.n_classes != cfg.num_classes {
        return Err(VeinError::config(format!(
            "checkpoint {} was trained for {} classes but the config says {}",
            start.display(),
            meta.n_classes,
            cfg.num_classes
        )));
    }
    if meta.epoch < cfg.pretrain_epochs {
        return Err(VeinError::config(format!(
            "checkpoint {} has only {} epochs; finish pretraining (pretrain_epochs = {}) first",
            start.display(),
            meta.epoch,
            cfg.pretrain_epochs
        )));
    }
    state.epochs_done = meta.epoch;
    state.history = meta
        .loss_history
        .iter()
        .enumerate()
        .map(|(epoch, &total)| EpochLoss { epoch, total, seg: 0.0, auth: 0.0, diff: 0.0 })
        .collect();
    run_joint(cfg, &train_ds, &mut state)?;
    state.save(cfg, ckpt_out)?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Everything one evaluation produces: the report plus the raw DET curve
/// and score sets it was computed from.
pub struct EvalArtifacts {
    pub report: MetricsReport,
    pub det: Vec<DetPoint>,
    pub genuine: Vec<f32>,
    pub impostor: Vec<f32>,
}

/// One scored test image.
struct Probe {
    label: usize,
    predicted: usize,
    embedding: Vec<f64>,
    pred_mask: ProbMask,
    gt_mask: BinaryMask,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug)]
struct SegAgg {
    dice: f64,
    cl_dice: f64,
    pixel_acc: f64,
    auc: f64,
    miou: f64,
}

/// Score a probe set against the gallery: genuine/impostor cosine scores,
/// identification accuracy, and averaged segmentation metrics.
fn score_probes(
    probes: &[Probe],
    gallery: &[Option<Vec<f64>>],
) -> Result<(Vec<f32>, Vec<f32>, f64, SegAgg)> {
    if probes.is_empty() {
        return Err(VeinError::invariant("no probes to evaluate"));
    }
    let mut genuine = Vec::with_capacity(probes.len());
    let mut impostor = Vec::new();
    for p in probes {
        let own = gallery.get(p.label).and_then(|g| g.as_ref()).ok_or_else(|| {
            VeinError::invariant(format!(
                "protocol error: class {} appears in the test split but has no gallery entry",
                p.label
            ))
        })?;
        genuine.push(cosine(&p.embedding, own) as f32);
        for (class, entry) in gallery.iter().enumerate() {
            if class == p.label {
                continue;
            }
            if let Some(entry) = entry {
                impostor.push(cosine(&p.embedding, entry) as f32);
            }
        }
    }
    let predicted: Vec<usize> = probes.iter().map(|p| p.predicted).collect();
    let actual: Vec<usize> = probes.iter().map(|p| p.label).collect();
    let acc = identification_acc(&predicted, &actual)?;

    let mut agg = SegAgg { dice: 0.0, cl_dice: 0.0, pixel_acc: 0.0, auc: 0.0, miou: 0.0 };
    for p in probes {
        let suite = dice_suite(&p.pred_mask, &p.gt_mask, 0.5)?;
        let pred_bin = BinaryMask::new(
            p.pred_mask.h,
            p.pred_mask.w,
            p.pred_mask.pixels.iter().map(|&v| u8::from(v >= 0.5)).collect(),
        )?;
        agg.dice += suite.dice;
        agg.pixel_acc += suite.pixel_acc;
        agg.auc += suite.auc;
        agg.miou += suite.miou;
        agg.cl_dice += cl_dice(&pred_bin, &p.gt_mask)?;
    }
    let n = probes.len() as f64;
    agg.dice /= n;
    agg.pixel_acc /= n;
    agg.auc /= n;
    agg.miou /= n;
    agg.cl_dice /= n;
    Ok((genuine, impostor, acc, agg))
}

fn embedding_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.detach().to_dtype(DType::F64)?.to_vec2()?)
}

/// Flatten a `(B, 1, S, S)` tensor into per-row pixel vectors.
fn pixel_rows(t: &Tensor) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    let (_b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(VeinError::invariant("expected single-channel masks"));
    }
    let flat: Vec<f32> = t.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((h, w, flat.chunks(h * w).map(|c| c.to_vec()).collect()))
}

/// Evaluate `model` on the session split: session-1 images build the
/// gallery, session-2 images are the probes.
pub fn evaluate_model(
    cfg: &TrainConfig,
    model: &DiffVein,
    train_ds: &InMemoryDataset,
    test_ds: &InMemoryDataset,
    dataset_label: &str,
    checkpoint_label: &str,
) -> Result<EvalArtifacts> {
    if model.n_classes() != cfg.num_classes {
        return Err(VeinError::invariant(format!(
            "model has {} classes but the config says {}",
            model.n_classes(),
            cfg.num_classes
        )));
    }
    let flags = AblationFlags::from_config(cfg);
    let sched = default_schedule(cfg.t_steps)?;
    let dtype = model.store.dtype();
    let device = Device::Cpu;

    // gallery: per-class mean embedding over the train split
    let mut sums: Vec<Option<Vec<f64>>> = vec![None; cfg.num_classes];
    let mut counts = vec![0usize; cfg.num_classes];
    for (bi, batch) in eval_batches(train_ds, cfg.batch_size, dtype, &device)?.iter().enumerate() {
        let mut rng = substream(cfg.seed, Stream::Sampler, &[1, bi as u64]);
        let out = model.eval_forward(&batch.images, &sched, flags, &mut rng)?;
        for (row, &label) in embedding_rows(&out.embedding)?.iter().zip(&batch.labels) {
            let slot = sums[label].get_or_insert_with(|| vec![0.0; row.len()]);
            for (acc, v) in slot.iter_mut().zip(row) {
                *acc += v;
            }
            counts[label] += 1;
        }
    }
    let gallery: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(sum, &count)| {
            sum.map(|vec| vec.into_iter().map(|v| v / count as f64).collect())
        })
        .collect();

    // probes: the test split
    let mut probes = Vec::with_capacity(test_ds.len());
    for (bi, batch) in eval_batches(test_ds, cfg.batch_size, dtype, &device)?.iter().enumerate() {
        let mut rng = substream(cfg.seed, Stream::Sampler, &[2, bi as u64]);
        let out = model.eval_forward(&batch.images, &sched, flags, &mut rng)?;
        let embeddings = embedding_rows(&out.embedding)?;
        let (h, w, prob_rows) = pixel_rows(&ops::sigmoid(&out.mask_logits)?)?;
        let (gh, gw, gt_rows) = pixel_rows(&batch.masks)?;
        for i in 0..batch.labels.len() {
            probes.push(Probe {
                label: batch.labels[i],
                predicted: out.predicted[i],
                embedding: embeddings[i].clone(),
                pred_mask: ProbMask::new(h, w, prob_rows[i].clone())?,
                gt_mask: BinaryMask::new(
                    gh,
                    gw,
                    gt_rows[i].iter().map(|&v| u8::from(v >= 0.5)).collect(),
                )?,
            });
        }
    }

    let (genuine, impostor, acc, agg) = score_probes(&probes, &gallery)?;
    let det = det_curve(&genuine, &impostor)?;
    let eer_v = eer(&det)?;
    let report = MetricsReport {
        eer: eer_v,
        identification_acc: acc,
        dice: agg.dice,
        cl_dice: agg.cl_dice,
        pixel_acc: agg.pixel_acc,
        auc: agg.auc,
        miou: agg.miou,
        dataset: dataset_label.to_string(),
        checkpoint: checkpoint_label.to_string(),
        t_steps: cfg.t_steps,
    };
    Ok(EvalArtifacts { report, det, genuine, impostor })
}

/// Append `suffix` to a path's final component (`out/m` → `out/m.det.csv`).
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

/// Write `<report>`, `<report>.det.csv` and `<report>.scores`.
pub fn write_eval_artifacts(report_path: &Path, art: &EvalArtifacts) -> Result<()> {
    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(report_path, art.report.to_text())?;
    std::fs::write(sibling(report_path, ".det.csv"), det_csv(&art.det))?;
    let mut scores = String::from("kind,score\n");
    for v in &art.genuine {
        scores.push_str(&format!("genuine,{v}\n"));
    }
    for v in &art.impostor {
        scores.push_str(&format!("impostor,{v}\n"));
    }
    std::fs::write(sibling(report_path, ".scores"), scores)?;
    Ok(())
}

/// `eval` operation: load the checkpoint, run the protocol, write the
/// report and its DET/score sidecars.
pub fn evaluate(cfg: &TrainConfig, ckpt: &Path, report_path: &Path) -> Result<MetricsReport> {
    let meta = checkpoint::read_meta(ckpt)?;
    if meta.n_classes != cfg.num_classes {
        return Err(VeinError::config(format!(
            "checkpoint {} was trained for {} classes but the config says {}",
            ckpt.display(),
            meta.n_classes,
            cfg.num_classes
        )));
    }
    let model = DiffVein::new(DType::F32, cfg.seed, cfg.num_classes)?;
    checkpoint::load_into(ckpt, &model.store, None)?;
    let (train_ds, test_ds) = load_split(cfg)?;
    let art = evaluate_model(
        cfg,
        &model,
        &train_ds,
        &test_ds,
        &cfg.data_root.display().to_string(),
        &ckpt.display().to_string(),
    )?;
    write_eval_artifacts(report_path, &art)?;
    Ok(art.report)
}

/// `det` operation: re-derive `<report>.det.csv` from `<report>.scores`.
/// Returns the CSV path.
pub fn det_from_report(report_path: &Path) -> Result<PathBuf> {
    let scores_path = sibling(report_path, ".scores");
    let text = std::fs::read_to_string(&scores_path).map_err(|e| VeinError::Dataset {
        path: scores_path.clone(),
        msg: format!("cannot read score file ({e}); run `eval` first"),
    })?;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || (lineno == 0 && line == "kind,score") {
            continue;
        }
        let bad = || {
            VeinError::Dataset {
                path: scores_path.clone(),
                msg: format!("line {}: expected `genuine,<score>` or `impostor,<score>`", lineno + 1),
            }
        };
        let (kind, value) = line.split_once(',').ok_or_else(bad)?;
        let value: f32 = value.trim().parse().map_err(|_| bad())?;
        match kind {
            "genuine" => genuine.push(value),
            "impostor" => impostor.push(value),
            _ => return Err(bad()),
        }
    }
    let det = det_curve(&genuine, &impostor)?;
    let out = sibling(report_path, ".det.csv");
    std::fs::write(&out, det_csv(&det))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir()
            .join(format!("veindiff_trainer_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    /// 2 classes × 2/session × 2 sessions = 8 images.
    fn toy_cfg(tag: &str, seed: u64) -> TrainConfig {
        let root = tmpdir(tag);
        let cfg = TrainConfig {
            data_root: root.clone(),
            num_classes: 2,
            samples_per_session: 2,
            image_h: 96,
            image_w: 96,
            batch_size: 4,
            pretrain_epochs: 4,
            total_epochs: 6,
            t_steps: 8,
            seed,
            ..TrainConfig::default()
        };
        generate_dataset(
            &root,
            cfg.num_classes,
            cfg.samples_per_session,
            cfg.image_h,
            cfg.image_w,
            cfg.seed,
        )
        .unwrap();
        cfg
    }

    fn param_snapshot(model: &DiffVein) -> Vec<(String, Vec<f32>)> {
        model
            .store
            .snapshot()
            .into_iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(name, t, _)| (name, t.flatten_all().unwrap().to_vec1().unwrap()))
            .collect()
    }

    /// Names whose values changed between two snapshots.
    fn changed(
        before: &[(String, Vec<f32>)],
        after: &[(String, Vec<f32>)],
    ) -> Vec<String> {
        before
            .iter()
            .zip(after)
            .filter(|((n1, v1), (n2, v2))| {
                assert_eq!(n1, n2);
                v1 != v2
            })
            .map(|((n, _), _)| n.clone())
            .collect()
    }

    #[test]
    fn pretrain_reduces_seg_loss_and_checkpoint_round_trips() {
        let mut cfg = toy_cfg("pretrain", 11);
        cfg.pretrain_epochs = 30;
        let ckpt = cfg.data_root.join("pre.safetensors");
        let state = pretrain_segmentation(&cfg, &ckpt).unwrap();

        assert_eq!(state.history.len(), 30);
        let first = state.history.first().unwrap();
        let last = state.history.last().unwrap();
        assert!(
            last.seg < first.seg,
            "L_seg did not decrease: {} -> {}",
            first.seg,
            last.seg
        );
        let meta = checkpoint::read_meta(&ckpt).unwrap();
        assert_eq!(meta.epoch, 30);
        assert_eq!(meta.loss_history.len(), 30);

        // load into a differently-seeded model: one eval-batch loss must be
        // bit-identical to the trained model's
        let mut other = TrainConfig { seed: 999, ..cfg.clone() };
        let loaded = TrainState::new(&other).unwrap();
        checkpoint::load_into(&ckpt, &loaded.model.store, None).unwrap();
        other.seed = cfg.seed;

        let (train_ds, _) = load_split(&cfg).unwrap();
        let batch = &eval_batches(&train_ds, cfg.batch_size, DType::F32, &Device::Cpu).unwrap()[0];
        let loss_of = |model: &DiffVein| -> f64 {
            let (seg, auth) = model.pretrain_forward(&batch.images, false).unwrap();
            let l_seg = seg_loss(&seg.mask_logits, &batch.masks, cfg.alpha).unwrap();
            let l_auth = circle(&cfg, &auth.embedding, &batch.labels).unwrap();
            scalar(&(l_seg + l_auth).unwrap()).unwrap()
        };
        let a = loss_of(&state.model);
        let b = loss_of(&loaded.model);
        assert_eq!(a.to_bits(), b.to_bits(), "round-trip loss differs: {a} vs {b}");
        std::fs::remove_dir_all(&cfg.data_root).ok();
    }

    #[test]
    fn pretrain_is_deterministic_across_runs() {
        let cfg = toy_cfg("det", 13);
        let run = || {
            let (train_ds, _) = load_split(&cfg).unwrap();
            let mut state = TrainState::new(&cfg).unwrap();
            run_pretrain(&cfg, &train_ds, &mut state).unwrap();
            state.history.last().unwrap().total
        };
        let (a, b) = (run(), run());
        assert!((a - b).abs() <= 1e-6, "final losses differ: {a} vs {b}");
        std::fs::remove_dir_all(&cfg.data_root).ok();
    }

    #[test]
    fn joint_runs_deterministically_and_extends_history() {
        let cfg = toy_cfg("joint", 17);
        let run = || {
            let (train_ds, _) = load_split(&cfg).unwrap();
            let mut state = TrainState::new(&cfg).unwrap();
            run_pretrain(&cfg, &train_ds, &mut state).unwrap();
            run_joint(&cfg, &train_ds, &mut state).unwrap();
            assert_eq!(state.epochs_done, cfg.total_epochs);
            assert_eq!(state.history.len(), cfg.total_epochs);
            // the joint epochs actually exercised the diffusion loss
            assert!(state.history.last().unwrap().diff != 0.0);
            state.history.iter().map(|e| e.total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        std::fs::remove_dir_all(&cfg.data_root).ok();
    }

    #[test]
    fn zero_loss_weights_freeze_exactly_the_params_they_reach() {
        let cfg = toy_cfg("gating", 19);
        let (train_ds, _) = load_split(&cfg).unwrap();
        let one_joint_epoch = |w_seg: f64, w_auth: f64, w_diff: f64| {
            let cfg = TrainConfig {
                w_seg,
                w_auth,
                w_diff,
                pretrain_epochs: 0,
                total_epochs: 1,
                ..cfg.clone()
            };
            let mut state = TrainState::new(&cfg).unwrap();
            let before = param_snapshot(&state.model);
            run_joint(&cfg, &train_ds, &mut state).unwrap();
            changed(&before, &param_snapshot(&state.model))
        };
        let moved = |list: &[String], prefix: &str| list.iter().any(|n| n.starts_with(prefix));

        let base = one_joint_epoch(1.0, 1.0, 1.0);
        assert!(moved(&base, "segmentation.segout."));
        assert!(moved(&base, "denoiser."));
        assert!(moved(&base, "mask_condition."));

        // w_diff = 0: the denoising side gets no gradient at all, yet the
        // SD-Former still learns through the fused segmentation losses
        let no_diff = one_joint_epoch(1.0, 1.0, 0.0);
        assert!(!moved(&no_diff, "denoiser."));
        assert!(!moved(&no_diff, "mask_condition."));
        assert!(moved(&no_diff, "sdformer."));
        assert!(moved(&no_diff, "segmentation.segout."));

        // w_seg = 0: the mask head is reached only by L_seg
        let no_seg = one_joint_epoch(0.0, 1.0, 1.0);
        assert!(!moved(&no_seg, "segmentation.segout."));
        assert!(moved(&no_seg, "denoiser."));

        // w_auth = 0 in pretraining: the entire auth head freezes
        let one_pretrain_epoch = |w_auth: f64| {
            let cfg = TrainConfig { w_auth, pretrain_epochs: 1, ..cfg.clone() };
            let mut state = TrainState::new(&cfg).unwrap();
            let before = param_snapshot(&state.model);
            run_pretrain(&cfg, &train_ds, &mut state).unwrap();
            changed(&before, &param_snapshot(&state.model))
        };
        let with_auth = one_pretrain_epoch(1.0);
        assert!(moved(&with_auth, "auth_head.res1."));
        let no_auth = one_pretrain_epoch(0.0);
        assert!(!moved(&no_auth, "auth_head."));
        assert!(moved(&no_auth, "segmentation."));
        std::fs::remove_dir_all(&cfg.data_root).ok();
    }

    #[test]
    fn perfect_probes_give_perfect_metrics_and_missing_gallery_errors() {
        // hand-built probes: orthogonal class embeddings, exact masks
        let gallery: Vec<Option<Vec<f64>>> = vec![
            Some(vec![1.0, 0.0, 0.0]),
            Some(vec![0.0, 1.0, 0.0]),
            Some(vec![0.0, 0.0, 1.0]),
        ];
        let mask = |bits: &[u8]| BinaryMask::new(2, 2, bits.to_vec()).unwrap();
        let prob = |bits: &[u8]| {
            ProbMask::new(2, 2, bits.iter().map(|&b| b as f32).collect()).unwrap()
        };
        let probes: Vec<Probe> = (0..3)
            .map(|class| {
                let bits = [&[1, 0, 0, 1][..], &[0, 1, 1, 0][..], &[1, 1, 0, 0][..]][class];
                let mut embedding = vec![0.0; 3];
                embedding[class] = 2.0; // scale must not matter for cosine
                Probe {
                    label: class,
                    predicted: class,
                    embedding,
                    pred_mask: prob(bits),
                    gt_mask: mask(bits),
                }
            })
            .collect();

        let (genuine, impostor, acc, agg) = score_probes(&probes, &gallery).unwrap();
        assert_eq!(genuine.len(), 3);
        assert_eq!(impostor.len(), 6);
        assert!(genuine.iter().all(|&g| (g - 1.0).abs() < 1e-6));
        assert!(impostor.iter().all(|&i| i.abs() < 1e-6));
        assert_eq!(acc, 1.0);
        assert_eq!(agg.dice, 1.0);
        assert_eq!(agg.cl_dice, 1.0);
        assert_eq!(agg.pixel_acc, 1.0);
        assert_eq!(agg.miou, 1.0);
        let det = det_curve(&genuine, &impostor).unwrap();
        assert_eq!(eer(&det).unwrap(), 0.0);

        // class 3 present in the probes but absent from the gallery
        let mut short_gallery = gallery.clone();
        short_gallery[1] = None;
        let err = score_probes(&probes, &short_gallery).unwrap_err();
        assert!(err.to_string().contains("class 1"), "unexpected error: {err}");
    }

    #[test]
    fn untrained_model_scores_near_chance_and_artifacts_round_trip() {
        // 12 classes at a small render size; eval runs at T = 6
        let root = tmpdir("chance");
        let cfg = TrainConfig {
            data_root: root.clone(),
            num_classes: 12,
            samples_per_session: 6,
            image_h: 128,
            image_w: 160,
            batch_size: 4,
            t_steps: 6,
            seed: 23,
            ..TrainConfig::default()
        };
        generate_dataset(&root, 12, 6, cfg.image_h, cfg.image_w, cfg.seed).unwrap();

        // save an untrained checkpoint and evaluate through the file path
        let state = TrainState::new(&cfg).unwrap();
        let ckpt = root.join("untrained.safetensors");
        state.save(&cfg, &ckpt).unwrap();
        let report_path = root.join("out/report.txt");
        let report = evaluate(&cfg, &ckpt, &report_path).unwrap();

        let chance = 1.0 / 12.0;
        assert!(
            (report.identification_acc - chance).abs() <= 0.15,
            "untrained accuracy {} too far from chance {chance}",
            report.identification_acc
        );

        // artifacts: report text round-trips (modulo the fixed 6-decimal
        // formatting), DET csv re-derives bit-equal
        let text = std::fs::read_to_string(&report_path).unwrap();
        assert_eq!(
            MetricsReport::from_text(&text).unwrap(),
            MetricsReport::from_text(&report.to_text()).unwrap()
        );
        let csv_path = sibling(&report_path, ".det.csv");
        let original_csv = std::fs::read_to_string(&csv_path).unwrap();
        let rederived = det_from_report(&report_path).unwrap();
        assert_eq!(rederived, csv_path);
        assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), original_csv);
        std::fs::remove_dir_all(&root).ok();
    }
}
