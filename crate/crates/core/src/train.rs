//! Training loops: masked pretraining with the EMA student, and end-to-end
//! fine-tuning of the classification and segmentation heads.
//!
//! Every loop shuffles with the `shuffle` stream of the run seed, steps AdamW
//! once per batch and feeds the epoch-mean loss to the plateau scheduler.
//! Runs are a pure function of the configuration and the data.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{SegLoss, TrainConfig};
use crate::data::Dataset;
use crate::error::{EdmaeError, Result};
use crate::graph::Graph;
use crate::heads::{Classifier, Segmenter, SEG_CLASSES};
use crate::masking::{sample_mask, BinaryMask, MaskSpec};
use crate::metrics::{classification_metrics, segmentation_report, MetricsReport};
use crate::model::{DenseEncoderConfig, EdmaeModel};
use crate::optim::{plateau_step, AdamW, PlateauState};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

/// Per-epoch means. Fine-tuning curves leave the alignment and
/// reconstruction columns at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub align_loss: f64,
    pub recon_loss: f64,
    pub total_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,align_loss,recon_loss,total_loss,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8},{:.8},{:.8},{:e}",
            self.epoch, self.step, self.align_loss, self.recon_loss, self.total_loss, self.lr
        )
    }
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = format!("{}\n", EpochRecord::CSV_HEADER);
    for r in curve {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Hooks into a running loop. `stop` is polled between steps; once set, the
/// loop returns what it has with `interrupted = true`.
#[derive(Default)]
pub struct Control<'a> {
    pub stop: Option<&'a AtomicBool>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord, &Checkpoint) -> Result<()>>,
}

#[derive(Debug, Clone, Copy, Default)]
struct StepLosses {
    align: f64,
    recon: f64,
    total: f64,
}

struct LoopOutcome {
    curve: Vec<EpochRecord>,
    steps: u64,
    interrupted: bool,
}

fn run_epochs<S>(
    cfg: &TrainConfig,
    n: usize,
    stop: Option<&AtomicBool>,
    state: &mut S,
    mut step: impl FnMut(&mut S, &[usize], f64, u64) -> Result<StepLosses>,
    mut on_epoch: impl FnMut(&mut S, &EpochRecord) -> Result<()>,
) -> Result<LoopOutcome> {
    cfg.validate()?;
    if n == 0 {
        return Err(EdmaeError::Data("training set is empty".into()));
    }
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut plateau = PlateauState::new(cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = LoopOutcome {
        curve: Vec::with_capacity(cfg.epochs),
        steps: 0,
        interrupted: false,
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let lr = plateau.lr;
        let mut sums = StepLosses::default();
        for idx in order.chunks(cfg.batch) {
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                out.interrupted = true;
                return Ok(out);
            }
            let l = step(state, idx, lr, out.steps)?;
            out.steps += 1;
            let w = idx.len() as f64;
            sums.align += l.align * w;
            sums.recon += l.recon * w;
            sums.total += l.total * w;
        }
        let rec = EpochRecord {
            epoch,
            step: out.steps,
            align_loss: sums.align / n as f64,
            recon_loss: sums.recon / n as f64,
            total_loss: sums.total / n as f64,
            lr,
        };
        plateau_step(&cfg.plateau, &mut plateau, rec.total_loss);
        on_epoch(state, &rec)?;
        out.curve.push(rec);
    }
    Ok(out)
}

fn base_meta(cfg: &TrainConfig, kind: &str, enc: &DenseEncoderConfig, step: u64) -> CheckpointMeta {
    let mut meta = CheckpointMeta {
        step,
        momentum: cfg.model.momentum,
        align_weight: cfg.model.align_weight,
        mask_ratio: cfg.mask_ratio,
        seed: cfg.seed,
        ..Default::default()
    };
    let blocks: Vec<String> = enc.blocks.iter().map(|b| b.to_string()).collect();
    for (k, v) in [
        ("kind", kind.to_string()),
        ("in_channels", enc.in_channels.to_string()),
        ("stem_channels", enc.stem_channels.to_string()),
        ("growth", enc.growth.to_string()),
        ("block_layers", blocks.join(",")),
        ("patch", cfg.patch.to_string()),
    ] {
        meta.extra.insert(k.into(), v);
    }
    meta
}

fn prefixed(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore) {
    out.extend(store.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
}

fn meta_field<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    let raw = ck
        .meta
        .extra(key)
        .ok_or_else(|| EdmaeError::Config(format!("checkpoint metadata lacks {key}")))?;
    raw.parse()
        .map_err(|_| EdmaeError::Config(format!("checkpoint metadata has bad {key}: {raw:?}")))
}

fn checkpoint_kind(ck: &Checkpoint) -> Result<String> {
    meta_field(ck, "kind")
}

pub fn encoder_config_from(ck: &Checkpoint) -> Result<DenseEncoderConfig> {
    let blocks: String = meta_field(ck, "block_layers")?;
    let cfg = DenseEncoderConfig {
        in_channels: meta_field(ck, "in_channels")?,
        stem_channels: meta_field(ck, "stem_channels")?,
        growth: meta_field(ck, "growth")?,
        blocks: blocks
            .split(',')
            .map(|b| b.parse().map_err(|_| EdmaeError::Config(format!("bad block_layers {blocks:?}"))))
            .collect::<Result<_>>()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Teacher, student and decoder under `t/`, `s/` and `d/`.
pub fn pretrain_checkpoint(model: &EdmaeModel, cfg: &TrainConfig, step: u64) -> Checkpoint {
    let mut meta = base_meta(cfg, "pretrain", &model.config.encoder, step);
    meta.extra.insert("decoder_hidden".into(), model.config.decoder_hidden.to_string());
    meta.extra.insert("recon_scope".into(), model.config.recon_scope.as_str().into());
    let mut tensors = Vec::new();
    prefixed(&mut tensors, "t/", &model.teacher);
    prefixed(&mut tensors, "s/", &model.student);
    prefixed(&mut tensors, "d/", &model.decoder);
    Checkpoint { tensors, meta }
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<EdmaeModel> {
    if checkpoint_kind(ck)? != "pretrain" {
        return Err(EdmaeError::Config("not a pretraining checkpoint".into()));
    }
    let mut config = crate::model::EdmaeConfig {
        encoder: encoder_config_from(ck)?,
        decoder_hidden: meta_field(ck, "decoder_hidden")?,
        momentum: ck.meta.momentum,
        align_weight: ck.meta.align_weight,
        ..Default::default()
    };
    config.recon_scope = meta_field::<String>(ck, "recon_scope")?.parse()?;
    let mut model = EdmaeModel::new(config, 0)?;
    model.teacher.load_from(&ParamStore::from_prefixed(ck.entries(), "t/"))?;
    model.student.load_from(&ParamStore::from_prefixed(ck.entries(), "s/"))?;
    model.decoder.load_from(&ParamStore::from_prefixed(ck.entries(), "d/"))?;
    Ok(model)
}

/// Encoder weights to start fine-tuning from: the teacher of a pretraining
/// checkpoint, or the encoder of a fine-tuned one.
pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<(DenseEncoderConfig, ParamStore)> {
    let prefix = match checkpoint_kind(ck)?.as_str() {
        "pretrain" => "t/",
        "classifier" | "segmenter" => "e/",
        other => return Err(EdmaeError::Config(format!("unknown checkpoint kind {other:?}"))),
    };
    let cfg = encoder_config_from(ck)?;
    let mut enc = cfg.init(&mut rng::stream(0, "init"));
    enc.load_from(&ParamStore::from_prefixed(ck.entries(), prefix))?;
    Ok((cfg, enc))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: EdmaeModel,
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
    pub interrupted: bool,
}

fn grid_of(images: &Tensor<f32>, patch: usize) -> Result<(usize, usize)> {
    let [_, c, h, w] = images.dims4()?;
    if c != 1 {
        return Err(EdmaeError::Data(format!("expected single-channel images, got {c} channels")));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(EdmaeError::Config(format!("{h}x{w} images do not tile into {patch}-pixel patches")));
    }
    Ok((h / patch, w / patch))
}

fn diverged(step: u64, e: EdmaeError, last_good: Checkpoint) -> EdmaeError {
    match e {
        EdmaeError::NonFinite(reason) => EdmaeError::Diverged {
            step: step as usize,
            reason,
            last_good: Box::new(last_good),
        },
        other => other,
    }
}

/// Per step: fresh masks for every sample, forward, backward, AdamW on
/// teacher and decoder, then the EMA update of the student. A non-finite
/// value anywhere aborts with the parameters from before that step.
pub fn pretrain(cfg: &TrainConfig, images: &Tensor<f32>, ctl: Control<'_>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let (gh, gw) = grid_of(images, cfg.patch)?;
    struct State {
        model: EdmaeModel,
        opt: AdamW,
        masks: rng::Rng,
    }
    let mut st = State {
        model: EdmaeModel::new(cfg.model.clone(), cfg.seed)?,
        opt: AdamW::new(cfg.adamw),
        masks: rng::stream(cfg.seed, "mask"),
    };
    let Control { stop, mut on_epoch } = ctl;
    let n = images.shape()[0];
    let out = run_epochs(
        cfg,
        n,
        stop,
        &mut st,
        |st, idx, lr, step| {
            let x = images.gather(idx)?;
            let specs: Vec<MaskSpec> = idx
                .iter()
                .map(|_| sample_mask(gh, gw, cfg.patch, cfg.mask_ratio, st.masks.gen()))
                .collect::<Result<_>>()?;
            let res = pretrain_update(&mut st.model, &mut st.opt, &x, &specs, lr);
            res.map_err(|e| diverged(step, e, pretrain_checkpoint(&st.model, cfg, step)))
        },
        |st, rec| match on_epoch.as_deref_mut() {
            Some(hook) => hook(rec, &pretrain_checkpoint(&st.model, cfg, rec.step)),
            None => Ok(()),
        },
    )?;
    let checkpoint = pretrain_checkpoint(&st.model, cfg, out.steps);
    Ok(PretrainOutcome {
        model: st.model,
        checkpoint,
        curve: out.curve,
        interrupted: out.interrupted,
    })
}

/// One optimizer step. Leaves `model` untouched when it fails.
fn pretrain_update(
    model: &mut EdmaeModel,
    opt: &mut AdamW,
    x: &Tensor<f32>,
    specs: &[MaskSpec],
    lr: f64,
) -> Result<StepLosses> {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g)?;
    let v = model.pretrain_graph(&mut g, &bound, x, specs)?;
    g.backward(v.total_loss)?;
    let losses = StepLosses {
        align: g.value(v.align_loss).item() as f64,
        recon: g.value(v.recon_loss).item() as f64,
        total: g.value(v.total_loss).item() as f64,
    };
    let mut grads = model.teacher.collect_grads(&g, &bound.teacher);
    grads.extend(model.decoder.collect_grads(&g, &bound.decoder));
    drop(g);
    let mut params: Vec<&mut Tensor<f32>> = model
        .teacher
        .tensors_mut()
        .iter_mut()
        .chain(model.decoder.tensors_mut().iter_mut())
        .collect();
    opt.step(&mut params, &grads, lr)?;
    model.ema_update()?;
    Ok(losses)
}

const EVAL_BATCH: usize = 64;

fn labels_of(data: &Dataset, classes: usize, what: &str) -> Result<Vec<usize>> {
    let labels = data
        .labels
        .clone()
        .ok_or_else(|| EdmaeError::Data(format!("{what} set has unlabeled entries")))?;
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(EdmaeError::Config(format!(
            "class count mismatch: {what} set has label {bad} but the model has {classes} classes"
        )));
    }
    Ok(labels)
}

#[derive(Debug, Clone)]
pub struct ClassifyOutcome {
    pub model: Classifier,
    pub report: MetricsReport,
    pub curve: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
    pub interrupted: bool,
}

pub fn classifier_checkpoint(model: &Classifier, cfg: &TrainConfig, step: u64) -> Checkpoint {
    let mut meta = base_meta(cfg, "classifier", &model.encoder_config, step);
    meta.extra.insert("classes".into(), model.classes.to_string());
    let mut tensors = Vec::new();
    prefixed(&mut tensors, "e/", &model.encoder);
    prefixed(&mut tensors, "h/", &model.head);
    Checkpoint { tensors, meta }
}

pub fn classifier_from_checkpoint(ck: &Checkpoint) -> Result<Classifier> {
    if checkpoint_kind(ck)? != "classifier" {
        return Err(EdmaeError::Config("not a classifier checkpoint".into()));
    }
    let (cfg, enc) = encoder_from_checkpoint(ck)?;
    let mut model = Classifier::new(cfg, Some(&enc), meta_field(ck, "classes")?, 0)?;
    model.head.load_from(&ParamStore::from_prefixed(ck.entries(), "h/"))?;
    Ok(model)
}

/// Trains encoder and linear head with cross-entropy (head only when
/// `freeze_encoder`), then reports on `test`. A missing `encoder` means
/// random initialisation.
pub fn finetune_classify(
    cfg: &TrainConfig,
    encoder: Option<&ParamStore>,
    train: &Dataset,
    test: &Dataset,
    ctl: Control<'_>,
) -> Result<ClassifyOutcome> {
    cfg.validate()?;
    let labels = labels_of(train, cfg.classes, "training")?;
    labels_of(test, cfg.classes, "test")?;
    let present = labels.iter().max().map_or(0, |m| m + 1);
    if present != cfg.classes {
        return Err(EdmaeError::Config(format!(
            "class count mismatch: config has {} classes but training labels span {present}",
            cfg.classes
        )));
    }
    struct State {
        model: Classifier,
        opt: AdamW,
    }
    let mut st = State {
        model: Classifier::new(cfg.model.encoder.clone(), encoder, cfg.classes, cfg.seed)?,
        opt: AdamW::new(cfg.adamw),
    };
    let train_encoder = !cfg.freeze_encoder;
    let Control { stop, mut on_epoch } = ctl;
    let out = run_epochs(
        cfg,
        train.len(),
        stop,
        &mut st,
        |st, idx, lr, _| {
            let x = train.batch(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let m = &mut st.model;
            let mut g = Graph::<f32>::new();
            let (ev, hv) = m.bind(&mut g, train_encoder)?;
            let xv = g.constant(x)?;
            let logits = m.logits_graph(&mut g, &ev, &hv, xv)?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            g.backward(loss)?;
            let total = g.value(loss).item() as f64;
            let mut grads = if train_encoder { m.encoder.collect_grads(&g, &ev) } else { Vec::new() };
            grads.extend(m.head.collect_grads(&g, &hv));
            let enc: Vec<&mut Tensor<f32>> = if train_encoder {
                m.encoder.tensors_mut().iter_mut().collect()
            } else {
                Vec::new()
            };
            let mut params: Vec<&mut Tensor<f32>> = enc.into_iter().chain(m.head.tensors_mut().iter_mut()).collect();
            st.opt.step(&mut params, &grads, lr)?;
            Ok(StepLosses {
                total,
                ..Default::default()
            })
        },
        |st, rec| match on_epoch.as_deref_mut() {
            Some(hook) => hook(rec, &classifier_checkpoint(&st.model, cfg, rec.step)),
            None => Ok(()),
        },
    )?;
    let report = evaluate_classifier(&st.model, test)?;
    let checkpoint = classifier_checkpoint(&st.model, cfg, out.steps);
    Ok(ClassifyOutcome {
        model: st.model,
        report,
        curve: out.curve,
        checkpoint,
        interrupted: out.interrupted,
    })
}

pub fn evaluate_classifier(model: &Classifier, data: &Dataset) -> Result<MetricsReport> {
    let truth = labels_of(data, model.classes, "evaluation")?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut pred = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        pred.extend(model.predict(&data.batch(chunk)?)?);
    }
    classification_metrics(&pred, &truth, model.classes)
}

#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub model: Segmenter,
    pub report: MetricsReport,
    pub curve: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
    pub interrupted: bool,
}

pub fn segmenter_checkpoint(model: &Segmenter, cfg: &TrainConfig, step: u64) -> Checkpoint {
    let mut meta = base_meta(cfg, "segmenter", &model.encoder_config, step);
    meta.extra.insert("seg_hidden".into(), model.hidden.to_string());
    meta.extra.insert("loss".into(), cfg.loss.as_str().into());
    let mut tensors = Vec::new();
    prefixed(&mut tensors, "e/", &model.encoder);
    prefixed(&mut tensors, "h/", &model.head);
    Checkpoint { tensors, meta }
}

pub fn segmenter_from_checkpoint(ck: &Checkpoint) -> Result<Segmenter> {
    if checkpoint_kind(ck)? != "segmenter" {
        return Err(EdmaeError::Config("not a segmenter checkpoint".into()));
    }
    let (cfg, enc) = encoder_from_checkpoint(ck)?;
    let mut model = Segmenter::new(cfg, Some(&enc), meta_field(ck, "seg_hidden")?, 0)?;
    model.head.load_from(&ParamStore::from_prefixed(ck.entries(), "h/"))?;
    Ok(model)
}

fn masks_of<'a>(data: &'a Dataset, what: &str) -> Result<&'a [BinaryMask]> {
    let masks = data
        .masks
        .as_deref()
        .ok_or_else(|| EdmaeError::Data(format!("{what} set lacks segmentation masks")))?;
    let [_, _, h, w] = data.images.dims4()?;
    if let Some(m) = masks.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(EdmaeError::Data(format!(
            "{what} mask is {}x{} but images are {h}x{w}",
            m.height, m.width
        )));
    }
    Ok(masks)
}

/// Per-pixel two-class training with focal loss (or cross-entropy), then
/// Dice, Hausdorff and pixel AUC on `test`.
pub fn finetune_segment(
    cfg: &TrainConfig,
    encoder: Option<&ParamStore>,
    train: &Dataset,
    test: &Dataset,
    ctl: Control<'_>,
) -> Result<SegmentOutcome> {
    cfg.validate()?;
    let masks = masks_of(train, "training")?;
    masks_of(test, "test")?;
    struct State {
        model: Segmenter,
        opt: AdamW,
    }
    let mut st = State {
        model: Segmenter::new(cfg.model.encoder.clone(), encoder, cfg.seg_hidden, cfg.seed)?,
        opt: AdamW::new(cfg.adamw),
    };
    let train_encoder = !cfg.freeze_encoder;
    let Control { stop, mut on_epoch } = ctl;
    let out = run_epochs(
        cfg,
        train.len(),
        stop,
        &mut st,
        |st, idx, lr, _| {
            let x = train.batch(idx)?;
            let y: Vec<usize> = idx.iter().flat_map(|&i| masks[i].data.iter().map(|&b| b as usize)).collect();
            let m = &mut st.model;
            let mut g = Graph::<f32>::new();
            let (ev, hv) = m.bind(&mut g, train_encoder)?;
            let xv = g.constant(x)?;
            let logits = m.logits_graph(&mut g, &ev, &hv, xv)?;
            let loss = match cfg.loss {
                SegLoss::Focal => g.softmax_focal(logits, &y, cfg.focal.gamma, cfg.focal.alpha)?,
                SegLoss::CrossEntropy => g.softmax_cross_entropy(logits, &y)?,
            };
            g.backward(loss)?;
            let total = g.value(loss).item() as f64;
            let mut grads = if train_encoder { m.encoder.collect_grads(&g, &ev) } else { Vec::new() };
            grads.extend(m.head.collect_grads(&g, &hv));
            let enc: Vec<&mut Tensor<f32>> = if train_encoder {
                m.encoder.tensors_mut().iter_mut().collect()
            } else {
                Vec::new()
            };
            let mut params: Vec<&mut Tensor<f32>> = enc.into_iter().chain(m.head.tensors_mut().iter_mut()).collect();
            st.opt.step(&mut params, &grads, lr)?;
            Ok(StepLosses {
                total,
                ..Default::default()
            })
        },
        |st, rec| match on_epoch.as_deref_mut() {
            Some(hook) => hook(rec, &segmenter_checkpoint(&st.model, cfg, rec.step)),
            None => Ok(()),
        },
    )?;
    let report = evaluate_segmenter(&st.model, test)?;
    let checkpoint = segmenter_checkpoint(&st.model, cfg, out.steps);
    Ok(SegmentOutcome {
        model: st.model,
        report,
        curve: out.curve,
        checkpoint,
        interrupted: out.interrupted,
    })
}

/// A pixel is foreground when its foreground probability exceeds one half,
/// which is the two-class argmax with ties going to background.
pub fn evaluate_segmenter(model: &Segmenter, data: &Dataset) -> Result<MetricsReport> {
    let truths = masks_of(data, "evaluation")?;
    let [n, _, h, w] = data.images.dims4()?;
    let idx: Vec<usize> = (0..n).collect();
    let mut probs = Vec::with_capacity(n * h * w);
    for chunk in idx.chunks(EVAL_BATCH) {
        probs.extend(model.foreground_prob(&data.batch(chunk)?)?);
    }
    let preds = probs
        .chunks(h * w)
        .map(|p| BinaryMask::new(h, w, p.iter().map(|&v| v > 0.5).collect()))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
    debug_assert_eq!(SEG_CLASSES, 2);
    segmentation_report(&preds, truths, &scores, 1.0)
}
