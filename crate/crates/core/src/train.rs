//! Optimization loop with checkpoints and metrics, and the inference
//! helpers shared by evaluation and the command line.
//!
//! One step consumes one clip. Parameters whose names start with
//! [`BACKBONE_PREFIX`] train at `lr_backbone`, everything else at
//! `lr_transformer`; both drop 10x from `lr_drop_epoch` on.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistr_tensor::{set_deterministic, ParamStore, Tape, Tensor};

use crate::annotations::Sample;
use crate::config::{FrameOrder, TrainConfig};
use crate::error::{arg_err, Result, VisError};
use crate::eval::{default_thresholds, evaluate, postprocess, sequence_mask_iou, slot_masks, EvalReport, InstanceResult, VideoTruth};
use crate::losses::{hungarian_loss, LossBreakdown, LossWeights};
use crate::matching::{hungarian, matching_cost_matrix, PredictionValues};
use crate::model::{ModelConfig, VisTr};
use crate::synth::{InstanceSequenceTruth, VideoClip};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";
pub const BACKBONE_PREFIX: &str = "backbone.";

const METRICS_HEADER: &str = "step,epoch,video_id,total,class,box,mask,lr,lr_backbone,grad_norm";

/// A freshly initialized network. The same seed always yields the same
/// parameters.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<(VisTr, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = VisTr::new(cfg.clone(), &mut store, &mut rng)?;
    Ok((model, store))
}

/// Adam with decoupled weight decay, applied to every parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0, m: zeros.clone(), v: zeros }
    }

    /// One update; `lrs[i]` is the learning rate of the `i`-th parameter.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lrs: &[f64]) -> Result<()> {
        if grads.len() != self.m.len() || lrs.len() != self.m.len() {
            return arg_err(format!("{} gradients and {} rates for {} parameters", grads.len(), lrs.len(), self.m.len()));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let value = &store.get(id).value;
            let (m, v, lr) = (&mut self.m[i], &mut self.v[i], lrs[i]);
            let updated: Vec<f32> = value
                .data()
                .iter()
                .zip(grads[i].data())
                .enumerate()
                .map(|(k, (&w, &g))| {
                    let (w, g) = (w as f64, g as f64);
                    m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                    v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                    let adam = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                    (w - lr * self.weight_decay * w - lr * adam) as f32
                })
                .collect();
            let shape = value.shape().to_vec();
            store.set(id, Tensor::new(shape, updated)?)?;
        }
        Ok(())
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm` (0
/// disables) and returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

/// Reorders the frames of a clip and of its annotations alike.
pub fn permute_frames(
    clip: &VideoClip,
    truths: &[InstanceSequenceTruth],
    order: &[usize],
) -> Result<(VideoClip, Vec<InstanceSequenceTruth>)> {
    let t = clip.frames.shape()[0];
    let mut seen = vec![false; t];
    if order.len() != t || order.iter().any(|&f| f >= t || std::mem::replace(&mut seen[f], true)) {
        return arg_err(format!("{order:?} is not a permutation of {t} frames"));
    }
    let per = clip.frames.len() / t.max(1);
    let data = clip.frames.data();
    let frames: Vec<f32> = order.iter().flat_map(|&f| data[f * per..(f + 1) * per].iter().copied()).collect();
    let clip = VideoClip { clip_id: clip.clip_id.clone(), frames: Tensor::new(clip.frames.shape().to_vec(), frames)? };
    let truths = truths
        .iter()
        .map(|s| InstanceSequenceTruth {
            class_id: s.class_id,
            boxes: order.iter().map(|&f| s.boxes[f]).collect(),
            masks: order.iter().map(|&f| s.masks[f].clone()).collect(),
            presence: order.iter().map(|&f| s.presence[f]).collect(),
        })
        .collect();
    Ok((clip, truths))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based count of optimizer steps taken so far.
    pub step: usize,
    pub epoch: usize,
    pub video_id: u64,
    pub clip_id: String,
    pub loss: LossBreakdown,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs_completed: usize,
    /// The step callback asked to stop.
    pub stopped_early: bool,
    pub last: Option<StepRecord>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: VisTr,
    pub store: ParamStore<f32>,
    optimizer: AdamW,
    /// Drives clip order and frame shuffles.
    rng: ChaCha8Rng,
    in_backbone: Vec<bool>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        set_deterministic(cfg.train.deterministic);
        let (model, store) = build_model(&cfg.model, cfg.train.seed)?;
        let optimizer = AdamW::new(&store, cfg.train.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(1);
        let in_backbone = store.iter().map(|(_, p)| p.name.starts_with(BACKBONE_PREFIX)).collect();
        Ok(Trainer { cfg, model, store, optimizer, rng, in_backbone, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// `(lr_transformer, lr_backbone)` in effect during `epoch` (0-based).
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let t = &self.cfg.train;
        let f = if epoch >= t.lr_drop_epoch { 0.1 } else { 1.0 };
        (t.lr_transformer * f, t.lr_backbone * f)
    }

    /// Forward, loss, backward and one optimizer update on a single clip.
    /// A non-finite output, loss or gradient aborts before the update; with `dump`
    /// set, the offending batch is described in [`NAN_DUMP_FILE`] there.
    pub fn train_step(&mut self, sample: &Sample, epoch: usize, dump: Option<&Path>) -> Result<StepRecord> {
        let shuffled;
        let (clip, truths) = match self.cfg.train.frame_order {
            FrameOrder::InOrder => (&sample.clip, &sample.truths[..]),
            FrameOrder::Random => {
                let mut order: Vec<usize> = (0..sample.clip.frames.shape()[0]).collect();
                order.shuffle(&mut self.rng);
                shuffled = permute_frames(&sample.clip, &sample.truths, &order)?;
                (&shuffled.0, &shuffled.1[..])
            }
        };
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.model.forward(&mut tape, &bound, &clip.frames)?;
        let (lr, lr_backbone) = self.learning_rates(epoch);
        let mut record = StepRecord {
            step: self.step + 1,
            epoch,
            video_id: sample.video_id,
            clip_id: clip.clip_id.clone(),
            loss: LossBreakdown { total: f64::NAN, class_nll: f64::NAN, box_loss: f64::NAN, mask: f64::NAN, sequences: vec![] },
            lr_transformer: lr,
            lr_backbone,
            grad_norm: f64::NAN,
        };
        let p = &out.preds;
        let finite = [p.class_logits, p.boxes, p.mask_logits]
            .iter()
            .all(|&v| tape.value(v).data().iter().all(|x| x.is_finite()));
        if !finite {
            return Err(self.abort(&record, "output", dump));
        }
        let loss = hungarian_loss(&mut tape, &out.preds, truths, &self.cfg.losses)?;
        record.loss = loss.breakdown;
        if !record.loss.total.is_finite() {
            return Err(self.abort(&record, "loss", dump));
        }
        let grads = tape.backward(loss.total)?;
        let mut grads = self.store.collect_grads(&bound, &grads);
        drop(tape);
        record.grad_norm = clip_grad_norm(&mut grads, self.cfg.train.grad_clip);
        if !record.grad_norm.is_finite() {
            return Err(self.abort(&record, "gradient", dump));
        }
        let lrs: Vec<f64> = self.in_backbone.iter().map(|&b| if b { lr_backbone } else { lr }).collect();
        self.optimizer.step(&mut self.store, &grads, &lrs)?;
        self.step += 1;
        Ok(record)
    }

    fn abort(&self, r: &StepRecord, what: &str, dump: Option<&Path>) -> VisError {
        let mut msg = format!(
            "non-finite {what} at step {} (epoch {}) on batch video_id={} clip={}",
            r.step, r.epoch, r.video_id, r.clip_id
        );
        if let Some(dir) = dump {
            let body = serde_json::json!({
                "step": r.step,
                "epoch": r.epoch,
                "video_id": r.video_id,
                "clip_id": r.clip_id,
                "what": what,
                "loss": {
                    "total": r.loss.total.to_string(),
                    "class": r.loss.class_nll.to_string(),
                    "box": r.loss.box_loss.to_string(),
                    "mask": r.loss.mask.to_string(),
                },
                "grad_norm": r.grad_norm.to_string(),
                "lr": r.lr_transformer,
            });
            let path = dir.join(NAN_DUMP_FILE);
            match fs::write(&path, serde_json::to_vec_pretty(&body).unwrap_or_default()) {
                Ok(()) => msg.push_str(&format!("; details in {}", path.display())),
                Err(e) => msg.push_str(&format!("; writing {} failed: {e}", path.display())),
            }
        }
        VisError::Numerical(msg)
    }

    /// Runs the configured epochs over `samples` in a fresh shuffled order
    /// each epoch. With `out` set, writes the config, a metrics row per
    /// step, a checkpoint after every epoch (and at the end) and a
    /// training-set evaluation per epoch when enabled. `on_step` may stop
    /// training early.
    pub fn fit(
        &mut self,
        samples: &[Sample],
        out: Option<&Path>,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> ControlFlow<()>,
    ) -> Result<TrainSummary> {
        let mut metrics = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join(CONFIG_FILE), self.cfg.to_text())?;
                let mut f = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
                writeln!(f, "{METRICS_HEADER}")?;
                fs::write(dir.join(EPOCH_LOG_FILE), "")?;
                Some(f)
            }
            None => None,
        };
        let max_steps = self.cfg.train.max_steps;
        let mut summary = TrainSummary { steps: 0, epochs_completed: 0, stopped_early: false, last: None };
        'epochs: for epoch in 0..self.cfg.train.epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut self.rng);
            for &i in &order {
                if max_steps > 0 && self.step >= max_steps {
                    break 'epochs;
                }
                let rec = self.train_step(&samples[i], epoch, out)?;
                if let Some(f) = metrics.as_mut() {
                    let l = &rec.loss;
                    writeln!(
                        f,
                        "{},{},{},{},{},{},{},{},{},{}",
                        rec.step, rec.epoch, rec.video_id, l.total, l.class_nll, l.box_loss, l.mask,
                        rec.lr_transformer, rec.lr_backbone, rec.grad_norm
                    )?;
                }
                summary.steps += 1;
                let stop = on_step(self, &rec).is_break();
                summary.last = Some(rec);
                if stop {
                    summary.stopped_early = true;
                    break 'epochs;
                }
            }
            summary.epochs_completed += 1;
            if let Some(dir) = out {
                if let Some(f) = metrics.as_mut() {
                    f.flush()?;
                }
                self.store.save(&dir.join(CHECKPOINT_FILE))?;
                if self.cfg.train.eval_each_epoch && !samples.is_empty() {
                    let report = evaluate_samples(&self.model, &self.store, samples)?;
                    let line = serde_json::json!({ "epoch": epoch, "step": self.step, "report": report });
                    let mut log = fs::OpenOptions::new().append(true).open(dir.join(EPOCH_LOG_FILE))?;
                    writeln!(log, "{line}")?;
                }
            }
        }
        if let Some(dir) = out {
            if let Some(f) = metrics.as_mut() {
                f.flush()?;
            }
            self.store.save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(summary)
    }
}

/// Detached class probabilities and boxes with the `[n, T, h, w]` mask
/// logits of one clip.
pub fn predict(model: &VisTr, store: &ParamStore<f32>, frames: &Tensor<f32>) -> Result<(PredictionValues, Tensor<f32>)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, frames)?;
    Ok((out.preds.values(&tape), tape.value(out.preds.mask_logits).clone()))
}

/// Scored mask sequences for every clip. Slot `j` of a clip yields the
/// masks of its own predictions in every frame, so instances are tracked
/// without any association step.
pub fn infer(model: &VisTr, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<InstanceResult>> {
    let mut results = Vec::new();
    for s in samples {
        let (values, logits) = predict(model, store, &s.clip.frames)?;
        let (h, w) = (s.clip.frames.shape()[2], s.clip.frames.shape()[3]);
        results.extend(postprocess(s.video_id, &values, &logits, h, w)?);
    }
    Ok(results)
}

pub fn video_truths(samples: &[Sample]) -> Vec<VideoTruth> {
    samples.iter().map(|s| VideoTruth { video_id: s.video_id, instances: s.truths.clone() }).collect()
}

/// AP/AR of the model's predictions on `samples` against their own
/// annotations.
pub fn evaluate_samples(model: &VisTr, store: &ParamStore<f32>, samples: &[Sample]) -> Result<EvalReport> {
    let results = infer(model, store, samples)?;
    let categories: Vec<usize> = (0..model.cfg.k).collect();
    evaluate(&results, &video_truths(samples), &categories, &default_thresholds())
}

/// Mean over all annotated instances of the video mask IoU between the
/// instance and the slot the training matcher assigns to it.
pub fn mean_sequence_iou(model: &VisTr, store: &ParamStore<f32>, samples: &[Sample], w: &LossWeights) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in samples {
        let (values, logits) = predict(model, store, &s.clip.frames)?;
        let assignment = hungarian(&matching_cost_matrix(&values, &s.truths, &w.matching())?)?;
        for (i, truth) in s.truths.iter().enumerate() {
            let (h, w) = (truth.masks[0].height, truth.masks[0].width);
            let masks = slot_masks(&logits, assignment.sigma[i], h, w)?;
            sum += sequence_mask_iou(&masks, &truth.masks)?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}
