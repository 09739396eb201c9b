//! Training loop, evaluation and the run log.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, sample_coords, GradcheckReport};
use crate::losses::LossReport;
use crate::metrics::{evaluate_video, MetricReport};
use crate::model::{LabeledVideo, Model, Sample};
use crate::optim::{AdamW, AdamWConfig, GradAccumulator, LrSchedule};
use crate::params::{normal, seeded_rng, ParamStore};
use crate::tensor::Tensor;

/// One optimizer step: the learning rate used and the mean loss report
/// over its micro-batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub micro_batches: usize,
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub metrics: Vec<SplitReport>,
}

impl RunLog {
    pub fn total_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.total).collect()
    }
}

/// A sample with its cached frozen segmenter features.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub video: usize,
    pub sample: Sample,
    pub features: Tensor<f32>,
}

/// Every timestep `3..=T` of every video.
pub fn prepare_samples(model: &Model, store: &ParamStore<f32>, videos: &[LabeledVideo]) -> Result<Vec<Prepared>> {
    let mut out = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        for t in 3..=v.frames.len() {
            let sample = model.prepare(&v.frames, Some(&v.masks), t)?;
            let features = model.seg_features(store, &sample)?;
            out.push(Prepared { video: vi, sample, features });
        }
    }
    Ok(out)
}

pub struct TrainOutput {
    pub store: ParamStore<f32>,
    pub model: Model,
    pub log: RunLog,
}

fn add_report(acc: &mut LossReport, r: &LossReport) {
    acc.bce += r.bce;
    acc.dice += r.dice;
    acc.l1 += r.l1;
    acc.giou_loss += r.giou_loss;
    acc.ce += r.ce;
    acc.seg += r.seg;
    acc.r#box += r.r#box;
    acc.prompt += r.prompt;
    acc.text += r.text;
    acc.mask += r.mask;
    acc.total += r.total;
}

fn scale_report(r: &mut LossReport, k: f64) {
    for v in [
        &mut r.bce,
        &mut r.dice,
        &mut r.l1,
        &mut r.giou_loss,
        &mut r.ce,
        &mut r.seg,
        &mut r.r#box,
        &mut r.prompt,
        &mut r.text,
        &mut r.mask,
        &mut r.total,
    ] {
        *v *= k;
    }
}

/// Loss and parameter gradients of one prepared sample.
pub fn sample_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    p: &Prepared,
    cfg: &RunConfig,
) -> Result<(LossReport, Vec<Option<Tensor<f32>>>)> {
    let mut g = Graph::new(store);
    let f = g.constant(p.features.clone());
    let (loss, report) = model.loss(&mut g, &p.sample, f, cfg.loss_weights)?;
    if !report.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss at t={}: {report:?}", p.sample.t)));
    }
    Ok((report, g.backward(loss).into_param_grads()))
}

/// Trains a fresh model on `videos`, calling `on_step` after every
/// optimizer step.
pub fn run_training(
    cfg: &RunConfig,
    videos: &[LabeledVideo],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let (mut store, model) = Model::new(&cfg.model, cfg.mode, cfg.seed)?;
    let data = prepare_samples(&model, &store, videos)?;
    if data.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let micro_total = data.len() * cfg.epochs;
    let total_steps = micro_total.div_ceil(cfg.grad_accum);
    let sched = LrSchedule::new(cfg.optim.lr_peak, total_steps, cfg.optim.warmup_frac);
    let mut adam = AdamW::new(AdamWConfig {
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
        weight_decay: cfg.optim.weight_decay,
    });
    let mut accum = GradAccumulator::new();
    let mut rng = seeded_rng(cfg.seed ^ 0x00DD_BA11);
    let mut log = RunLog::default();
    let mut step_loss = LossReport::default();
    let mut done = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order {
            let p = &data[i];
            let (report, grads) = sample_gradients(&model, &store, p, cfg).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!(
                    "step {} epoch {epoch} video {}: {m}",
                    log.steps.len(),
                    videos[p.video].id
                )),
                other => other,
            })?;
            add_report(&mut step_loss, &report);
            accum.add(grads);
            done += 1;
            if accum.count() == cfg.grad_accum || done == micro_total {
                let step = log.steps.len();
                let lr = sched.lr(step);
                let n = accum.count();
                let mean = accum.take_mean(store.len());
                adam.step(&mut store, &mean, lr)?;
                let mut loss = core::mem::take(&mut step_loss);
                scale_report(&mut loss, 1.0 / n as f64);
                let rec = StepRecord { step, epoch, lr, micro_batches: n, loss };
                on_step(&rec);
                log.steps.push(rec);
            }
        }
    }
    Ok(TrainOutput { store, model, log })
}

/// Mean report over videos and the per-video reports.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    videos: &[LabeledVideo],
) -> Result<(MetricReport, Vec<(String, MetricReport)>)> {
    let mut per = Vec::with_capacity(videos.len());
    for v in videos {
        let preds = model.infer_video(store, &v.frames)?;
        let masks: Vec<_> = preds.into_iter().map(|p| p.mask).collect();
        per.push((v.id.clone(), evaluate_video(&v.masks[2..], &masks)?));
    }
    let reports: Vec<MetricReport> = per.iter().map(|(_, r)| *r).collect();
    Ok((MetricReport::mean(&reports)?, per))
}

/// Standard deviation given to zero-initialised adapter factors before a
/// gradient check, so every adapter coordinate has a live gradient.
pub const GRADCHECK_LORA_STD: f64 = 0.02;

/// Resampling rounds used to replace coordinates skipped at kinks.
pub const GRADCHECK_ROUNDS: usize = 4;

/// Central-difference check of the full training objective of timestep `t`
/// of `video`, in `f64`, until `n_coords` trainable coordinates are checked.
/// Coordinates skipped at kinks are replaced by fresh draws.
pub fn check_model_gradients(
    cfg: &RunConfig,
    video: &LabeledVideo,
    t: usize,
    n_coords: usize,
    fd_step: f64,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    let (store, model) = Model::new(&cfg.model, cfg.mode, cfg.seed)?;
    let mut params = store.cast::<f64>();
    let mut rng = seeded_rng(cfg.seed ^ 0x6EAD_C4EC);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if params.get(id).name.ends_with("lora_b") {
            let shape = params.value(id).shape().to_vec();
            params.get_mut(id).value = normal(&mut rng, &shape, GRADCHECK_LORA_STD);
        }
    }
    let sample = model.prepare(&video.frames, Some(&video.masks), t)?;
    let features = model.seg_features(&params, &sample)?;
    let weights = cfg.loss_weights;
    let build = |g: &mut Graph<'_, f64>| {
        let f = g.constant(features.clone());
        Ok(model.loss(g, &sample, f, weights)?.0)
    };
    let mut total = GradcheckReport { max_rel_error: 0.0, checked: 0, skipped: 0, worst: None };
    for _ in 0..GRADCHECK_ROUNDS {
        if total.checked >= n_coords {
            break;
        }
        let coords = sample_coords(&params, n_coords - total.checked, &mut rng);
        let r = gradcheck(&mut params, build, &coords, fd_step)?;
        if r.max_rel_error > total.max_rel_error || total.worst.is_none() {
            total.max_rel_error = total.max_rel_error.max(r.max_rel_error);
            total.worst = r.worst;
        }
        total.checked += r.checked;
        total.skipped += r.skipped;
    }
    Ok(total)
}
