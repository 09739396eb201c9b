//! Acceptance criteria 1 to 11. Runs without the libtest harness so every
//! criterion prints exactly one `criterion N: PASS|FAIL` line, in order and
//! without contention for the runtime budgets.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use phin_core::autograd::Graph;
use phin_core::checkpoint::{encode, named_tensors};
use phin_core::config::{AblationMode, RunConfig};
use phin_core::cues::aggregate_fg_bg;
use phin_core::fusion::{decode_text_box, tokenize, BIN_BASE, VOCAB};
use phin_core::losses::{box_loss, seg_loss, text_loss};
use phin_core::media::Mask;
use phin_core::metrics::{dice, e_measure, iou, mae, s_measure, weighted_f};
use phin_core::model::{text_box_from_bins, LabeledVideo, Model};
use phin_core::nn::{Linear, LoraAdapter};
use phin_core::params::{normal, seeded_rng};
use phin_core::synth::{benchmark, gen_sequence, SceneSpec};
use phin_core::tensor::Tensor;
use phin_core::train::{check_model_gradients, evaluate, run_training};
use phin_core::ParamStore;
use rand::Rng as _;

type Outcome = (bool, String);

fn scalar(g: &Graph<'_, f64>, v: phin_core::Var) -> f64 {
    g.value(v).data()[0]
}

fn desk_benchmark() -> (Vec<LabeledVideo>, Vec<LabeledVideo>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in benchmark(0, 40, 8, 64, 8) {
        let q = gen_sequence(&s.scene).unwrap();
        let v = LabeledVideo::new(s.id.clone(), q.frames, q.masks).unwrap();
        if s.split == "train" {
            train.push(v);
        } else {
            val.push(v);
        }
    }
    (train, val)
}

fn desk_video(seed: u64, frames: usize) -> LabeledVideo {
    let mut spec = SceneSpec::desk(seed);
    spec.frames = frames;
    let q = gen_sequence(&spec).unwrap();
    LabeledVideo::new(format!("video-{seed}"), q.frames, q.masks).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let cfg = RunConfig::desk();
    let video = desk_video(7, 3);
    let start = Instant::now();
    let r = check_model_gradients(&cfg, &video, 3, 200, 1e-4).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = r.checked >= 200 && r.max_rel_error <= 1e-3 && secs <= 120.0;
    (
        pass,
        format!("max rel error {:.3e} over {} coords ({} skipped), {secs:.1}s", r.max_rel_error, r.checked, r.skipped),
    )
}

fn decomposition_identity() -> Outcome {
    let store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..40);
        let d = rng.random_range(1..12);
        let p = rng.random_range(1..=n);
        let mut g = Graph::new(&store);
        let layers: Vec<_> = (0..3).map(|_| g.constant(normal(&mut rng, &[n, d], 2.0))).collect();
        let w1 = g.constant(normal(&mut rng, &[d, 5], 1.0));
        let w2 = g.constant(normal(&mut rng, &[5, 1], 1.0));
        let scores: Vec<_> = layers
            .iter()
            .map(|&f| {
                let h = g.matmul(f, w1);
                let h = g.gelu(h);
                let z = g.matmul(h, w2);
                g.sigmoid(z)
            })
            .collect();
        let (fg, bg) = aggregate_fg_bg(&mut g, &layers, &scores, p, true).unwrap();
        let sum = g.add(fg, bg.unwrap());
        let pooled: Vec<_> = layers.iter().map(|&l| g.pool_rows(l, p)).collect();
        let a = g.add(pooled[0], pooled[1]);
        let total = g.add(a, pooled[2]);
        worst = worst.max(g.value(sum).max_abs_diff(g.value(total)));
    }
    (worst <= 1e-5, format!("max deviation {worst:.2e} over 100 trials"))
}

fn lora_identity() -> Outcome {
    let cfg = RunConfig::desk();
    let (store, _) = Model::new(&cfg.model, AblationMode::Full, 0).unwrap();
    let lora = cfg.model.lora;
    let mut rng = seeded_rng(3);
    let mut layers = 0;
    let mut worst = 0.0f64;
    for (id, p) in store.iter() {
        let Some(prefix) = p.name.strip_suffix("lora_a") else { continue };
        let w = store.find(&format!("{prefix}weight")).unwrap();
        let b = store.find(&format!("{prefix}bias"));
        let bb = store.find(&format!("{prefix}lora_b")).unwrap();
        let (d_out, d_in) = (store.value(w).shape()[0], store.value(w).shape()[1]);
        let adapter = LoraAdapter { a: id, b: bb, rank: lora.rank, scale: lora.alpha / lora.rank as f64 };
        let adapted = Linear { w, b, lora: Some(adapter), d_in, d_out };
        let base = Linear { lora: None, ..adapted.clone() };
        let mut g = Graph::new(&store);
        let x = g.constant(normal(&mut rng, &[5, d_in], 1.0));
        let y = adapted.forward(&mut g, x);
        let y0 = base.forward(&mut g, x);
        worst = worst.max(g.value(y).max_abs_diff(g.value(y0)));
        layers += 1;
    }
    (layers > 0 && worst <= 1e-6, format!("{layers} adapted layers, max deviation {worst:.2e}"))
}

fn loss_oracles() -> Outcome {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let pred = g.constant(Tensor::full(&[2, 2], 0.5));
    let seg = seg_loss(&mut g, pred, &[1.0, 1.0, 0.0, 0.0]).unwrap();
    let (bce, dice) = (scalar(&g, seg.bce), scalar(&g, seg.dice));
    let pb = g.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, 0.5, 0.5]).unwrap());
    let bl = box_loss(&mut g, [0.0, 0.0, 1.0, 1.0], pb).unwrap();
    let bl = scalar(&g, bl.loss);
    let logits = g.constant(Tensor::zeros(&[4, VOCAB]));
    let ce = text_loss(&mut g, logits, &[1000, 1001, 1002, 1003]).unwrap();
    let ce = scalar(&g, ce);
    let errs = [(bce - 2f64.ln()).abs(), (dice - 0.4).abs(), (bl - 1.0).abs(), (ce - 1102f64.ln()).abs()];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    (worst <= 1e-4, format!("bce {bce:.6} dice {dice:.6} box {bl:.6} ce {ce:.6}, max error {worst:.2e}"))
}

fn metric_oracle() -> Outcome {
    let mut rng = seeded_rng(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let gt = Mask::from_fn(8, 8, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let pr = Mask::from_fn(8, 8, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let (mut tp, mut fp, mut fneg, mut abs) = (0usize, 0usize, 0usize, 0usize);
        for y in 0..8 {
            for x in 0..8 {
                let (a, b) = (gt.get(y, x) == 1.0, pr.get(y, x) == 1.0);
                tp += (a && b) as usize;
                fp += (!a && b) as usize;
                fneg += (a && !b) as usize;
                abs += (a != b) as usize;
            }
        }
        let union = tp + fp + fneg;
        let want_dice = if union == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
        let want_iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
        let want_mae = abs as f64 / 64.0;
        if dice(&gt, &pr).unwrap() != want_dice
            || iou(&gt, &pr).unwrap() != want_iou
            || mae(&gt, &pr).unwrap() != want_mae
        {
            mismatches += 1;
        }
    }
    let mut frames: Vec<Mask> =
        benchmark(1, 4, 0, 64, 3).iter().map(|s| gen_sequence(&s.scene).unwrap().masks.swap_remove(1)).collect();
    frames.push(Mask::from_fn(
        8,
        8,
        |y, x| if (y as f32 - 3.2).powi(2) + (x as f32 - 4.1).powi(2) < 6.5 { 1.0 } else { 0.0 },
    ));
    frames.push(Mask::from_fn(64, 64, |_, x| if x < 32 { 1.0 } else { 0.0 }));
    let (mut perfect_min, mut complement_max) = (f64::INFINITY, 0.0f64);
    for gt in &frames {
        let comp = gt.complement();
        for f in [s_measure, weighted_f, e_measure] {
            perfect_min = perfect_min.min(f(gt, gt).unwrap());
            complement_max = complement_max.max(f(gt, &comp).unwrap());
        }
    }
    let pass = mismatches == 0 && (perfect_min - 1.0).abs() <= 1e-3 && complement_max < 0.5;
    (
        pass,
        format!(
            "{mismatches}/1000 pixel-metric mismatches; S/F/E perfect min {perfect_min:.4}, complement max {complement_max:.4}"
        ),
    )
}

fn causality() -> Outcome {
    let cfg = RunConfig::desk();
    let (mut store, model) = Model::new(&cfg.model, AblationMode::Full, 0).unwrap();
    let mut rng = seeded_rng(6);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).name.ends_with("lora_b") {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = normal(&mut rng, &shape, 0.05);
        }
    }
    let video = desk_video(8, 3);
    let sample = model.prepare(&video.frames, None, 3).unwrap();
    let run = |ids: &[usize]| {
        let mut g = Graph::new(&store);
        let vis = model.visual_tokens(&mut g, &sample.images).unwrap();
        let out = model.fusion.fuse(&mut g, &model.layout, vis, ids).unwrap();
        out.layers.map(|l| g.value(l).clone())
    };
    let prefix = model.layout.prefix_ids.clone();
    let n = prefix.len();
    let mut altered = prefix.clone();
    altered[1..n - 1].reverse();
    altered[1] = tokenize("?")[0];
    let mut answered = prefix.clone();
    answered.extend([BIN_BASE + 10, BIN_BASE + 20, BIN_BASE + 900]);
    let a = run(&prefix);
    let b = run(&altered);
    let c = run(&answered);
    let worst = a.iter().zip(&b).chain(a.iter().zip(&c)).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
    (worst <= 1e-6, format!("max visual-state change {worst:.2e}"))
}

struct TrendRuns {
    full: f64,
    image_only: f64,
    image_spatial: f64,
    no_background: f64,
    full_secs: f64,
}

fn train_eval(mode: AblationMode, train: &[LabeledVideo], val: &[LabeledVideo]) -> (f64, f64) {
    let cfg = RunConfig { mode, ..RunConfig::desk() };
    let start = Instant::now();
    let out = run_training(&cfg, train, |_| {}).unwrap();
    let (mean, _) = evaluate(&out.model, &out.store, val).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("  {mode}: val mDice {:.4} ({secs:.0}s)", mean.m_dice);
    (mean.m_dice, secs)
}

fn trend_runs() -> TrendRuns {
    let (train, val) = desk_benchmark();
    let (full, full_secs) = train_eval(AblationMode::Full, &train, &val);
    let (image_only, _) = train_eval(AblationMode::ImageOnly, &train, &val);
    let (image_spatial, _) = train_eval(AblationMode::ImageSpatial, &train, &val);
    let (no_background, _) = train_eval(AblationMode::NoBackground, &train, &val);
    TrendRuns { full, image_only, image_spatial, no_background, full_secs }
}

fn desk_learning(r: &TrendRuns) -> Outcome {
    let pass = r.full >= 0.70 && r.full_secs <= 1800.0;
    (pass, format!("val mDice {:.4} (target 0.70) in {:.0}s", r.full, r.full_secs))
}

fn clue_trend(r: &TrendRuns) -> Outcome {
    let gap = r.full - r.image_only;
    let (lo, hi) = (r.full.min(r.image_only), r.full.max(r.image_only));
    let between = (lo - 0.01..=hi + 0.01).contains(&r.image_spatial);
    (
        gap >= 0.03 && between,
        format!(
            "full {:.4}, image-only {:.4} (gap {gap:.4}, need 0.03), image+spatial {:.4}",
            r.full, r.image_only, r.image_spatial
        ),
    )
}

fn background_trend(r: &TrendRuns) -> Outcome {
    let gain = r.full - r.no_background;
    (gain >= 0.02, format!("full {:.4}, no-background {:.4} (gain {gain:.4}, need 0.02)", r.full, r.no_background))
}

fn inference_contract() -> Outcome {
    let cfg = RunConfig::desk();
    let (store, model) = Model::new(&cfg.model, AblationMode::Full, 4).unwrap();
    let video = desk_video(9, 10);
    let preds = model.infer_video(&store, &video.frames).unwrap();
    let s = cfg.model.clue_encoder.size;
    let shapes = preds.iter().all(|p| p.mask.height() == s && p.mask.width() == s);
    let range = preds.iter().all(|p| p.mask.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let steps = preds.iter().map(|p| p.t).eq(3..=10);
    let boxes = preds.iter().all(|p| p.box_prompt == p.text_box && p.text_box == text_box_from_bins(p.bins));
    let logits = Tensor::from_fn(4, VOCAB, |r, c| if c == BIN_BASE + 100 + r * 250 { 1.0f32 } else { 0.0 });
    let decoded = decode_text_box(&logits).unwrap();
    let short = model.infer_video(&store, &video.frames[..2]).is_err();
    let pass = preds.len() == 8 && shapes && range && steps && boxes && short && decoded[0] < decoded[2];
    (
        pass,
        format!(
            "{} masks for 10 frames, shapes {shapes}, range {range}, box prompt == text box {boxes}, T<3 rejected {short}",
            preds.len()
        ),
    )
}

fn determinism() -> Outcome {
    let (train, _) = desk_benchmark();
    let cfg = RunConfig::desk();
    let a = run_training(&cfg, &train[..4], |_| {}).unwrap();
    let b = run_training(&cfg, &train[..4], |_| {}).unwrap();
    let ca = encode(&named_tensors(&a.store)).unwrap();
    let cb = encode(&named_tensors(&b.store)).unwrap();
    let same_log = a.log.total_losses() == b.log.total_losses() && a.log == b.log;
    (
        ca == cb && same_log,
        format!(
            "{} checkpoint bytes identical {}, {} logged steps identical {same_log}",
            ca.len(),
            ca == cb,
            a.log.steps.len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut record = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {verdict} {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
        if !pass {
            failed.push(n);
        }
    };
    record(1, "gradient fidelity", &gradient_fidelity);
    record(2, "fg/bg decomposition", &decomposition_identity);
    record(3, "LoRA identity at init", &lora_identity);
    record(4, "loss oracles", &loss_oracles);
    record(5, "metric oracle", &metric_oracle);
    record(6, "causality", &causality);
    let runs = catch_unwind(trend_runs).ok();
    let missing = || (false, "training runs failed".to_string());
    record(7, "desk-scale learning", &|| runs.as_ref().map_or_else(missing, desk_learning));
    record(8, "clue ablation trend", &|| runs.as_ref().map_or_else(missing, clue_trend));
    record(9, "background branch trend", &|| runs.as_ref().map_or_else(missing, background_trend));
    record(10, "inference contract", &inference_contract);
    record(11, "determinism", &determinism);
    println!(
        "acceptance: {} of 11 passed in {:.0?}",
        11 - failed.len(),
        Duration::from_secs(start.elapsed().as_secs())
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
