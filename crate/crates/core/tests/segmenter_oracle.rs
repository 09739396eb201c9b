use phin_core::autograd::Graph;
use phin_core::config::{AblationMode, RunConfig};
use phin_core::losses::seg_loss;
use phin_core::media::{Image, Mask};
use phin_core::metrics::dice;
use phin_core::model::{Model, Target};
use phin_core::optim::{AdamW, AdamWConfig};
use phin_core::segmenter::BoxPrompt;
use phin_core::synth::{benchmark, gen_sequence};
use phin_core::{ParamStore, Tensor};

const PROMPT_LOGIT: f32 = 4.0;

struct Case {
    features: Tensor<f32>,
    prompt: Tensor<f32>,
    target: Target,
}

fn cases(model: &Model, store: &ParamStore<f32>, frames: &[Image], masks: &[Mask]) -> Vec<Case> {
    let cfg = &model.cfg;
    frames
        .iter()
        .zip(masks)
        .skip(2)
        .map(|(f, m)| {
            let target = Target::from_mask(m, cfg.clue_encoder.size, cfg.cues.mask_grid).unwrap();
            let gm = cfg.cues.mask_grid;
            let logits = target.fg_low.iter().map(|&v| if v > 0.5 { PROMPT_LOGIT } else { -PROMPT_LOGIT }).collect();
            Case {
                features: model.segmenter.encode_cached(store, f).unwrap(),
                prompt: Tensor::new(&[gm * gm, 1], logits).unwrap(),
                target,
            }
        })
        .collect()
}

fn predict(model: &Model, store: &ParamStore<f32>, c: &Case) -> Mask {
    let mut g = Graph::new(store);
    let f = g.constant(c.features.clone());
    let p = g.constant(c.prompt.clone());
    let out = model.segmenter.segment(&mut g, f, p, Some(BoxPrompt::Fixed(c.target.gt_box))).unwrap();
    let s = model.size();
    Mask::new(s, s, g.value(out.mask).data().to_vec()).unwrap()
}

#[test]
fn ground_truth_prompts_reach_high_dice() {
    let cfg = RunConfig::desk();
    let (mut store, model) = Model::new(&cfg.model, AblationMode::Full, 0).unwrap();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in benchmark(0, 16, 8, 64, 8) {
        let q = gen_sequence(&s.scene).unwrap();
        let c = cases(&model, &store, &q.frames, &q.masks);
        if s.split == "train" {
            train.extend(c);
        } else {
            val.extend(c);
        }
    }
    let mut adam = AdamW::new(AdamWConfig::default());
    for _ in 0..2 {
        for c in &train {
            let grads = {
                let mut g = Graph::new(&store);
                let f = g.constant(c.features.clone());
                let p = g.constant(c.prompt.clone());
                let out = model.segmenter.segment(&mut g, f, p, Some(BoxPrompt::Fixed(c.target.gt_box))).unwrap();
                let loss = seg_loss(&mut g, out.mask, &c.target.fg_full).unwrap().loss;
                g.backward(loss).into_param_grads()
            };
            adam.step(&mut store, &grads, 1e-3).unwrap();
        }
    }
    let scores: Vec<f64> = val.iter().map(|c| dice(&c.target.mask, &predict(&model, &store, c)).unwrap()).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    println!("validation mDice with ground-truth prompts: {mean:.4}");
    assert!(mean >= 0.9, "validation mDice {mean:.4} with ground-truth prompts");
}
