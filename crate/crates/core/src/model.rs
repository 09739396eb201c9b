//! The assembled pipeline: clue encoding, causal fusion, cue generation and
//! promptable segmentation, with the training objective and greedy
//! inference.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::autograd::{Graph, Var};
use crate::config::{AblationMode, ModelConfig};
use crate::cues::{CueHead, CueSet};
use crate::encoders::{Projector, Vit};
use crate::error::{Error, Result};
use crate::fusion::{
    argmax_bin, bin_value, box_to_tokens, normalize_box, Fusion, SequenceLayout, SpanKind, BIN_BASE, N_BINS,
};
use crate::losses::{total_loss, Branch, LossInputs, LossReport, LossWeights};
use crate::media::{anyres_split, assemble_clue_window, BoxN, Image, Mask};
use crate::nn::{Builder, Linear, LinearInit};
use crate::params::{seeded_rng, ParamStore};
use crate::segmenter::{BoxPrompt, Segmenter};
use crate::tensor::{Real, Tensor};

/// A video with one binary mask per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub id: String,
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
}

impl LabeledVideo {
    pub fn new(id: impl Into<String>, frames: Vec<Image>, masks: Vec<Mask>) -> Result<Self> {
        if frames.len() != masks.len() {
            return Err(Error::invalid(format!("{} frames but {} masks", frames.len(), masks.len())));
        }
        for (i, (f, m)) in frames.iter().zip(&masks).enumerate() {
            if f.height() != m.height() || f.width() != m.width() {
                return Err(Error::invalid(format!("frame {} and its mask differ in size", i + 1)));
            }
        }
        Ok(LabeledVideo { id: id.into(), frames, masks })
    }
}

/// Supervision targets of one timestep at model resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub mask: Mask,
    pub gt_box: BoxN,
    pub fg_low: Vec<f32>,
    pub bg_low: Vec<f32>,
    pub fg_full: Vec<f32>,
    pub bg_full: Vec<f32>,
}

impl Target {
    pub fn from_mask(mask: &Mask, size: usize, mask_grid: usize) -> Result<Self> {
        let m = if mask.height() == size && mask.width() == size { mask.clone() } else { mask.resize(size, size) };
        let m = m.binarize(0.5);
        let gt_box = m.bbox().ok_or_else(|| Error::invalid("ground-truth mask is empty"))?;
        let low = m.downsample_binary(mask_grid);
        Ok(Target {
            gt_box,
            fg_low: low.data().to_vec(),
            bg_low: low.complement().data().to_vec(),
            fg_full: m.data().to_vec(),
            bg_full: m.complement().data().to_vec(),
            mask: m,
        })
    }
}

/// Model inputs of one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 1-indexed timestep.
    pub t: usize,
    /// Clue images in span order, each `S × S`.
    pub images: Vec<Image>,
    /// The current frame at `S × S`.
    pub frame: Image,
    pub target: Option<Target>,
}

/// Graph values of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TrainForward {
    pub location: Var,
    pub cues: CueSet,
    pub fg_prompt: Var,
    pub bg_prompt: Option<Var>,
    pub fg_mask: Var,
    pub bg_mask: Option<Var>,
}

/// Result of greedy inference on one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub t: usize,
    pub mask: Mask,
    pub bg_mask: Option<Mask>,
    /// Box decoded from the generated coordinate tokens.
    pub text_box: BoxN,
    /// Box the segmenter embedded as its sparse prompt.
    pub box_prompt: BoxN,
    /// Output of the learned box decoder, unused at inference.
    pub learned_box: BoxN,
    pub bins: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub mode: AblationMode,
    pub layout: SequenceLayout,
    pub clue_encoder: Vit,
    pub projector: Projector,
    /// Feature-axis merge used by the fusion-channel mode.
    pub channel_merge: Option<Linear>,
    pub fusion: Fusion,
    pub cues: CueHead,
    pub segmenter: Segmenter,
}

/// Box from four generated bins: bin centres, ordered; a zero-width side
/// spans its whole bin.
pub fn text_box_from_bins(bins: [usize; 4]) -> BoxN {
    let mut b = normalize_box(bins.map(bin_value));
    let w = 1.0 / N_BINS as f32;
    for (lo, hi) in [(0, 2), (1, 3)] {
        if b[hi] <= b[lo] {
            let k = (b[lo] * N_BINS as f32).floor();
            b[lo] = k * w;
            b[hi] = (k + 1.0) * w;
        }
    }
    b
}

impl Model {
    /// Builds every parameter from `seed`.
    pub fn new(cfg: &ModelConfig, mode: AblationMode, seed: u64) -> Result<(ParamStore<f32>, Model)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let adapted = LinearInit::Adapted(cfg.lora);
        let clue_encoder = Vit::new(&mut b.sub("clue_encoder"), cfg.clue_encoder, adapted)?;
        let projector = Projector::new(&mut b.sub("projector"), cfg.clue_encoder.dim, cfg.fusion.dim)?;
        let n_img = cfg.clue_images(mode);
        let channel_merge = if mode == AblationMode::FusionChannel {
            Some(Linear::new(
                &mut b.sub("channel_merge"),
                n_img * cfg.fusion.dim,
                cfg.fusion.dim,
                true,
                LinearInit::Trainable,
            )?)
        } else {
            None
        };
        let fusion = Fusion::new(&mut b.sub("fusion"), cfg.fusion, adapted)?;
        let cues = CueHead::new(&mut b.sub("cues"), cfg.cues)?;
        let segmenter = Segmenter::new(&mut b.sub("segmenter"), cfg.segmenter, Some(cfg.lora))?;
        let layout = Self::layout_for(cfg, mode);
        if layout.total_len() > cfg.fusion.max_seq {
            return Err(Error::Capacity(format!(
                "sequence of {} exceeds maximum {}",
                layout.total_len(),
                cfg.fusion.max_seq
            )));
        }
        let model =
            Model { cfg: cfg.clone(), mode, layout, clue_encoder, projector, channel_merge, fusion, cues, segmenter };
        Ok((store, model))
    }

    fn layout_for(cfg: &ModelConfig, mode: AblationMode) -> SequenceLayout {
        let n = cfg.clue_encoder.tokens();
        let k = cfg.anyres_grid * cfg.anyres_grid;
        let mut spans = Vec::new();
        match mode {
            AblationMode::FusionChannel => spans.push((SpanKind::Fused, n)),
            AblationMode::ImageOnly | AblationMode::ImageSpatial => spans.push((SpanKind::Frame(2), n)),
            _ => {
                spans.extend((0..3).map(|i| (SpanKind::Frame(i), n)));
                spans.push((SpanKind::Flow, n));
            }
        }
        if matches!(mode, AblationMode::ImageSpatial) {
            spans.extend((0..k).map(|i| (SpanKind::Patch(i), n)));
        } else if mode.uses_temporal() && mode != AblationMode::FusionChannel {
            spans.extend((0..k).map(|i| (SpanKind::Patch(i), n)));
        }
        SequenceLayout::new(&spans, &cfg.prompt)
    }

    pub fn size(&self) -> usize {
        self.cfg.clue_encoder.size
    }

    /// Inputs (and targets when `masks` is given) of 1-indexed timestep `t`.
    pub fn prepare(&self, frames: &[Image], masks: Option<&[Mask]>, t: usize) -> Result<Sample> {
        if t < 3 || t > frames.len() {
            return Err(Error::OutOfRange(format!("timestep {t} outside 3..={}", frames.len())));
        }
        let s = self.size();
        let grid = self.cfg.anyres_grid;
        let current = &frames[t - 1];
        let frame = current.resize(s, s);
        let images = if self.mode.uses_temporal() {
            let bundle = assemble_clue_window(frames, t, s, grid, &self.cfg.flow)?;
            let mut v: Vec<Image> = bundle.frames.into_iter().collect();
            v.push(bundle.flow_image);
            v.extend(bundle.patches);
            v
        } else {
            let mut v = Vec::from([frame.clone()]);
            if self.mode.uses_spatial() {
                v.extend(anyres_split(current, grid)?.iter().map(|p| p.resize(s, s)));
            }
            v
        };
        let target = match masks {
            Some(m) => Some(Target::from_mask(&m[t - 1], s, self.cfg.cues.mask_grid)?),
            None => None,
        };
        Ok(Sample { t, images, frame, target })
    }

    /// Projected visual tokens in span order.
    pub fn visual_tokens<R: Real>(&self, g: &mut Graph<'_, R>, images: &[Image]) -> Result<Var> {
        let expected = self.cfg.clue_images(self.mode);
        if images.len() != expected {
            return Err(Error::invalid(format!("{} clue images, expected {expected}", images.len())));
        }
        let mut parts = Vec::with_capacity(images.len());
        for img in images {
            let e = self.clue_encoder.encode(g, img)?;
            parts.push(self.projector.forward(g, e)?);
        }
        Ok(match &self.channel_merge {
            Some(m) => {
                let cat = g.concat_cols(&parts);
                m.forward(g, cat)
            }
            None => g.concat_rows(&parts),
        })
    }

    /// Frozen segmenter features of the current frame.
    pub fn seg_features<R: Real>(&self, store: &ParamStore<R>, sample: &Sample) -> Result<Tensor<R>> {
        self.segmenter.encode_cached(store, &sample.frame)
    }

    /// Teacher-forced pass with the learned box prompt.
    pub fn forward_train<R: Real>(&self, g: &mut Graph<'_, R>, sample: &Sample, features: Var) -> Result<TrainForward> {
        let target = sample.target.as_ref().ok_or_else(|| Error::invalid("training needs a target"))?;
        let vis = self.visual_tokens(g, &sample.images)?;
        let mut ids = self.layout.prefix_ids.clone();
        ids.extend(box_to_tokens(target.gt_box));
        let fused = self.fusion.fuse(g, &self.layout, vis, &ids)?;
        let cues = self.cues.forward(g, &fused.layers, self.mode.uses_background())?;
        let inj = self.segmenter.inject_cue(g, features, cues.fg.cue)?;
        let fg = self.segmenter.segment(g, inj, cues.fg.mask_logits, Some(BoxPrompt::Var(cues.fg_box)))?;
        let fg_prompt = g.sigmoid(cues.fg.mask_logits);
        let (bg_mask, bg_prompt) = match cues.bg {
            Some(bg) => {
                let inj = self.segmenter.inject_cue(g, features, bg.cue)?;
                let out = self.segmenter.segment(g, inj, bg.mask_logits, None)?;
                (Some(out.mask), Some(g.sigmoid(bg.mask_logits)))
            }
            None => (None, None),
        };
        Ok(TrainForward { location: fused.location, cues, fg_prompt, bg_prompt, fg_mask: fg.mask, bg_mask })
    }

    /// Total objective of one sample.
    pub fn loss<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        sample: &Sample,
        features: Var,
        weights: LossWeights,
    ) -> Result<(Var, LossReport)> {
        let f = self.forward_train(g, sample, features)?;
        let t = sample.target.as_ref().ok_or_else(|| Error::invalid("training needs a target"))?;
        let cast = |v: &[f32]| v.iter().map(|&x| R::of(x as f64)).collect::<Vec<R>>();
        let (fg_low, bg_low, fg_full, bg_full) = (cast(&t.fg_low), cast(&t.bg_low), cast(&t.fg_full), cast(&t.bg_full));
        let targets = box_to_tokens(t.gt_box);
        let inputs = LossInputs {
            gt_box: t.gt_box,
            p_box: f.cues.fg_box,
            prompt_fg: Branch { pred: f.fg_prompt, gt: &fg_low },
            prompt_bg: f.bg_prompt.map(|p| Branch { pred: p, gt: &bg_low[..] }),
            location_logits: f.location,
            bin_targets: &targets,
            mask_fg: Branch { pred: f.fg_mask, gt: &fg_full },
            mask_bg: f.bg_mask.map(|p| Branch { pred: p, gt: &bg_full[..] }),
        };
        total_loss(g, &inputs, weights)
    }

    /// Greedy decoding of the four coordinate tokens, then segmentation with
    /// the decoded box as the segmenter's box prompt.
    pub fn infer(
        &self,
        store: &ParamStore<f32>,
        sample: &Sample,
        features: Option<&Tensor<f32>>,
    ) -> Result<FramePrediction> {
        let mut g = Graph::new(store);
        let feats = match features {
            Some(f) => g.constant(f.clone()),
            None => self.segmenter.encode(&mut g, &sample.frame)?,
        };
        let vis = self.visual_tokens(&mut g, &sample.images)?;
        let mut ids = self.layout.prefix_ids.clone();
        let mut bins = [0usize; 4];
        let mut fused = None;
        for (k, bin) in bins.iter_mut().enumerate() {
            let out = self.fusion.fuse(&mut g, &self.layout, vis, &ids)?;
            *bin = argmax_bin(g.value(out.location).row(k));
            ids.push(BIN_BASE + *bin);
            fused = Some(out);
        }
        let fused = fused.expect("four decoding steps");
        let text_box = text_box_from_bins(bins);
        let cues = self.cues.forward(&mut g, &fused.layers, self.mode.uses_background())?;
        let inj = self.segmenter.inject_cue(&mut g, feats, cues.fg.cue)?;
        let fg = self.segmenter.segment(&mut g, inj, cues.fg.mask_logits, Some(BoxPrompt::Fixed(text_box)))?;
        let box_prompt = fg.box_used.expect("a box prompt was supplied");
        let s = self.size();
        let mask = Mask::new(s, s, g.value(fg.mask).data().to_vec())?;
        let bg_mask = match cues.bg {
            Some(bg) => {
                let inj = self.segmenter.inject_cue(&mut g, feats, bg.cue)?;
                let out = self.segmenter.segment(&mut g, inj, bg.mask_logits, None)?;
                Some(Mask::new(s, s, g.value(out.mask).data().to_vec())?)
            }
            None => None,
        };
        let lb = g.value(cues.fg_box).data();
        let learned_box = [lb[0], lb[1], lb[2], lb[3]];
        Ok(FramePrediction { t: sample.t, mask, bg_mask, text_box, box_prompt, learned_box, bins })
    }

    /// Predictions for timesteps `3..=T`, resized back to the frame size.
    pub fn infer_video(&self, store: &ParamStore<f32>, frames: &[Image]) -> Result<Vec<FramePrediction>> {
        if frames.len() < 3 {
            return Err(Error::invalid(format!("video has {} frames; at least 3 are required", frames.len())));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        (3..=frames.len())
            .map(|t| {
                let sample = self.prepare(frames, None, t)?;
                let mut p = self.infer(store, &sample, None)?;
                if (h, w) != (self.size(), self.size()) {
                    p.mask = p.mask.resize(h, w);
                    p.bg_mask = p.bg_mask.map(|m| m.resize(h, w));
                }
                Ok(p)
            })
            .collect()
    }
}
