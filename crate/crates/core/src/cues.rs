//! Foreground token scoring, foreground/background aggregation and the cue,
//! mask-prompt and box-prompt generators.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Builder, Linear, LinearInit, Mlp};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueConfig {
    /// Fusion width.
    pub d_llm: usize,
    /// Segmenter width of the cue tokens.
    pub d_s: usize,
    /// Per-layer pool target of the aggregation.
    pub pool: usize,
    /// Long pool: number of cue tokens.
    pub long: usize,
    /// Short pool feeding the box decoder.
    pub short: usize,
    /// Side of the low-resolution mask prompt.
    pub mask_grid: usize,
    /// Channels per cue token kept by the mask decoder before flattening.
    pub mask_channels: usize,
    /// Hidden width of the scoring network.
    pub score_hidden: usize,
    /// Hidden width of the box decoder.
    pub box_hidden: usize,
}

/// Per-token foreground probability `σ(MLP(f))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringNet {
    pub mlp: Mlp,
}

impl ScoringNet {
    pub fn new(b: &mut Builder<'_>, d: usize, hidden: usize) -> Result<Self> {
        Ok(ScoringNet { mlp: Mlp::new(b, d, hidden, 1, Activation::Gelu, LinearInit::Trainable)? })
    }

    /// `N × 1` scores in `(0, 1)`.
    pub fn score<R: Real>(&self, g: &mut Graph<'_, R>, f: Var) -> Var {
        let z = self.mlp.forward(g, f);
        g.sigmoid(z)
    }
}

/// `f_fg = Σ_l pool(s_l ⊙ f_l)`, `f_bg = Σ_l pool((1 − s_l) ⊙ f_l)`; the
/// background aggregate is skipped when `with_bg` is false.
pub fn aggregate_fg_bg<R: Real>(
    g: &mut Graph<'_, R>,
    layers: &[Var],
    scores: &[Var],
    pool: usize,
    with_bg: bool,
) -> Result<(Var, Option<Var>)> {
    if layers.is_empty() || layers.len() != scores.len() {
        return Err(Error::invalid("one score vector per layer is required"));
    }
    let (n, d) = g.shape(layers[0]);
    if pool == 0 || pool > n {
        return Err(Error::invalid(format!("pool target {pool} outside 1..={n}")));
    }
    let mut fg = Vec::with_capacity(layers.len());
    let mut bg = Vec::with_capacity(layers.len());
    for (&f, &s) in layers.iter().zip(scores) {
        if g.shape(f) != (n, d) || g.shape(s) != (n, 1) {
            return Err(Error::invalid("inconsistent layer or score shapes"));
        }
        let w = g.mul_col(f, s);
        fg.push(g.pool_rows(w, pool));
        if with_bg {
            let inv = g.one_minus(s);
            let w = g.mul_col(f, inv);
            bg.push(g.pool_rows(w, pool));
        }
    }
    let sum = |g: &mut Graph<'_, R>, v: &[Var]| v[1..].iter().fold(v[0], |acc, &x| g.add(acc, x));
    let f_fg = sum(g, &fg);
    let f_bg = with_bg.then(|| sum(g, &bg));
    Ok((f_fg, f_bg))
}

/// Cue tokens and mask-prompt logits of one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchCues {
    /// `C × d_s`.
    pub cue: Var,
    /// `G_m² × 1` logits, row-major.
    pub mask_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CueSet {
    pub fg: BranchCues,
    /// `1 × 4` ordered box in `[0, 1]`.
    pub fg_box: Var,
    pub bg: Option<BranchCues>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CueHead {
    pub cfg: CueConfig,
    pub scoring: ScoringNet,
    pub cue_mlp: Mlp,
    /// Per-token projection to `mask_channels`.
    pub mask_token: Linear,
    /// Flattened `C · mask_channels` to `G_m²` logits.
    pub mask_out: Linear,
    pub box_fc1: Linear,
    pub box_fc2: Linear,
}

impl CueHead {
    pub fn new(b: &mut Builder<'_>, cfg: CueConfig) -> Result<Self> {
        if cfg.long > cfg.pool || cfg.short > cfg.pool || cfg.short == 0 || cfg.mask_channels == 0 {
            return Err(Error::invalid("cue pool sizes must satisfy 1 <= short, long <= pool"));
        }
        let t = LinearInit::Trainable;
        Ok(CueHead {
            cfg,
            scoring: ScoringNet::new(&mut b.sub("scoring"), cfg.d_llm, cfg.score_hidden)?,
            cue_mlp: Mlp::new(&mut b.sub("cue_mlp"), cfg.d_llm, cfg.d_llm, cfg.d_s, Activation::Gelu, t)?,
            mask_token: Linear::new(&mut b.sub("mask_dec.token"), cfg.d_llm, cfg.mask_channels, true, t)?,
            mask_out: Linear::new(
                &mut b.sub("mask_dec.out"),
                cfg.long * cfg.mask_channels,
                cfg.mask_grid * cfg.mask_grid,
                true,
                t,
            )?,
            box_fc1: Linear::new(&mut b.sub("box_dec.fc1"), cfg.short * cfg.d_llm, cfg.box_hidden, true, t)?,
            box_fc2: Linear::new(&mut b.sub("box_dec.fc2"), cfg.box_hidden, 4, true, t)?,
        })
    }

    /// Scores of every extracted layer with the shared scoring net.
    pub fn score_layers<R: Real>(&self, g: &mut Graph<'_, R>, layers: &[Var]) -> Vec<Var> {
        layers.iter().map(|&f| self.scoring.score(g, f)).collect()
    }

    fn branch<R: Real>(&self, g: &mut Graph<'_, R>, agg: Var) -> BranchCues {
        let long = g.pool_rows(agg, self.cfg.long);
        let cue = self.cue_mlp.forward(g, long);
        let per_token = self.mask_token.forward(g, long);
        let flat = g.reshape(per_token, &[1, self.cfg.long * self.cfg.mask_channels]);
        let logits = self.mask_out.forward(g, flat);
        let mask_logits = g.reshape(logits, &[self.cfg.mask_grid * self.cfg.mask_grid, 1]);
        BranchCues { cue, mask_logits }
    }

    /// Cue tokens, mask prompt and box prompt from the foreground aggregate.
    pub fn gen_fg_cues<R: Real>(&self, g: &mut Graph<'_, R>, f_fg: Var) -> (BranchCues, Var) {
        let cues = self.branch(g, f_fg);
        let short = g.pool_rows(f_fg, self.cfg.short);
        let flat = g.reshape(short, &[1, self.cfg.short * self.cfg.d_llm]);
        let h = self.box_fc1.forward(g, flat);
        let h = g.relu(h);
        let z = self.box_fc2.forward(g, h);
        let p = g.sigmoid(z);
        (cues, order_box(g, p))
    }

    /// Same cue and mask weights as the foreground path; no box.
    pub fn gen_bg_cues<R: Real>(&self, g: &mut Graph<'_, R>, f_bg: Var) -> BranchCues {
        self.branch(g, f_bg)
    }

    /// Scoring, aggregation and both cue branches.
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, layers: &[Var], with_bg: bool) -> Result<CueSet> {
        let scores = self.score_layers(g, layers);
        let (f_fg, f_bg) = aggregate_fg_bg(g, layers, &scores, self.cfg.pool, with_bg)?;
        let (fg, fg_box) = self.gen_fg_cues(g, f_fg);
        let bg = f_bg.map(|f| self.gen_bg_cues(g, f));
        Ok(CueSet { fg, fg_box, bg })
    }
}

/// `[min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)]` of a `1 × 4` box.
pub fn order_box<R: Real>(g: &mut Graph<'_, R>, b: Var) -> Var {
    let x1 = g.slice_cols(b, 0, 1);
    let y1 = g.slice_cols(b, 1, 1);
    let x2 = g.slice_cols(b, 2, 1);
    let y2 = g.slice_cols(b, 3, 1);
    let lo_x = g.minimum(x1, x2);
    let lo_y = g.minimum(y1, y2);
    let hi_x = g.maximum(x1, x2);
    let hi_y = g.maximum(y1, y2);
    g.concat_cols(&[lo_x, lo_y, hi_x, hi_y])
}
