//! Vocabulary, sequence layout and the causal fusion transformer that reads
//! visual clue tokens followed by the task prompt and answers with a box.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::media::BoxN;
use crate::nn::{Builder, LayerNorm, Linear, LinearInit, TransformerBlock};
use crate::params::ParamId;
use crate::tensor::{Real, Tensor};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const BOX_OPEN: usize = 4;
pub const BOX_CLOSE: usize = 5;
const CHAR_BASE: usize = 6;
const N_CHARS: usize = 96;
pub const BIN_BASE: usize = CHAR_BASE + N_CHARS;
pub const N_BINS: usize = 1000;
pub const VOCAB: usize = BIN_BASE + N_BINS;

pub const DEFAULT_PROMPT: &str =
    "There are animal categories similar to the background in the image, please locate them.";

/// Printable ASCII `' '..='~'` then `'\n'`.
pub fn char_id(c: char) -> usize {
    match c {
        ' '..='~' => CHAR_BASE + (c as usize - ' ' as usize),
        '\n' => CHAR_BASE + 95,
        _ => UNK,
    }
}

pub fn tokenize(text: &str) -> Vec<usize> {
    text.chars().map(char_id).collect()
}

/// Inverse of [`tokenize`] for character ids; other ids render as
/// `<bos>`, `<c123>` and so on.
pub fn detokenize(ids: &[usize]) -> String {
    let mut s = String::new();
    for &id in ids {
        match id {
            BOS => s.push_str("<bos>"),
            EOS => s.push_str("<eos>"),
            PAD => s.push_str("<pad>"),
            UNK => s.push_str("<unk>"),
            BOX_OPEN => s.push_str("<box>"),
            BOX_CLOSE => s.push_str("</box>"),
            i if i < CHAR_BASE + 95 => s.push((b' ' + (i - CHAR_BASE) as u8) as char),
            i if i < BIN_BASE => s.push('\n'),
            i => s.push_str(&format!("<c{:03}>", i - BIN_BASE)),
        }
    }
    s
}

/// `min(floor(c · 1000), 999)` after clamping to `[0, 1]`.
pub fn coord_bin(c: f32) -> usize {
    ((c.clamp(0.0, 1.0) as f64 * N_BINS as f64).floor() as usize).min(N_BINS - 1)
}

/// Centre of bin `k`: `(k + 0.5) / 1000`.
pub fn bin_value(k: usize) -> f32 {
    ((k as f64 + 0.5) / N_BINS as f64) as f32
}

pub fn box_to_tokens(b: BoxN) -> [usize; 4] {
    b.map(|c| BIN_BASE + coord_bin(c))
}

/// Sorts each coordinate pair and clamps to `[0, 1]`.
pub fn normalize_box(b: BoxN) -> BoxN {
    let c = b.map(|v| v.clamp(0.0, 1.0));
    [c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3])]
}

/// Arg-max over the coordinate bins of one logit row.
pub fn argmax_bin(row: &[f32]) -> usize {
    let bins = &row[BIN_BASE..BIN_BASE + N_BINS];
    let mut best = 0;
    for (k, &v) in bins.iter().enumerate() {
        if v > bins[best] {
            best = k;
        }
    }
    best
}

/// Greedy box decode from `4 × VOCAB` location logits.
pub fn decode_text_box(logits: &Tensor<f32>) -> Result<BoxN> {
    if logits.rows() != 4 || logits.cols() != VOCAB {
        return Err(Error::invalid(format!("location logits must be 4x{VOCAB}, got {:?}", logits.shape())));
    }
    let b: BoxN = core::array::from_fn(|i| bin_value(argmax_bin(logits.row(i))));
    Ok(normalize_box(b))
}

/// The textual form `[0.3345, 0.1245, 0.4535, 0.2545]`.
pub fn format_box(b: &BoxN) -> String {
    format!("[{:.4}, {:.4}, {:.4}, {:.4}]", b[0], b[1], b[2], b[3])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanKind {
    Frame(usize),
    Flow,
    Patch(usize),
    /// Channel-concatenated clue tokens.
    Fused,
    Prompt,
    Answer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

/// Visual spans, then `<bos>` + prompt + `<box>`, then the four answer slots
/// and `</box>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub spans: Vec<Span>,
    pub visual_len: usize,
    /// Token ids from `<bos>` through `<box>`.
    pub prefix_ids: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(visual: &[(SpanKind, usize)], prompt: &str) -> Self {
        let mut spans = Vec::new();
        let mut pos = 0;
        for &(kind, len) in visual {
            spans.push(Span { kind, start: pos, len });
            pos += len;
        }
        let visual_len = pos;
        let mut prefix_ids = Vec::with_capacity(prompt.len() + 2);
        prefix_ids.push(BOS);
        prefix_ids.extend(tokenize(prompt));
        prefix_ids.push(BOX_OPEN);
        spans.push(Span { kind: SpanKind::Prompt, start: pos, len: prefix_ids.len() });
        pos += prefix_ids.len();
        spans.push(Span { kind: SpanKind::Answer, start: pos, len: 4 });
        SequenceLayout { spans, visual_len, prefix_ids }
    }

    pub fn span(&self, kind: SpanKind) -> Option<Span> {
        self.spans.iter().copied().find(|s| s.kind == kind)
    }

    /// Position of the first answer slot.
    pub fn answer_start(&self) -> usize {
        self.visual_len + self.prefix_ids.len()
    }

    /// Full teacher-forced length: visual + prefix + 4 answers + `</box>`.
    pub fn total_len(&self) -> usize {
        self.answer_start() + 5
    }
}

/// Where the visual hidden states are read from in each extracted layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisualStates {
    /// Residual stream after the block.
    Residual,
    /// Residual stream passed through the final layer norm.
    Normed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub visual_states: VisualStates,
}

/// Last-three-layer visual states and answer logits.
#[derive(Clone, Debug)]
pub struct FusedOutputs {
    /// Hidden states of layers `L-2, L-1, L` at visual positions.
    pub layers: [Var; 3],
    /// `4 × VOCAB` logits predicting the four coordinate tokens.
    pub location: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

/// Sinusoidal features of a scalar in `[0, 1]` over geometric frequencies,
/// scaled to unit RMS.
fn ordinal_features(v: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let f = 0.5 * 64f64.powf(j as f64 / (half.max(2) - 1) as f64);
        let a = core::f64::consts::TAU * f * v;
        out.push(a.sin());
        out.push(a.cos());
    }
    out.resize(dim, 0.0);
    out
}

impl Fusion {
    /// Token embeddings and the output head are fully trainable; the coordinate
    /// rows of both start from sinusoidal features of the bin value so that
    /// neighbouring bins begin with similar vectors.
    pub fn new(b: &mut Builder<'_>, cfg: FusionConfig, block_init: LinearInit) -> Result<Self> {
        if cfg.depth < 3 {
            return Err(Error::invalid("the fusion backbone needs at least 3 layers"));
        }
        let mut emb = crate::params::normal::<f32>(b.rng, &[VOCAB, cfg.dim], 0.02);
        let mut head_w = crate::params::normal::<f32>(b.rng, &[VOCAB, cfg.dim], 0.02);
        for k in 0..N_BINS {
            let f = ordinal_features(bin_value(k) as f64, cfg.dim);
            let r = BIN_BASE + k;
            for (j, v) in f.iter().enumerate() {
                emb.data_mut()[r * cfg.dim + j] = (0.02 * v) as f32;
                head_w.data_mut()[r * cfg.dim + j] = (0.05 * v) as f32;
            }
        }
        let embed = b.add("embed", emb, true);
        let pos = b.normal("pos_embed", &[cfg.max_seq, cfg.dim], 0.02, false);
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&mut b.sub(&format!("blocks.{i}")), cfg.dim, cfg.heads, true, block_init))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut b.sub("norm"), cfg.dim, true);
        let mut hb = b.sub("head");
        let w = hb.add("weight", head_w, true);
        let head = Linear { w, b: None, lora: None, d_in: cfg.dim, d_out: VOCAB };
        Ok(Fusion { cfg, embed, pos, blocks, norm, head })
    }

    /// Runs the causal stack over `visual` tokens followed by `text_ids`.
    /// Logits are read at the four positions `answer_start - 1 ..`, i.e. at
    /// `<box>` and the first three answer slots; `text_ids` must reach at
    /// least `<box>`. Missing answer positions yield fewer logit rows.
    pub fn fuse<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        layout: &SequenceLayout,
        visual: Var,
        text_ids: &[usize],
    ) -> Result<FusedOutputs> {
        let (nv, d) = g.shape(visual);
        if nv != layout.visual_len || d != self.cfg.dim {
            return Err(Error::invalid(format!(
                "visual tokens {nv}x{d} do not match layout {}x{}",
                layout.visual_len, self.cfg.dim
            )));
        }
        let len = nv + text_ids.len();
        if len > self.cfg.max_seq {
            return Err(Error::Capacity(format!("sequence of {len} exceeds maximum {}", self.cfg.max_seq)));
        }
        if text_ids.len() < layout.prefix_ids.len() {
            return Err(Error::invalid("text must include the prompt through <box>"));
        }
        if let Some(&bad) = text_ids.iter().find(|&&t| t >= VOCAB) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        let table = g.param(self.embed);
        let text = g.gather_rows(table, text_ids);
        let x = g.concat_rows(&[visual, text]);
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, len);
        let mut x = g.add(x, pos);
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = blk.forward(g, x);
            hidden.push(x);
        }
        let l = hidden.len();
        let mut layers = [hidden[l - 3], hidden[l - 2], hidden[l - 1]];
        for h in layers.iter_mut() {
            let v = g.slice_rows(*h, 0, nv);
            *h = match self.cfg.visual_states {
                VisualStates::Residual => v,
                VisualStates::Normed => self.norm.forward(g, v),
            };
        }
        let first = layout.answer_start() - 1;
        let rows = (len - first).min(4);
        let at = g.slice_rows(x, first, rows);
        let at = self.norm.forward(g, at);
        let location = self.head.forward(g, at);
        Ok(FusedOutputs { layers, location })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LoraConfig;
    use crate::params::{normal, seeded_rng, ParamStore};
    use alloc::vec;

    #[test]
    fn vocabulary_layout() {
        assert_eq!(VOCAB, 1102);
        assert_eq!(char_id(' '), CHAR_BASE);
        assert_eq!(char_id('~'), CHAR_BASE + 94);
        assert_eq!(char_id('é'), UNK);
        let ids = tokenize(DEFAULT_PROMPT);
        assert_eq!(ids.len(), DEFAULT_PROMPT.len());
        assert_eq!(detokenize(&ids), DEFAULT_PROMPT);
        let all: String = (32u8..127).map(|c| c as char).chain(['\n']).collect();
        assert_eq!(detokenize(&tokenize(&all)), all);
        // a fixed sequence: 'T' is ASCII 84
        assert_eq!(ids[0], CHAR_BASE + 84 - 32);
    }

    #[test]
    fn bins_and_boxes() {
        assert_eq!(coord_bin(0.5), 500);
        assert_eq!(coord_bin(1.0), 999);
        assert_eq!(coord_bin(0.0), 0);
        let b = [0.3342, 0.1240, 0.4534, 0.2547];
        let t = box_to_tokens(b);
        for (i, &id) in t.iter().enumerate() {
            assert!((bin_value(id - BIN_BASE) - b[i]).abs() < 1e-3);
        }
    }

    fn peaked(bins: [usize; 4]) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[4, VOCAB]);
        for (i, &k) in bins.iter().enumerate() {
            t.data_mut()[i * VOCAB + BIN_BASE + k] = 5.0;
            // a larger logit on a non-bin token must be ignored
            t.data_mut()[i * VOCAB + 10] = 9.0;
        }
        t
    }

    #[test]
    fn decode_examples() {
        let b = decode_text_box(&peaked([334, 124, 453, 254])).unwrap();
        let want = [0.3345, 0.1245, 0.4535, 0.2545];
        for i in 0..4 {
            assert!((b[i] - want[i]).abs() < 1e-6);
        }
        assert_eq!(format_box(&b), "[0.3345, 0.1245, 0.4535, 0.2545]");
        let b = decode_text_box(&peaked([0, 0, 999, 999])).unwrap();
        assert_eq!(b, [0.0005, 0.0005, 0.9995, 0.9995]);
        let b = decode_text_box(&peaked([700, 100, 200, 600])).unwrap();
        assert_eq!(b, [bin_value(200), bin_value(100), bin_value(700), bin_value(600)]);
        assert!(decode_text_box(&Tensor::zeros(&[3, VOCAB])).is_err());
    }

    fn small() -> (ParamStore<f32>, Fusion) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(5);
        let cfg = FusionConfig { dim: 16, depth: 4, heads: 2, max_seq: 128, visual_states: VisualStates::Residual };
        let f =
            Fusion::new(&mut Builder::new(&mut store, &mut rng), cfg, LinearInit::Adapted(LoraConfig::with_rank(2)))
                .unwrap();
        // give the adapters some effect
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.ends_with("lora_b") {
                let shape = store.value(id).shape().to_vec();
                store.get_mut(id).value = normal(&mut rng, &shape, 0.1);
            }
        }
        (store, f)
    }

    #[test]
    fn causality_of_visual_states() {
        let (store, f) = small();
        let layout = SequenceLayout::new(&[(SpanKind::Frame(0), 6), (SpanKind::Flow, 6)], "find it");
        let vis = normal::<f32>(&mut seeded_rng(9), &[12, 16], 1.0);
        let run = |prompt: &str| {
            let mut g = Graph::new(&store);
            let v = g.constant(vis.clone());
            let mut ids = vec![BOS];
            ids.extend(tokenize(prompt));
            ids.push(BOX_OPEN);
            let out = f.fuse(&mut g, &layout, v, &ids).unwrap();
            out.layers.map(|l| g.value(l).clone())
        };
        let a = run("find it");
        let b = run("FIND IT");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.shape(), &[12, 16]);
            assert!(x.max_abs_diff(y) <= 1e-6);
        }
    }

    #[test]
    fn answer_logits_and_capacity() {
        let (store, f) = small();
        let layout = SequenceLayout::new(&[(SpanKind::Frame(0), 4)], "go");
        assert_eq!(layout.prefix_ids.len(), 4);
        assert_eq!(layout.answer_start(), 8);
        let mut g = Graph::new(&store);
        let v = g.constant(Tensor::zeros(&[4, 16]));
        let mut ids = layout.prefix_ids.clone();
        ids.extend(box_to_tokens([0.1, 0.2, 0.3, 0.4]));
        ids.push(BOX_CLOSE);
        let out = f.fuse(&mut g, &layout, v, &ids).unwrap();
        assert_eq!(g.shape(out.location), (4, VOCAB));
        let out = f.fuse(&mut g, &layout, v, &layout.prefix_ids).unwrap();
        assert_eq!(g.shape(out.location), (1, VOCAB));
        let big = SequenceLayout::new(&[(SpanKind::Frame(0), 120)], "too long");
        let v = g.constant(Tensor::zeros(&[120, 16]));
        assert!(matches!(f.fuse(&mut g, &big, v, &big.prefix_ids), Err(Error::Capacity(_))));
    }

    #[test]
    fn depth_below_three_rejected() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let cfg = FusionConfig { dim: 8, depth: 2, heads: 2, max_seq: 16, visual_states: VisualStates::Normed };
        assert!(Fusion::new(&mut Builder::new(&mut store, &mut rng), cfg, LinearInit::Frozen).is_err());
    }

    #[test]
    fn neighbouring_bins_start_similar() {
        let a = ordinal_features(0.500, 128);
        let b = ordinal_features(0.501, 128);
        let c = ordinal_features(0.900, 128);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        assert!(dot(&a, &b) > dot(&a, &c));
    }
}
