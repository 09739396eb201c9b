//! Promptable mask decoder: cue injection, box and mask prompt embedding,
//! two-way attention and per-pixel mask prediction.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{Vit, VitConfig};
use crate::error::{Error, Result};
use crate::media::{BoxN, Image};
use crate::nn::{Activation, Builder, LayerNorm, Linear, LinearInit, LoraConfig, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub encoder: VitConfig,
    pub dec_heads: usize,
    pub dec_blocks: usize,
    pub mlp_hidden: usize,
    /// Side of the incoming mask prompt.
    pub mask_grid: usize,
}

impl SegmenterConfig {
    /// Side of the image feature grid.
    pub fn grid(&self) -> usize {
        self.encoder.grid()
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }
}

/// Separate q/k/v/out projections so queries and keys may differ in length.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder<'_>, dim: usize, heads: usize, init: LinearInit) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Attention {
            q: Linear::new(&mut b.sub("q"), dim, dim, true, init)?,
            k: Linear::new(&mut b.sub("k"), dim, dim, true, init)?,
            v: Linear::new(&mut b.sub("v"), dim, dim, true, init)?,
            o: Linear::new(&mut b.sub("o"), dim, dim, true, init)?,
            heads,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, q: Var, k: Var, v: Var) -> Var {
        let q = self.q.forward(g, q);
        let k = self.k.forward(g, k);
        let v = self.v.forward(g, v);
        let a = g.attention(q, k, v, self.heads, false);
        self.o.forward(g, a)
    }
}

/// Token self-attention, token→image attention, token MLP, image→token
/// attention; each followed by a residual add and a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub t2i: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub ln3: LayerNorm,
    pub i2t: Attention,
    pub ln4: LayerNorm,
}

impl TwoWayBlock {
    fn new(b: &mut Builder<'_>, dim: usize, heads: usize, hidden: usize, init: LinearInit) -> Result<Self> {
        Ok(TwoWayBlock {
            self_attn: Attention::new(&mut b.sub("self_attn"), dim, heads, init)?,
            ln1: LayerNorm::new(&mut b.sub("ln1"), dim, true),
            t2i: Attention::new(&mut b.sub("t2i"), dim, heads, init)?,
            ln2: LayerNorm::new(&mut b.sub("ln2"), dim, true),
            mlp: Mlp::new(&mut b.sub("mlp"), dim, hidden, dim, Activation::Relu, init)?,
            ln3: LayerNorm::new(&mut b.sub("ln3"), dim, true),
            i2t: Attention::new(&mut b.sub("i2t"), dim, heads, init)?,
            ln4: LayerNorm::new(&mut b.sub("ln4"), dim, true),
        })
    }

    fn forward<R: Real>(&self, g: &mut Graph<'_, R>, q: Var, k: Var, q_pe: Var, k_pe: Var) -> (Var, Var) {
        let qp = g.add(q, q_pe);
        let a = self.self_attn.forward(g, qp, qp, q);
        let q = g.add(q, a);
        let q = self.ln1.forward(g, q);

        let qp = g.add(q, q_pe);
        let kp = g.add(k, k_pe);
        let a = self.t2i.forward(g, qp, kp, k);
        let q = g.add(q, a);
        let q = self.ln2.forward(g, q);

        let m = self.mlp.forward(g, q);
        let q = g.add(q, m);
        let q = self.ln3.forward(g, q);

        let qp = g.add(q, q_pe);
        let a = self.i2t.forward(g, kp, qp, q);
        let k = g.add(k, a);
        let k = self.ln4.forward(g, k);
        (q, k)
    }
}

/// Box prompt as a graph value (learned) or a fixed box (decoded text).
#[derive(Clone, Copy, Debug)]
pub enum BoxPrompt {
    /// Ordered learned box; a collapsed side (`x1 == x2`) is accepted.
    Var(Var),
    /// Must satisfy `x1 < x2` and `y1 < y2`.
    Fixed(BoxN),
}

/// Predicted probabilities and the box values actually embedded as sparse
/// tokens.
#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    /// `S² × 1`, row-major.
    pub mask: Var,
    pub box_used: Option<BoxN>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub cfg: SegmenterConfig,
    pub encoder: Vit,
    /// Frozen Gaussian matrix of the random Fourier positional encoding.
    pub pe_gauss: ParamId,
    pub corner_embed: ParamId,
    pub mask_proj: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    pub final_ln: LayerNorm,
    pub hyper: Mlp,
    pub pixel: Linear,
}

impl Segmenter {
    /// The image encoder is frozen; attention and MLP layers of the decoder
    /// carry LoRA adapters when `lora` is given, otherwise they train fully.
    pub fn new(b: &mut Builder<'_>, cfg: SegmenterConfig, lora: Option<LoraConfig>) -> Result<Self> {
        let d = cfg.dim();
        if !d.is_multiple_of(2) {
            return Err(Error::invalid("segmenter width must be even"));
        }
        let encoder = Vit::new(&mut b.sub("image_encoder"), cfg.encoder, LinearInit::Frozen)?;
        let init = lora.map_or(LinearInit::Trainable, LinearInit::Adapted);
        let mut pb = b.sub("prompt");
        let pe_gauss = pb.normal("pe_gauss", &[2, d / 2], 1.0, false);
        let corner_embed = pb.normal("corner_embed", &[2, d], 0.02, true);
        let mask_proj = Linear::new(&mut pb.sub("mask_proj"), 1, d, true, LinearInit::Trainable)?;
        let mut db = b.sub("decoder");
        let mask_token = db.normal("mask_token", &[1, d], 0.02, true);
        let blocks = (0..cfg.dec_blocks)
            .map(|i| TwoWayBlock::new(&mut db.sub(&format!("blocks.{i}")), d, cfg.dec_heads, cfg.mlp_hidden, init))
            .collect::<Result<Vec<_>>>()?;
        let final_attn = Attention::new(&mut db.sub("final_attn"), d, cfg.dec_heads, init)?;
        let final_ln = LayerNorm::new(&mut db.sub("final_ln"), d, true);
        let hyper = Mlp::new(&mut db.sub("hyper"), d, d, d, Activation::Relu, LinearInit::Trainable)?;
        let pixel = Linear::new(&mut db.sub("pixel"), d, 1, true, LinearInit::Trainable)?;
        Ok(Segmenter {
            cfg,
            encoder,
            pe_gauss,
            corner_embed,
            mask_proj,
            mask_token,
            blocks,
            final_attn,
            final_ln,
            hyper,
            pixel,
        })
    }

    /// `G² × d_s` image features in the graph.
    pub fn encode<R: Real>(&self, g: &mut Graph<'_, R>, frame: &Image) -> Result<Var> {
        self.encoder.encode(g, frame)
    }

    /// Image features computed outside any training graph; the encoder is
    /// frozen so they can be cached per frame.
    pub fn encode_cached<R: Real>(&self, store: &ParamStore<R>, frame: &Image) -> Result<Tensor<R>> {
        let mut g = Graph::new(store);
        let v = self.encoder.encode(&mut g, frame)?;
        Ok(g.value(v).clone())
    }

    /// Adds the square cue grid, bilinearly resized to the feature grid.
    pub fn inject_cue<R: Real>(&self, g: &mut Graph<'_, R>, features: Var, cue: Var) -> Result<Var> {
        inject_cue(g, features, cue, self.cfg.grid())
    }

    /// Random Fourier encoding of `n × 2` coordinates in `[0, 1]`.
    fn pe<R: Real>(&self, g: &mut Graph<'_, R>, coords: Var) -> Var {
        let c = g.scale(coords, 2.0);
        let c = g.add_scalar(c, -1.0);
        let gauss = g.param(self.pe_gauss);
        let proj = g.matmul(c, gauss);
        let proj = g.scale(proj, core::f64::consts::TAU);
        let s = g.sin(proj);
        let co = g.cos(proj);
        g.concat_cols(&[s, co])
    }

    fn grid_pe<R: Real>(&self, g: &mut Graph<'_, R>) -> Var {
        let n = self.cfg.grid();
        let t = Tensor::from_fn(n * n, 2, |i, c| {
            let v = if c == 0 { i % n } else { i / n };
            R::of((v as f64 + 0.5) / n as f64)
        });
        let coords = g.constant(t);
        self.pe(g, coords)
    }

    /// Predicts an `S² × 1` probability map from injected features, the
    /// mask-prompt logits and an optional box prompt.
    pub fn segment<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        features: Var,
        mask_logits: Var,
        boxp: Option<BoxPrompt>,
    ) -> Result<SegOutput> {
        let n = self.cfg.grid();
        let d = self.cfg.dim();
        if g.shape(features) != (n * n, d) {
            return Err(Error::invalid(format!("features must be {}x{d}", n * n)));
        }
        let gm = self.cfg.mask_grid;
        if g.shape(mask_logits) != (gm * gm, 1) {
            return Err(Error::invalid(format!("mask prompt must be {}x1", gm * gm)));
        }
        let mp = g.sigmoid(mask_logits);
        let mp = if gm == n { mp } else { g.resize_grid(mp, gm, gm, n, n) };
        let dense = self.mask_proj.forward(g, mp);
        let image = g.add(features, dense);
        let image_pe = self.grid_pe(g);

        let mask_tok = g.param(self.mask_token);
        let mut box_used = None;
        let tokens = match boxp {
            None => mask_tok,
            Some(bp) => {
                let (bv, strict) = match bp {
                    BoxPrompt::Var(v) => (v, false),
                    BoxPrompt::Fixed(b) => {
                        (g.constant(Tensor::new(&[1, 4], b.iter().map(|&x| R::of(x as f64)).collect())?), true)
                    }
                };
                if g.shape(bv) != (1, 4) {
                    return Err(Error::invalid("box prompt must be 1x4"));
                }
                let bd = g.value(bv).data();
                let ordered = if strict { bd[0] < bd[2] && bd[1] < bd[3] } else { bd[0] <= bd[2] && bd[1] <= bd[3] };
                if !ordered {
                    return Err(Error::invalid(format!(
                        "malformed box [{:?}, {:?}, {:?}, {:?}]",
                        bd[0], bd[1], bd[2], bd[3]
                    )));
                }
                box_used = Some(core::array::from_fn(|i| bd[i].as_f64() as f32));
                let corners = g.reshape(bv, &[2, 2]);
                let pe = self.pe(g, corners);
                let ce = g.param(self.corner_embed);
                let sparse = g.add(pe, ce);
                g.concat_rows(&[mask_tok, sparse])
            }
        };
        let mut q = tokens;
        let mut k = image;
        for blk in &self.blocks {
            (q, k) = blk.forward(g, q, k, tokens, image_pe);
        }
        let qp = g.add(q, tokens);
        let kp = g.add(k, image_pe);
        let a = self.final_attn.forward(g, qp, kp, k);
        let q = g.add(q, a);
        let q = self.final_ln.forward(g, q);

        let out_tok = g.slice_rows(q, 0, 1);
        let h = self.hyper.forward(g, out_tok);
        let hyper_logits = g.matmul_nt(k, h);
        let direct = self.pixel.forward(g, k);
        let logits = g.add(hyper_logits, direct);
        let s = self.cfg.encoder.size;
        let up = g.resize_grid(logits, n, n, s, s);
        Ok(SegOutput { mask: g.sigmoid(up), box_used })
    }
}

/// Cue tokens `C × d` reshaped to a `√C × √C` grid, resized to `grid × grid`
/// and added to `features`.
pub fn inject_cue<R: Real>(g: &mut Graph<'_, R>, features: Var, cue: Var, grid: usize) -> Result<Var> {
    let (c, d) = g.shape(cue);
    let gc = c.isqrt();
    if gc * gc != c || c == 0 {
        return Err(Error::invalid(format!("{c} cue tokens do not form a square grid")));
    }
    if g.shape(features) != (grid * grid, d) {
        return Err(Error::invalid("feature grid does not match cue width"));
    }
    let up = if gc == grid { cue } else { g.resize_grid(cue, gc, gc, grid, grid) };
    Ok(g.add(features, up))
}
