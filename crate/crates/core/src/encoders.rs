//! ViT-style image encoders and the visual token projector.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::media::Image;
use crate::nn::{Activation, Builder, LayerNorm, Linear, LinearInit, Mlp, TransformerBlock};
use crate::params::ParamId;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub size: usize,
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch > self.size {
            return Err(Error::invalid(format!("patch {} does not fit size {}", self.patch, self.size)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("{} heads do not divide width {}", self.heads, self.dim)));
        }
        Ok(())
    }

    /// Side of the output token grid. A remainder narrower than one patch is
    /// dropped, as with a stride-`p` convolution.
    pub fn grid(&self) -> usize {
        self.size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Non-overlapping `p × p` patches flattened as `(y, x, channel)`, one row
/// per patch in raster order.
pub fn patchify<R: Real>(img: &Image, p: usize) -> Tensor<R> {
    let (gh, gw) = (img.height() / p, img.width() / p);
    let d = img.data();
    let w = img.width();
    Tensor::from_fn(gh * gw, p * p * 3, |r, c| {
        let (py, px) = (r / gw, r % gw);
        let (iy, rem) = (c / (p * 3), c % (p * 3));
        let (ix, ch) = (rem / 3, rem % 3);
        R::of(d[((py * p + iy) * w + px * p + ix) * 3 + ch] as f64)
    })
}

/// Patch embedding, learned positions, pre-norm blocks, final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Vit {
    pub cfg: VitConfig,
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl Vit {
    /// `block_init` selects frozen, adapted or trainable transformer layers;
    /// the patch embedding and positions are always frozen stand-ins.
    pub fn new(b: &mut Builder<'_>, cfg: VitConfig, block_init: LinearInit) -> Result<Self> {
        cfg.validate()?;
        let embed =
            Linear::new(&mut b.sub("patch_embed"), cfg.patch * cfg.patch * 3, cfg.dim, true, LinearInit::FrozenUnit)?;
        let pos = b.normal("pos_embed", &[cfg.tokens(), cfg.dim], 0.5, false);
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&mut b.sub(&format!("blocks.{i}")), cfg.dim, cfg.heads, false, block_init))
            .collect::<Result<Vec<_>>>()?;
        let trainable_norm = !matches!(block_init, LinearInit::Frozen | LinearInit::FrozenUnit);
        let norm = LayerNorm::new(&mut b.sub("norm"), cfg.dim, trainable_norm);
        Ok(Vit { cfg, embed, pos, blocks, norm })
    }

    /// `N × dim` tokens of an `S × S` frame.
    pub fn encode<R: Real>(&self, g: &mut Graph<'_, R>, img: &Image) -> Result<Var> {
        if img.height() != self.cfg.size || img.width() != self.cfg.size {
            return Err(Error::invalid(format!(
                "encoder expects {0}x{0} frames, got {1}x{2}",
                self.cfg.size,
                img.height(),
                img.width()
            )));
        }
        let x = g.constant(patchify(img, self.cfg.patch));
        let x = self.embed.forward(g, x);
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos);
        for blk in &self.blocks {
            x = blk.forward(g, x);
        }
        Ok(self.norm.forward(g, x))
    }
}

/// Two-layer GELU MLP mapping encoder tokens into the fusion width.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub mlp: Mlp,
}

impl Projector {
    pub fn new(b: &mut Builder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Projector { mlp: Mlp::new(b, d_in, d_out, d_out, Activation::Gelu, LinearInit::Trainable)? })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, tokens: Var) -> Result<Var> {
        let d = g.shape(tokens).1;
        if d != self.mlp.fc1.d_in {
            return Err(Error::invalid(format!("projector expects width {}, got {d}", self.mlp.fc1.d_in)));
        }
        Ok(self.mlp.forward(g, tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LoraConfig;
    use crate::params::{seeded_rng, ParamStore};

    fn frame(s: usize) -> Image {
        Image::from_fn(s, s, |y, x| [(x as f32 / s as f32), (y as f32 / s as f32), 0.3])
    }

    #[test]
    fn token_counts() {
        let desk = VitConfig { size: 64, patch: 8, depth: 2, heads: 4, dim: 64 };
        assert_eq!(desk.tokens(), 64);
        let paper = VitConfig { size: 384, patch: 14, depth: 1, heads: 1, dim: 8 };
        assert!(paper.validate().is_ok());
        assert_eq!(paper.tokens(), 729);
        assert!(VitConfig { patch: 400, ..paper }.validate().is_err());
    }

    #[test]
    fn patchify_layout() {
        let img = frame(16);
        let t: Tensor<f32> = patchify(&img, 8);
        assert_eq!(t.shape(), &[4, 192]);
        // patch 1 is the top-right one; its first value is pixel (0, 8) red
        assert_eq!(t.get(1, 0), img.pixel(0, 8)[0]);
        assert_eq!(t.get(2, 3 * 8 + 1), img.pixel(9, 0)[1]);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let cfg = VitConfig { size: 32, patch: 8, depth: 2, heads: 4, dim: 32 };
        let vit = Vit::new(&mut Builder::new(&mut store, &mut rng), cfg, LinearInit::Adapted(LoraConfig::with_rank(4)))
            .unwrap();
        let run = || {
            let mut g = Graph::new(&store);
            let v = vit.encode(&mut g, &frame(32)).unwrap();
            g.value(v).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[16, 32]);
        assert_eq!(a, run());
        let mut g = Graph::new(&store);
        assert!(matches!(vit.encode(&mut g, &frame(24)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn frozen_encoder_gets_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let cfg = VitConfig { size: 16, patch: 4, depth: 1, heads: 2, dim: 16 };
        let vit = Vit::new(&mut Builder::new(&mut store, &mut rng), cfg, LinearInit::Frozen).unwrap();
        let extra = store.add("head", Tensor::full(&[16, 1], 0.1), true);
        let mut g = Graph::new(&store);
        let f = vit.encode(&mut g, &frame(16)).unwrap();
        let h = g.param(extra);
        let y = g.matmul(f, h);
        let l = g.sum(y);
        let grads = g.backward(l).into_param_grads();
        for (id, p) in store.iter() {
            assert_eq!(grads[id.index()].is_some(), p.name == "head", "{}", p.name);
        }
    }

    #[test]
    fn projector_rows_equal_bias_with_zero_weights() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2);
        let proj = Projector::new(&mut Builder::new(&mut store, &mut rng), 8, 12).unwrap();
        store.get_mut(proj.mlp.fc2.w).value = Tensor::zeros(&[12, 12]);
        let beta: Vec<f32> = (0..12).map(|i| i as f32 * 0.1).collect();
        store.get_mut(proj.mlp.fc2.b.unwrap()).value = Tensor::new(&[1, 12], beta.clone()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[5, 8], 0.7));
        let y = proj.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), (5, 12));
        for r in 0..5 {
            assert_eq!(g.value(y).row(r), &beta[..]);
        }
        let bad = g.constant(Tensor::zeros(&[5, 7]));
        assert!(proj.forward(&mut g, bad).is_err());
    }
}
