//! Layers shared by the encoders, the fusion backbone and the segmenter.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, uniform, ParamId, ParamStore, Rng};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the Gaussian LoRA `A` init.
pub const LORA_A_STD: f64 = 0.02;

/// Low-rank adapter settings for a group of linear layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scale numerator; the adapter output is multiplied by `alpha / rank`.
    pub alpha: f64,
}

impl LoraConfig {
    /// `alpha = 2 r`.
    pub fn with_rank(rank: usize) -> Self {
        LoraConfig { rank, alpha: 2.0 * rank as f64 }
    }
}

/// Parameter registration helper carrying a name prefix and the RNG.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut Rng) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { String::from(name) } else { format!("{}.{}", self.prefix, name) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            String::from(leaf)
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn add(&mut self, leaf: &str, value: Tensor<f32>, trainable: bool) -> ParamId {
        let name = self.name(leaf);
        self.store.add(&name, value, trainable)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64, trainable: bool) -> ParamId {
        let t = normal(self.rng, shape, std);
        self.add(leaf, t, trainable)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize], trainable: bool) -> ParamId {
        self.add(leaf, Tensor::zeros(shape), trainable)
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize], trainable: bool) -> ParamId {
        self.add(leaf, Tensor::full(shape, 1.0), trainable)
    }
}

/// How a linear layer's base weights are initialised and trained.
#[derive(Clone, Copy, Debug)]
pub enum LinearInit {
    /// Fully trainable, Kaiming-uniform.
    Trainable,
    /// Frozen Gaussian base (std 0.02) with a LoRA adapter.
    Adapted(LoraConfig),
    /// Frozen Gaussian base (std 0.02) without adapter.
    Frozen,
    /// Fully trainable Gaussian (std 0.02).
    TrainableSmall,
    /// Frozen Gaussian with variance `1 / d_in`, for stand-in input layers
    /// that must carry their input forward at unit scale.
    FrozenUnit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// `y = x Wᵀ + b + (α/r)·(x Aᵀ) Bᵀ`, with `W` stored `d_out × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub lora: Option<LoraAdapter>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, d_in: usize, d_out: usize, bias: bool, init: LinearInit) -> Result<Self> {
        let (w, trainable_base, lora) = match init {
            LinearInit::Trainable => {
                let bound = 1.0 / (d_in as f64).sqrt();
                let t = uniform(b.rng, &[d_out, d_in], bound);
                (b.add("weight", t, true), true, None)
            }
            LinearInit::TrainableSmall => (b.normal("weight", &[d_out, d_in], 0.02, true), true, None),
            LinearInit::Frozen => (b.normal("weight", &[d_out, d_in], 0.02, false), false, None),
            LinearInit::FrozenUnit => {
                let std = 1.0 / (d_in as f64).sqrt();
                (b.normal("weight", &[d_out, d_in], std, false), false, None)
            }
            LinearInit::Adapted(cfg) => (b.normal("weight", &[d_out, d_in], 0.02, false), false, Some(cfg)),
        };
        let bias = bias.then(|| b.zeros("bias", &[1, d_out], trainable_base));
        let lora = match lora {
            Some(cfg) => Some(LoraAdapter::new(b, d_in, d_out, cfg)?),
            None => None,
        };
        Ok(Linear { w, b: bias, lora, d_in, d_out })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Var {
        assert_eq!(g.shape(x).1, self.d_in, "linear input width");
        let w = g.param(self.w);
        let mut y = g.matmul_nt(x, w);
        if let Some(b) = self.b {
            let bv = g.param(b);
            y = g.add_row(y, bv);
        }
        if let Some(l) = &self.lora {
            let a = g.param(l.a);
            let bb = g.param(l.b);
            let h = g.matmul_nt(x, a);
            let d = g.matmul_nt(h, bb);
            let d = g.scale(d, l.scale);
            y = g.add(y, d);
        }
        y
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = alloc::vec![self.w];
        v.extend(self.b);
        if let Some(l) = &self.lora {
            v.push(l.a);
            v.push(l.b);
        }
        v
    }
}

impl LoraAdapter {
    pub fn new(b: &mut Builder<'_>, d_in: usize, d_out: usize, cfg: LoraConfig) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::invalid("LoRA rank must be positive"));
        }
        let a = b.normal("lora_a", &[cfg.rank, d_in], LORA_A_STD, true);
        let bb = b.zeros("lora_b", &[d_out, cfg.rank], true);
        Ok(LoraAdapter { a, b: bb, rank: cfg.rank, scale: cfg.alpha / cfg.rank as f64 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, dim: usize, trainable: bool) -> Self {
        LayerNorm { gamma: b.ones("gamma", &[1, dim], trainable), beta: b.zeros("beta", &[1, dim], trainable) }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Two linear layers with an activation between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        b: &mut Builder<'_>,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
        init: LinearInit,
    ) -> Result<Self> {
        let fc1 = Linear::new(&mut b.sub("fc1"), d_in, hidden, true, init)?;
        let fc2 = Linear::new(&mut b.sub("fc2"), hidden, d_out, true, init)?;
        Ok(Mlp { fc1, fc2, act })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = match self.act {
            Activation::Gelu => g.gelu(h),
            Activation::Relu => g.relu(h),
        };
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub causal: bool,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder<'_>, dim: usize, heads: usize, causal: bool, init: LinearInit) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{heads} heads do not divide width {dim}")));
        }
        let ln_trainable = !matches!(init, LinearInit::Frozen | LinearInit::FrozenUnit);
        Ok(TransformerBlock {
            ln1: LayerNorm::new(&mut b.sub("ln1"), dim, ln_trainable),
            qkv: Linear::new(&mut b.sub("qkv"), dim, 3 * dim, true, init)?,
            proj: Linear::new(&mut b.sub("proj"), dim, dim, true, init)?,
            ln2: LayerNorm::new(&mut b.sub("ln2"), dim, ln_trainable),
            mlp: Mlp::new(&mut b.sub("mlp"), dim, 4 * dim, dim, Activation::Gelu, init)?,
            heads,
            causal,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Var {
        let d = g.shape(x).1;
        let h = self.ln1.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let a = g.attention(q, k, v, self.heads, self.causal);
        let a = self.proj.forward(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}
