//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every operation appends a node holding its value and whatever it needs for
//! the backward pass; [`Graph::backward`] then walks the tape once in reverse.
//! Since nodes are only ever appended, tape order is a topological order.
//!
//! Shape mismatches inside the graph are programming errors and panic.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<R> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Log(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<R>, rstd: Vec<R> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<R> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Gather { table: Var, idx: Vec<usize> },
    Pool(Var),
    Reshape(Var),
    Transpose(Var),
    Resize { a: Var, h: usize, w: usize, oh: usize, ow: usize },
    Sum(Var),
    Mean(Var),
    Bce { pred: Var, target: Vec<R>, active: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<R> },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Lower clamp applied to probabilities inside [`Graph::bce`].
pub const BCE_CLAMP: f64 = 1e-7;
const LN_EPS: f64 = 1e-5;

pub struct Graph<'p, R: Real> {
    params: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_vars: Vec<Option<Var>>,
    kinks: Vec<bool>,
}

/// Gradients of a scalar with respect to every leaf that required them.
pub struct Gradients<R> {
    leaf: Vec<Option<Tensor<R>>>,
    param_vars: Vec<Option<Var>>,
}

impl<R: Real> Gradients<R> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<R>> {
        self.leaf.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.param_vars.get(id.index()).copied().flatten().and_then(|v| self.wrt(v))
    }

    /// Moves out every parameter gradient, indexed by parameter id.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<R>>> {
        let vars = core::mem::take(&mut self.param_vars);
        vars.into_iter().map(|v| v.and_then(|v| self.leaf.get_mut(v.0).and_then(|g| g.take()))).collect()
    }
}

/// Per-axis bilinear taps with half-pixel centres: `(i0, i1, frac)`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Contiguous bins `[floor(i·n/m), floor((i+1)·n/m))`.
pub fn pool_bins(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m).map(|i| (i * n / m, (i + 1) * n / m)).collect()
}

fn gelu_parts<R: Real>(x: R) -> (R, R) {
    // tanh approximation
    let c = R::of(0.797_884_560_802_865_4);
    let a = R::of(0.044715);
    let half = R::of(0.5);
    let one = R::one();
    let x2 = x * x;
    let inner = c * (x + a * x2 * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + R::of(3.0) * a * x2);
    (y, dy)
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new(params: &'p ParamStore<R>) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: vec![None; params.len()], kinks: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<R> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Branch taken at every non-differentiable point visited so far
    /// (ReLU sign, |x| sign, max/min winner, BCE clamp). Two evaluations with
    /// equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &[R] {
        self.nodes[v.0].value.data()
    }

    /// Leaf that may receive a gradient.
    pub fn input(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn elementwise(&mut self, a: Var, op: Op<R>, f: impl Fn(R) -> R) -> Var {
        let out = self.nodes[a.0].value.map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<R>, f: impl Fn(R, R) -> R) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let va = self.nodes[a.0].value.view();
        let vb = self.nodes[b.0].value.view();
        let va = if ta { va.t() } else { va };
        let vb = if tb { vb.t() } else { vb };
        assert_eq!(va.cols, vb.rows, "matmul inner dimension");
        let (m, n) = (va.rows, vb.cols);
        let mut out = vec![R::zero(); m * n];
        gemm(va, vb, R::zero(), MatMut::dense(&mut out, m, n));
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul { a, b, ta, tb }, ng)
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let bits: Vec<bool> = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x >= y).collect();
        self.kinks.extend_from_slice(&bits);
        self.binary(a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let bits: Vec<bool> = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x <= y).collect();
        self.kinks.extend_from_slice(&bits);
        self.binary(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        let r = self.val(row);
        assert_eq!(r.len(), n, "add_row width");
        let src = self.val(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(src[i * n..(i + 1) * n].iter().zip(r).map(|(&x, &y)| x + y));
        }
        let ng = self.ng(a) || self.ng(row);
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::AddRow(a, row), ng)
    }

    /// Scales row `i` of `a` by `s[i]` (`s` is `m × 1`).
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (m, n) = self.shape(a);
        let sv = self.val(s);
        assert_eq!(sv.len(), m, "mul_col height");
        let src = self.val(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(src[i * n..(i + 1) * n].iter().map(|&x| x * sv[i]));
        }
        let ng = self.ng(a) || self.ng(s);
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::MulCol(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = R::of(c);
        self.elementwise(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = R::of(c);
        self.elementwise(a, Op::AddScalar(a), |x| x + c)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let s = self.scale(a, -1.0);
        self.add_scalar(s, 1.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Gelu(a), |x| gelu_parts(x).0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let bits: Vec<bool> = self.val(a).iter().map(|&x| x > R::zero()).collect();
        self.kinks.extend_from_slice(&bits);
        self.elementwise(a, Op::Relu(a), |x| if x > R::zero() { x } else { R::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Sin(a), |x| x.sin())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Cos(a), |x| x.cos())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let bits: Vec<bool> = self.val(a).iter().map(|&x| x >= R::zero()).collect();
        self.kinks.extend_from_slice(&bits);
        self.elementwise(a, Op::Abs(a), |x| x.abs())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.elementwise(a, Op::Log(a), |x| x.ln())
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (length = cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.shape(x);
        let g = self.val(gamma).to_vec();
        let b = self.val(beta).to_vec();
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let src = self.val(x);
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        let nf = R::of(n as f64);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().fold(R::zero(), |s, &v| s + v) / nf;
            let var = row.iter().fold(R::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
            let r = R::one() / (var + R::of(LN_EPS)).sqrt();
            rstd.push(r);
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Multi-head scaled dot-product attention. `q` is `Lq × d`, `k`/`v` are
    /// `Lk × d`; with `causal`, query `i` sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (lq, d) = self.shape(q);
        let (lk, dk) = self.shape(k);
        assert_eq!(d, dk, "attention q/k width");
        assert_eq!(self.shape(v), (lk, d), "attention v shape");
        assert_eq!(d % heads, 0, "heads must divide width");
        if causal {
            assert_eq!(lq, lk, "causal attention needs square scores");
        }
        let dh = d / heads;
        let scale = R::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![R::zero(); heads * lq * lk];
        let mut out = vec![R::zero(); lq * d];
        let qd = self.val(q);
        let kd = self.val(k);
        let vd = self.val(v);
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            let qh = MatRef { data: qd, offset: h * dh, rows: lq, cols: dh, rs: d, cs: 1 };
            let kh = MatRef { data: kd, offset: h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
            gemm(qh, kh.t(), R::zero(), MatMut::dense(p, lq, lk));
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                let visible = if causal { i + 1 } else { lk };
                let mut mx = R::neg_infinity();
                for x in row[..visible].iter_mut() {
                    *x *= scale;
                    if *x > mx {
                        mx = *x;
                    }
                }
                let mut sum = R::zero();
                for x in row[..visible].iter_mut() {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                for x in row[..visible].iter_mut() {
                    *x /= sum;
                }
                for x in row[visible..].iter_mut() {
                    *x = R::zero();
                }
            }
            let vh = MatRef { data: vd, offset: h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
            let oh = MatMut { data: &mut out, offset: h * dh, rows: lq, cols: dh, rs: d, cs: 1 };
            gemm(MatRef::dense(p, lq, lk), vh, R::zero(), oh);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(Tensor::new(&[lq, d], out).unwrap(), Op::Attention { q, k, v, heads, probs }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            assert_eq!(pn, n, "concat_rows width");
            out.extend_from_slice(self.val(p));
            m += pm;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, m, "concat_cols height");
                self.shape(p).1
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "slice_rows out of range");
        let out = self.val(a)[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(&[len, n], out).unwrap(), Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.val(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[m, len], out).unwrap(), Op::SliceCols { a, start }, ng)
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (m, n) = self.shape(table);
        let src = self.val(table);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "gather index out of range");
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(table);
        self.push(Tensor::new(&[idx.len(), n], out).unwrap(), Op::Gather { table, idx: idx.to_vec() }, ng)
    }

    /// Adaptive average pooling along rows to `m` rows. Requires `1 <= m <= rows`.
    pub fn pool_rows(&mut self, a: Var, m: usize) -> Var {
        let (rows, n) = self.shape(a);
        assert!(m >= 1 && m <= rows, "pool target out of range");
        let src = self.val(a);
        let mut out = vec![R::zero(); m * n];
        for (i, (s, e)) in pool_bins(rows, m).into_iter().enumerate() {
            let inv = R::one() / R::of((e - s) as f64);
            let dst = &mut out[i * n..(i + 1) * n];
            for r in s..e {
                for (d, &x) in dst.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                    *d += x;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::Pool(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.nodes[a.0].value.clone().reshape(shape).expect("reshape size");
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.transpose();
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    /// Bilinear resize of a `(h·w) × c` grid (row-major cells) to `(oh·ow) × c`.
    pub fn resize_grid(&mut self, a: Var, h: usize, w: usize, oh: usize, ow: usize) -> Var {
        let (rows, c) = self.shape(a);
        assert_eq!(rows, h * w, "resize_grid cell count");
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let src = self.val(a);
        let mut out = vec![R::zero(); oh * ow * c];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let taps = [
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ];
                let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (cell, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let wt = R::of(wt);
                    for (d, &x) in dst.iter_mut().zip(&src[cell * c..(cell + 1) * c]) {
                        *d += wt * x;
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&[oh * ow, c], out).unwrap(), Op::Resize { a, h, w, oh, ow }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).iter().fold(R::zero(), |s, &x| s + x);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.val(a);
        let s = v.iter().fold(R::zero(), |s, &x| s + x) / R::of(v.len() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`.
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, pred: Var, target: &[R]) -> Var {
        let p = self.val(pred);
        assert_eq!(p.len(), target.len(), "bce size");
        let lo = R::of(BCE_CLAMP);
        let hi = R::one() - lo;
        let mut active = Vec::with_capacity(p.len());
        let mut total = R::zero();
        for (&x, &g) in p.iter().zip(target) {
            let inside = x > lo && x < hi;
            active.push(inside);
            let xc = if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            };
            total -= g * xc.ln() + (R::one() - g) * (R::one() - xc).ln();
        }
        let loss = total / R::of(p.len() as f64);
        self.kinks.extend_from_slice(&active);
        let ng = self.ng(pred);
        self.push(Tensor::scalar(loss), Op::Bce { pred, target: target.to_vec(), active }, ng)
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (m, n) = self.shape(logits);
        assert_eq!(targets.len(), m, "one target per row");
        let src = self.val(logits);
        let mut probs = vec![R::zero(); m * n];
        let mut total = R::zero();
        for i in 0..m {
            assert!(targets[i] < n, "target out of vocabulary");
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
            let mut sum = R::zero();
            for (p, &x) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (x - mx).exp();
                sum += *p;
            }
            for p in probs[i * n..(i + 1) * n].iter_mut() {
                *p /= sum;
            }
            total -= row[targets[i]] - mx - sum.ln();
        }
        let loss = total / R::of(m as f64);
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<R> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<R>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads);
        }
        let leaf = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.and_then(|g| {
                    let n = &self.nodes[i];
                    if matches!(n.op, Op::Leaf) && n.needs_grad {
                        Some(Tensor::new(n.value.shape(), g).unwrap())
                    } else {
                        None
                    }
                })
            })
            .collect();
        Gradients { leaf, param_vars: self.param_vars.clone() }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<R>>], v: Var) -> Option<&'g mut Vec<R>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); n]))
    }

    fn backprop(&self, node: &Node<R>, dy: &[R], grads: &mut [Option<Vec<R>>]) {
        let zero = R::zero();
        let one = R::one();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let at = &self.nodes[a.0].value;
                let bt = &self.nodes[b.0].value;
                let (m, n) = (node.value.rows(), node.value.cols());
                let dc = MatRef::dense(dy, m, n);
                let opa = if ta { at.view().t() } else { at.view() };
                let opb = if tb { bt.view().t() } else { bt.view() };
                if let Some(ga) = self.buf(grads, a) {
                    let (ar, ac) = (at.rows(), at.cols());
                    let dst = MatMut::dense(ga, ar, ac);
                    if ta {
                        gemm(opb, dc.t(), one, dst);
                    } else {
                        gemm(dc, opb.t(), one, dst);
                    }
                }
                if let Some(gb) = self.buf(grads, b) {
                    let (br, bc) = (bt.rows(), bt.cols());
                    let dst = MatMut::dense(gb, br, bc);
                    if tb {
                        gemm(dc.t(), opa, one, dst);
                    } else {
                        gemm(opa.t(), dc, one, dst);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(g) = self.buf(grads, a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = self.buf(grads, b) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(g) = self.buf(grads, a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = self.buf(grads, b) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(vb) {
                        *g += d * y;
                    }
                }
                if let Some(g) = self.buf(grads, b) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(va) {
                        *g += d * x;
                    }
                }
            }
            &Op::Div(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(vb) {
                        *g += d / y;
                    }
                }
                if let Some(g) = self.buf(grads, b) {
                    for (((g, &d), &x), &y) in g.iter_mut().zip(dy).zip(va).zip(vb) {
                        *g -= d * x / (y * y);
                    }
                }
            }
            &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (va, vb) = (self.val(a), self.val(b));
                let pick_a: Vec<bool> = va.iter().zip(vb).map(|(x, y)| if is_max { x >= y } else { x <= y }).collect();
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &p) in g.iter_mut().zip(dy).zip(&pick_a) {
                        if p {
                            *g += d;
                        }
                    }
                }
                if let Some(g) = self.buf(grads, b) {
                    for ((g, &d), &p) in g.iter_mut().zip(dy).zip(&pick_a) {
                        if !p {
                            *g += d;
                        }
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(g) = self.buf(grads, a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                let n = node.value.cols();
                if let Some(g) = self.buf(grads, row) {
                    for chunk in dy.chunks(n) {
                        g.iter_mut().zip(chunk).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::MulCol(a, s) => {
                let n = node.value.cols();
                let (va, vs) = (self.val(a), self.val(s));
                if let Some(g) = self.buf(grads, a) {
                    for (i, (gc, dc)) in g.chunks_mut(n).zip(dy.chunks(n)).enumerate() {
                        gc.iter_mut().zip(dc).for_each(|(g, &d)| *g += d * vs[i]);
                    }
                }
                if let Some(g) = self.buf(grads, s) {
                    for (i, (dc, ac)) in dy.chunks(n).zip(va.chunks(n)).enumerate() {
                        g[i] += dc.iter().zip(ac).fold(zero, |acc, (&d, &x)| acc + d * x);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(g) = self.buf(grads, a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * c);
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                if let Some(g) = self.buf(grads, a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            &Op::Gelu(a) => {
                let va = self.val(a);
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(va) {
                        *g += d * gelu_parts(x).1;
                    }
                }
            }
            &Op::Relu(a) => {
                let va = self.val(a);
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(va) {
                        if x > zero {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &s) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * s * (one - s);
                    }
                }
            }
            &Op::Sin(a) => {
                let va = self.val(a);
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(va) {
                        *g += d * x.cos();
                    }
                }
            }
            &Op::Cos(a) => {
                let va = self.val(a);
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(va) {
                        *g -= d * x.sin();
                    }
                }
            }
            &Op::Abs(a) => {
                let va = self.val(a);
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(va) {
                        if x >= zero {
                            *g += d;
                        } else {
                            *g -= d;
                        }
                    }
                }
            }
            &Op::Log(a) => {
                let va = self.val(a);
                if let Some(g) = self.buf(grads, a) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(va) {
                        *g += d / x;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = node.value.cols();
                let gv = self.val(*gamma);
                if let Some(g) = self.buf(grads, *gamma) {
                    for (dc, hc) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += dc[j] * hc[j];
                        }
                    }
                }
                if let Some(g) = self.buf(grads, *beta) {
                    for dc in dy.chunks(n) {
                        g.iter_mut().zip(dc).for_each(|(g, &d)| *g += d);
                    }
                }
                if let Some(g) = self.buf(grads, *x) {
                    let nf = R::of(n as f64);
                    let mut dxhat = vec![zero; n];
                    for (i, (dc, hc)) in dy.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut m1 = zero;
                        let mut m2 = zero;
                        for j in 0..n {
                            dxhat[j] = dc[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hc[j];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        let gr = &mut g[i * n..(i + 1) * n];
                        for j in 0..n {
                            gr[j] += rstd[i] * (dxhat[j] - m1 - hc[j] * m2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (lq, d) = self.shape(q);
                let lk = self.shape(k).0;
                let dh = d / heads;
                let scale = R::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.val(q), self.val(k), self.val(v));
                let mut dp = vec![zero; lq * lk];
                for h in 0..heads {
                    let p = &probs[h * lq * lk..(h + 1) * lq * lk];
                    let doh = MatRef { data: dy, offset: h * dh, rows: lq, cols: dh, rs: d, cs: 1 };
                    let vh = MatRef { data: vd, offset: h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
                    if let Some(gv) = self.buf(grads, v) {
                        let dst = MatMut { data: gv, offset: h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
                        gemm(MatRef::dense(p, lq, lk).t(), doh, one, dst);
                    }
                    if !(self.ng(q) || self.ng(k)) {
                        continue;
                    }
                    gemm(doh, vh.t(), zero, MatMut::dense(&mut dp, lq, lk));
                    for i in 0..lq {
                        let pr = &p[i * lk..(i + 1) * lk];
                        let dr = &mut dp[i * lk..(i + 1) * lk];
                        let dot = pr.iter().zip(dr.iter()).fold(zero, |s, (&a, &b)| s + a * b);
                        for (x, &pp) in dr.iter_mut().zip(pr) {
                            *x = pp * (*x - dot) * scale;
                        }
                    }
                    let ds = MatRef::dense(&dp, lq, lk);
                    if let Some(gq) = self.buf(grads, q) {
                        let kh = MatRef { data: kd, offset: h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
                        let dst = MatMut { data: gq, offset: h * dh, rows: lq, cols: dh, rs: d, cs: 1 };
                        gemm(ds, kh, one, dst);
                    }
                    if let Some(gk) = self.buf(grads, k) {
                        let qh = MatRef { data: qd, offset: h * dh, rows: lq, cols: dh, rs: d, cs: 1 };
                        let dst = MatMut { data: gk, offset: h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
                        gemm(ds.t(), qh, one, dst);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if let Some(g) = self.buf(grads, p) {
                        g.iter_mut().zip(&dy[off..off + len]).for_each(|(g, &d)| *g += d);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let (pm, pw) = self.shape(p);
                    if let Some(g) = self.buf(grads, p) {
                        for i in 0..pm {
                            let src = &dy[i * n + col..i * n + col + pw];
                            g[i * pw..(i + 1) * pw].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                    col += pw;
                }
            }
            &Op::SliceRows { a, start } => {
                let n = node.value.cols();
                if let Some(g) = self.buf(grads, a) {
                    g[start * n..start * n + dy.len()].iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            &Op::SliceCols { a, start } => {
                let (m, len) = (node.value.rows(), node.value.cols());
                let n = self.shape(a).1;
                if let Some(g) = self.buf(grads, a) {
                    for i in 0..m {
                        g[i * n + start..i * n + start + len]
                            .iter_mut()
                            .zip(&dy[i * len..(i + 1) * len])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Gather { table, idx } => {
                let n = node.value.cols();
                if let Some(g) = self.buf(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        g[i * n..(i + 1) * n].iter_mut().zip(&dy[r * n..(r + 1) * n]).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Pool(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let rows = self.shape(a).0;
                if let Some(g) = self.buf(grads, a) {
                    for (i, (s, e)) in pool_bins(rows, m).into_iter().enumerate() {
                        let inv = one / R::of((e - s) as f64);
                        for r in s..e {
                            g[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(&dy[i * n..(i + 1) * n])
                                .for_each(|(g, &d)| *g += d * inv);
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                if let Some(g) = self.buf(grads, a) {
                    // a is n × m
                    for i in 0..m {
                        for j in 0..n {
                            g[j * m + i] += dy[i * n + j];
                        }
                    }
                }
            }
            &Op::Resize { a, h, w, oh, ow } => {
                let c = node.value.cols();
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                if let Some(g) = self.buf(grads, a) {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let taps = [
                                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                                (y0 * w + x1, (1.0 - fy) * fx),
                                (y1 * w + x0, fy * (1.0 - fx)),
                                (y1 * w + x1, fy * fx),
                            ];
                            let src = &dy[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                            for (cell, wt) in taps {
                                if wt == 0.0 {
                                    continue;
                                }
                                let wt = R::of(wt);
                                g[cell * c..(cell + 1) * c].iter_mut().zip(src).for_each(|(g, &d)| *g += wt * d);
                            }
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(g) = self.buf(grads, a) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            &Op::Mean(a) => {
                let n = R::of(self.nodes[a.0].value.numel() as f64);
                if let Some(g) = self.buf(grads, a) {
                    g.iter_mut().for_each(|g| *g += dy[0] / n);
                }
            }
            Op::Bce { pred, target, active } => {
                let p = self.val(*pred);
                let n = R::of(p.len() as f64);
                if let Some(g) = self.buf(grads, *pred) {
                    for (i, gi) in g.iter_mut().enumerate() {
                        if active[i] {
                            let x = p[i];
                            *gi += dy[0] * (x - target[i]) / (x * (one - x)) / n;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = node_cols(&self.nodes[logits.0].value);
                let m = R::of(targets.len() as f64);
                if let Some(g) = self.buf(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { one } else { zero };
                            g[i * n + j] += dy[0] * (probs[i * n + j] - onehot) / m;
                        }
                    }
                }
            }
        }
    }
}

fn node_cols<R: Real>(t: &Tensor<R>) -> usize {
    t.cols()
}
