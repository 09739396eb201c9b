//! Segmentation, box, prompt, text and mask losses and their weighted total.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::media::BoxN;
use crate::tensor::{Real, Tensor};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct SegTerms {
    pub loss: Var,
    pub bce: Var,
    pub dice: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoxTerms {
    pub loss: Var,
    pub l1: Var,
    pub giou_loss: Var,
}

/// Mean BCE plus the smoothed Dice loss of probabilities `pred` against
/// binary `gt`.
pub fn seg_loss<R: Real>(g: &mut Graph<'_, R>, pred: Var, gt: &[R]) -> Result<SegTerms> {
    let (r, c) = g.shape(pred);
    if r * c != gt.len() {
        return Err(Error::invalid(format!("prediction has {} values, target {}", r * c, gt.len())));
    }
    let bce = g.bce(pred, gt);
    let gt_sum: f64 = gt.iter().map(|v| v.as_f64()).sum();
    let target = g.constant(Tensor::new(&[r, c], gt.to_vec())?);
    let pg = g.mul(pred, target);
    let inter = g.sum(pg);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let ps = g.sum(pred);
    let den = g.add_scalar(ps, gt_sum + DICE_EPS);
    let ratio = g.div(num, den);
    let dice = g.one_minus(ratio);
    let loss = g.add(bce, dice);
    Ok(SegTerms { loss, bce, dice })
}

fn box_const<R: Real>(g: &mut Graph<'_, R>, b: BoxN) -> Result<Var> {
    Ok(g.constant(Tensor::new(&[1, 4], b.iter().map(|&v| R::of(v as f64)).collect())?))
}

/// Mean L1 over the four coordinates plus `1 − GIoU`.
pub fn box_loss<R: Real>(g: &mut Graph<'_, R>, gt: BoxN, pred: Var) -> Result<BoxTerms> {
    if g.shape(pred) != (1, 4) {
        return Err(Error::invalid("predicted box must be 1x4"));
    }
    if !(gt[0] < gt[2] && gt[1] < gt[3]) {
        return Err(Error::invalid(format!("ground-truth box {gt:?} has no area")));
    }
    let t = box_const(g, gt)?;
    let d = g.sub(pred, t);
    let ad = g.abs(d);
    let l1 = g.mean(ad);

    let col = |g: &mut Graph<'_, R>, v: Var, i: usize| g.slice_cols(v, i, 1);
    let (px1, py1, px2, py2) = (col(g, pred, 0), col(g, pred, 1), col(g, pred, 2), col(g, pred, 3));
    let (gx1, gy1, gx2, gy2) = (col(g, t, 0), col(g, t, 1), col(g, t, 2), col(g, t, 3));

    let ix1 = g.maximum(px1, gx1);
    let iy1 = g.maximum(py1, gy1);
    let ix2 = g.minimum(px2, gx2);
    let iy2 = g.minimum(py2, gy2);
    let iw = g.sub(ix2, ix1);
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);

    let pw = g.sub(px2, px1);
    let pw = g.relu(pw);
    let ph = g.sub(py2, py1);
    let ph = g.relu(ph);
    let area_p = g.mul(pw, ph);
    let area_g = ((gt[2] - gt[0]) * (gt[3] - gt[1])) as f64;
    let union = g.add_scalar(area_p, area_g);
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);

    let cx1 = g.minimum(px1, gx1);
    let cy1 = g.minimum(py1, gy1);
    let cx2 = g.maximum(px2, gx2);
    let cy2 = g.maximum(py2, gy2);
    let cw = g.sub(cx2, cx1);
    let ch = g.sub(cy2, cy1);
    let area_c = g.mul(cw, ch);
    let gap = g.sub(area_c, union);
    let penalty = g.div(gap, area_c);
    let giou = g.sub(iou, penalty);
    let giou_loss = g.one_minus(giou);
    let loss = g.add(l1, giou_loss);
    Ok(BoxTerms { loss, l1, giou_loss })
}

/// Mean cross-entropy of the coordinate-bin targets, one logits row each.
pub fn text_loss<R: Real>(g: &mut Graph<'_, R>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (m, v) = g.shape(logits);
    if m != targets.len() {
        return Err(Error::invalid(format!("{m} logit rows for {} targets", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::invalid(format!("target id {t} outside vocabulary of {v}")));
    }
    Ok(g.cross_entropy(logits, targets))
}

/// Per-term weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub prompt: f64,
    pub text: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { prompt: 1.0, text: 1.0, mask: 1.0 }
    }
}

/// A probability map and its binary target.
#[derive(Clone, Copy, Debug)]
pub struct Branch<'a, R> {
    pub pred: Var,
    pub gt: &'a [R],
}

/// Everything the total objective consumes. Background branches are absent
/// when the background path is disabled.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a, R> {
    pub gt_box: BoxN,
    pub p_box: Var,
    pub prompt_fg: Branch<'a, R>,
    pub prompt_bg: Option<Branch<'a, R>>,
    pub location_logits: Var,
    pub bin_targets: &'a [usize],
    pub mask_fg: Branch<'a, R>,
    pub mask_bg: Option<Branch<'a, R>>,
}

/// Itemized loss values. `bce` and `dice` sum over every segmentation term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bce: f64,
    pub dice: f64,
    pub l1: f64,
    pub giou_loss: f64,
    pub ce: f64,
    pub seg: f64,
    pub r#box: f64,
    pub prompt: f64,
    pub text: f64,
    pub mask: f64,
    pub total: f64,
}

struct SegAccum<R> {
    bce: Vec<Var>,
    dice: Vec<Var>,
    _r: core::marker::PhantomData<R>,
}

impl<R: Real> SegAccum<R> {
    fn seg(&mut self, g: &mut Graph<'_, R>, b: Branch<'_, R>) -> Result<Var> {
        let t = seg_loss(g, b.pred, b.gt)?;
        self.bce.push(t.bce);
        self.dice.push(t.dice);
        Ok(t.loss)
    }

    fn total(&self, g: &Graph<'_, R>, vs: &[Var]) -> f64 {
        vs.iter().map(|&v| scalar(g, v)).sum()
    }
}

fn scalar<R: Real>(g: &Graph<'_, R>, v: Var) -> f64 {
    g.value(v).data()[0].as_f64()
}

fn sum_vars<R: Real>(g: &mut Graph<'_, R>, vs: &[Var]) -> Var {
    let mut it = vs.iter().copied();
    let first = it.next().expect("at least one term");
    it.fold(first, |a, b| g.add(a, b))
}

/// `box + seg(fg) [+ seg(bg)]` over the low-resolution prompt masks.
pub fn prompt_loss<R: Real>(
    g: &mut Graph<'_, R>,
    gt_box: BoxN,
    p_box: Var,
    fg: Branch<'_, R>,
    bg: Option<Branch<'_, R>>,
) -> Result<Var> {
    let b = box_loss(g, gt_box, p_box)?;
    let mut terms = Vec::from([b.loss, seg_loss(g, fg.pred, fg.gt)?.loss]);
    if let Some(bg) = bg {
        terms.push(seg_loss(g, bg.pred, bg.gt)?.loss);
    }
    Ok(sum_vars(g, &terms))
}

/// `seg(fg) [+ seg(bg)]` over the full-resolution masks.
pub fn mask_loss<R: Real>(g: &mut Graph<'_, R>, fg: Branch<'_, R>, bg: Option<Branch<'_, R>>) -> Result<Var> {
    let mut terms = Vec::from([seg_loss(g, fg.pred, fg.gt)?.loss]);
    if let Some(bg) = bg {
        terms.push(seg_loss(g, bg.pred, bg.gt)?.loss);
    }
    Ok(sum_vars(g, &terms))
}

/// Weighted sum of prompt, text and mask losses with an itemized report.
pub fn total_loss<R: Real>(g: &mut Graph<'_, R>, x: &LossInputs<'_, R>, w: LossWeights) -> Result<(Var, LossReport)> {
    let mut acc = SegAccum { bce: Vec::new(), dice: Vec::new(), _r: core::marker::PhantomData };
    let b = box_loss(g, x.gt_box, x.p_box)?;
    let mut prompt_terms = Vec::from([b.loss, acc.seg(g, x.prompt_fg)?]);
    if let Some(bg) = x.prompt_bg {
        prompt_terms.push(acc.seg(g, bg)?);
    }
    let prompt = sum_vars(g, &prompt_terms);
    let text = text_loss(g, x.location_logits, x.bin_targets)?;
    let mut mask_terms = Vec::from([acc.seg(g, x.mask_fg)?]);
    if let Some(bg) = x.mask_bg {
        mask_terms.push(acc.seg(g, bg)?);
    }
    let mask = sum_vars(g, &mask_terms);

    let wp = g.scale(prompt, w.prompt);
    let wt = g.scale(text, w.text);
    let wm = g.scale(mask, w.mask);
    let total = sum_vars(g, &[wp, wt, wm]);

    let bce = acc.total(g, &acc.bce);
    let dice = acc.total(g, &acc.dice);
    let report = LossReport {
        bce,
        dice,
        l1: scalar(g, b.l1),
        giou_loss: scalar(g, b.giou_loss),
        ce: scalar(g, text),
        seg: bce + dice,
        r#box: scalar(g, b.loss),
        prompt: scalar(g, prompt),
        text: scalar(g, text),
        mask: scalar(g, mask),
        total: scalar(g, total),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::VOCAB;
    use crate::params::ParamStore;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    fn input(g: &mut Graph<'_, f64>, v: &[f64], r: usize, c: usize) -> Var {
        g.input(Tensor::new(&[r, c], v.to_vec()).unwrap(), true)
    }

    #[test]
    fn seg_hand_case() {
        let s = store();
        let mut g = Graph::new(&s);
        let p = input(&mut g, &[0.5; 4], 4, 1);
        let t = seg_loss(&mut g, p, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((scalar(&g, t.bce) - core::f64::consts::LN_2).abs() < 1e-9);
        assert!((scalar(&g, t.dice) - 0.4).abs() < 1e-12);
        assert!((scalar(&g, t.loss) - 1.0931).abs() < 1e-4);
    }

    #[test]
    fn seg_perfect_and_empty() {
        let s = store();
        let mut g = Graph::new(&s);
        let gt = [1.0, 0.0, 1.0, 0.0];
        let p = input(&mut g, &gt, 4, 1);
        let t = seg_loss(&mut g, p, &gt).unwrap();
        assert!(scalar(&g, t.loss) < 1e-3);
        let z = input(&mut g, &[0.0; 4], 2, 2);
        let t = seg_loss(&mut g, z, &[0.0; 4]).unwrap();
        assert!(scalar(&g, t.dice).abs() < 1e-12);
        assert!(scalar(&g, t.bce) < 1e-6);
        assert!(matches!(seg_loss(&mut g, z, &[0.0; 3]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn box_hand_cases() {
        let s = store();
        let mut g = Graph::new(&s);
        let p = input(&mut g, &[0.0, 0.0, 0.5, 0.5], 1, 4);
        let t = box_loss(&mut g, [0.0, 0.0, 1.0, 1.0], p).unwrap();
        assert!((scalar(&g, t.l1) - 0.25).abs() < 1e-12);
        assert!((scalar(&g, t.loss) - 1.0).abs() < 1e-12);

        let same = input(&mut g, &[0.1, 0.2, 0.6, 0.7], 1, 4);
        let t = box_loss(&mut g, [0.1, 0.2, 0.6, 0.7], same).unwrap();
        assert!(scalar(&g, t.loss).abs() < 1e-7);

        let disjoint = input(&mut g, &[0.6, 0.6, 0.9, 0.9], 1, 4);
        let t = box_loss(&mut g, [0.0, 0.0, 0.3, 0.3], disjoint).unwrap();
        assert!(scalar(&g, t.giou_loss) > 1.0);

        let flat = input(&mut g, &[0.2, 0.2, 0.2, 0.8], 1, 4);
        let t = box_loss(&mut g, [0.0, 0.0, 0.5, 1.0], flat).unwrap();
        // zero-area prediction: IoU 0, enclosing box equals the target
        assert!((scalar(&g, t.giou_loss) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_uniform_and_errors() {
        let s = store();
        let mut g = Graph::new(&s);
        let l = g.constant(Tensor::zeros(&[4, VOCAB]));
        let ce = text_loss(&mut g, l, &[102, 500, 700, 1101]).unwrap();
        assert!((scalar(&g, ce) - (VOCAB as f64).ln()).abs() < 1e-9);
        assert!((scalar(&g, ce) - 7.0049).abs() < 1e-4);
        assert!(matches!(text_loss(&mut g, l, &[0, 1, 2, VOCAB]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn total_is_sum_of_terms() {
        let s = store();
        let mut g = Graph::new(&s);
        let gt4 = [1.0, 1.0, 0.0, 0.0];
        let bg4 = [0.0, 0.0, 1.0, 1.0];
        let p_box = input(&mut g, &[0.0, 0.0, 0.5, 0.5], 1, 4);
        let pf = input(&mut g, &[0.5; 4], 4, 1);
        let pb = input(&mut g, &[0.3, 0.4, 0.6, 0.7], 4, 1);
        let mf = input(&mut g, &[0.9, 0.8, 0.1, 0.2], 4, 1);
        let mb = input(&mut g, &[0.2, 0.1, 0.7, 0.9], 4, 1);
        let logits = g.constant(Tensor::zeros(&[4, VOCAB]));
        let targets = [110, 120, 130, 140];
        let x = LossInputs {
            gt_box: [0.0, 0.0, 1.0, 1.0],
            p_box,
            prompt_fg: Branch { pred: pf, gt: &gt4 },
            prompt_bg: Some(Branch { pred: pb, gt: &bg4 }),
            location_logits: logits,
            bin_targets: &targets,
            mask_fg: Branch { pred: mf, gt: &gt4 },
            mask_bg: Some(Branch { pred: mb, gt: &bg4 }),
        };
        let (total, r) = total_loss(&mut g, &x, LossWeights::default()).unwrap();
        assert!((r.total - (r.prompt + r.text + r.mask)).abs() < 1e-9);
        assert!((r.total - scalar(&g, total)).abs() < 1e-12);
        assert!((r.r#box - 1.0).abs() < 1e-12);

        let mut g2 = Graph::new(&s);
        let pb2 = input(&mut g2, &[0.3, 0.4, 0.6, 0.7], 4, 1);
        let bg_t = seg_loss(&mut g2, pb2, &bg4).unwrap();
        let bg_alone = scalar(&g2, bg_t.loss);
        assert!((r.prompt - (1.0 + 1.0931 + bg_alone)).abs() < 1e-4);
        let pbx = input(&mut g2, &[0.0, 0.0, 0.5, 0.5], 1, 4);
        let pf2 = input(&mut g2, &[0.5; 4], 4, 1);
        let pl = prompt_loss(
            &mut g2,
            [0.0, 0.0, 1.0, 1.0],
            pbx,
            Branch { pred: pf2, gt: &gt4 },
            Some(Branch { pred: pb2, gt: &bg4 }),
        )
        .unwrap();
        assert!((scalar(&g2, pl) - r.prompt).abs() < 1e-9);
        assert!((r.seg + r.r#box - r.prompt - r.mask).abs() < 1e-9);
    }

    #[test]
    fn total_gradient_is_sum_of_component_gradients() {
        let s = store();
        let gt4 = [1.0, 0.0, 0.0, 1.0];
        let build = |g: &mut Graph<'_, f64>| {
            let p = input(g, &[0.6, 0.3, 0.2, 0.7], 4, 1);
            (p, seg_loss(g, p, &gt4).unwrap())
        };
        let mut g = Graph::new(&s);
        let (p, t) = build(&mut g);
        let full = g.backward(t.loss).wrt(p).unwrap().clone();
        let gb = g.backward(t.bce).wrt(p).unwrap().clone();
        let gd = g.backward(t.dice).wrt(p).unwrap().clone();
        for i in 0..4 {
            assert!((full.data()[i] - gb.data()[i] - gd.data()[i]).abs() < 1e-12);
        }
    }
}
