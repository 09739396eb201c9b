//! Frame and video evaluation: MAE, Dice, IoU, S-measure, weighted
//! F-measure and E-measure.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Mask;

/// Binarization threshold for Dice, IoU and E-measure: `p ≥ 0.5` is foreground.
pub const THRESHOLD: f64 = 0.5;
/// Object/region balance of the S-measure.
pub const S_ALPHA: f64 = 0.5;
/// `β²` of the weighted F-measure.
pub const F_BETA2: f64 = 1.0;
const EPS: f64 = f64::EPSILON;

/// Scores in the reporting order Sα, Fwβ, Eφ, M, mDice, mIoU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub s_alpha: f64,
    pub f_w_beta: f64,
    pub e_phi: f64,
    pub mae: f64,
    pub m_dice: f64,
    pub m_iou: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 6] = ["S_alpha", "Fw_beta", "E_phi", "M", "mDice", "mIoU"];

    pub fn values(&self) -> [f64; 6] {
        [self.s_alpha, self.f_w_beta, self.e_phi, self.mae, self.m_dice, self.m_iou]
    }

    /// Unweighted mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::invalid("no reports to average"));
        }
        let n = reports.len() as f64;
        let mut s = [0.0; 6];
        for r in reports {
            for (a, v) in s.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Ok(MetricReport {
            s_alpha: s[0] / n,
            f_w_beta: s[1] / n,
            e_phi: s[2] / n,
            mae: s[3] / n,
            m_dice: s[4] / n,
            m_iou: s[5] / n,
        })
    }
}

fn check(gt: &Mask, pred: &Mask) -> Result<()> {
    if gt.height() != pred.height() || gt.width() != pred.width() {
        return Err(Error::invalid(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn fg(v: f32) -> bool {
    v as f64 >= THRESHOLD
}

pub fn mae(gt: &Mask, pred: &Mask) -> Result<f64> {
    check(gt, pred)?;
    let n = gt.data().len() as f64;
    Ok(gt.data().iter().zip(pred.data()).map(|(&g, &p)| (p as f64 - g as f64).abs()).sum::<f64>() / n)
}

fn overlap(gt: &Mask, pred: &Mask) -> (usize, usize, usize) {
    let (mut inter, mut ng, mut np) = (0, 0, 0);
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        let (g, p) = (fg(g), fg(p));
        inter += (g && p) as usize;
        ng += g as usize;
        np += p as usize;
    }
    (inter, ng, np)
}

/// Dice of the binarized masks; 1 when both are empty.
pub fn dice(gt: &Mask, pred: &Mask) -> Result<f64> {
    check(gt, pred)?;
    let (i, g, p) = overlap(gt, pred);
    Ok(if g + p == 0 { 1.0 } else { 2.0 * i as f64 / (g + p) as f64 })
}

/// IoU of the binarized masks; 1 when both are empty.
pub fn iou(gt: &Mask, pred: &Mask) -> Result<f64> {
    check(gt, pred)?;
    let (i, g, p) = overlap(gt, pred);
    let u = g + p - i;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two samples.
fn std1(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn round_half_even(x: f64) -> f64 {
    let r = x.floor();
    let d = x - r;
    if d > 0.5 || (d == 0.5 && r % 2.0 != 0.0) {
        r + 1.0
    } else {
        r
    }
}

fn s_object_part(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let x = mean(vals);
    2.0 * x / (x * x + 1.0 + std1(vals) + EPS)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = mean(pred);
    let y = mean(gt);
    let dof = (n.max(2) - 1) as f64;
    let sx = pred.iter().map(|p| (p - x) * (p - x)).sum::<f64>() / dof;
    let sy = gt.iter().map(|g| (g - y) * (g - y)).sum::<f64>() / dof;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / dof;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure `α·S_object + (1−α)·S_region`, clamped at 0.
pub fn s_measure(gt: &Mask, pred: &Mask) -> Result<f64> {
    check(gt, pred)?;
    let (h, w) = (gt.height(), gt.width());
    let g: Vec<f64> = gt.data().iter().map(|&v| if fg(v) { 1.0 } else { 0.0 }).collect();
    let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let u = mean(&g);
    if u == 0.0 {
        return Ok(1.0 - mean(&p));
    }
    if u == 1.0 {
        return Ok(mean(&p));
    }

    let fg_vals: Vec<f64> = p.iter().zip(&g).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg_vals: Vec<f64> = p.iter().zip(&g).filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p).collect();
    let object = u * s_object_part(&fg_vals) + (1.0 - u) * s_object_part(&bg_vals);

    let (mut sy, mut sx, mut cnt) = (0.0, 0.0, 0.0);
    for (i, &v) in g.iter().enumerate() {
        if v == 1.0 {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            cnt += 1.0;
        }
    }
    let cx = round_half_even(sx / cnt) as usize + 1;
    let cy = round_half_even(sy / cnt) as usize + 1;
    let area = (h * w) as f64;
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut region = 0.0;
    for &(y0, y1, x0, x1) in &quads {
        let (mut pq, mut gq) = (Vec::new(), Vec::new());
        for y in y0..y1 {
            for x in x0..x1 {
                pq.push(p[y * w + x]);
                gq.push(g[y * w + x]);
            }
        }
        let wq = ((y1 - y0) * (x1 - x0)) as f64 / area;
        region += wq * ssim(&pq, &gq);
    }
    Ok((S_ALPHA * object + (1.0 - S_ALPHA) * region).max(0.0))
}

/// Enhanced-alignment measure of the prediction binarized at 0.5.
pub fn e_measure(gt: &Mask, pred: &Mask) -> Result<f64> {
    check(gt, pred)?;
    let g: Vec<f64> = gt.data().iter().map(|&v| if fg(v) { 1.0 } else { 0.0 }).collect();
    let p: Vec<f64> = pred.data().iter().map(|&v| if fg(v) { 1.0 } else { 0.0 }).collect();
    let mg = mean(&g);
    if mg == 0.0 {
        return Ok(1.0 - mean(&p));
    }
    if mg == 1.0 {
        return Ok(mean(&p));
    }
    let mp = mean(&p);
    let total: f64 = g
        .iter()
        .zip(&p)
        .map(|(&g, &p)| {
            let (a, b) = (g - mg, p - mp);
            let xi = 2.0 * a * b / (a * a + b * b + EPS);
            (1.0 + xi) * (1.0 + xi) / 4.0
        })
        .sum();
    Ok(total / g.len() as f64)
}

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform with nearest-site indices.
fn dt1(f: &[f64], d: &mut [f64], arg: &mut [usize], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = (q as f64 - p as f64).powi(2) + f[p];
        arg[q] = p;
    }
}

/// Exact Euclidean distance from every pixel to the nearest `site` pixel,
/// with that pixel's flat index. Requires at least one site.
pub fn distance_transform(sites: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let m = h.max(w);
    let (mut v, mut z) = (vec![0usize; m], vec![0.0; m + 1]);
    let mut col_d = vec![0.0; h * w];
    let mut col_arg = vec![0usize; h * w];
    let (mut f, mut d, mut a) = (vec![0.0; m], vec![0.0; m], vec![0usize; m]);
    for x in 0..w {
        for y in 0..h {
            f[y] = if sites[y * w + x] { 0.0 } else { FAR };
        }
        dt1(&f[..h], &mut d[..h], &mut a[..h], &mut v, &mut z);
        for y in 0..h {
            col_d[y * w + x] = d[y];
            col_arg[y * w + x] = a[y];
        }
    }
    let mut dist = vec![0.0; h * w];
    let mut idx = vec![0usize; h * w];
    for y in 0..h {
        f[..w].copy_from_slice(&col_d[y * w..(y + 1) * w]);
        dt1(&f[..w], &mut d[..w], &mut a[..w], &mut v, &mut z);
        for x in 0..w {
            let sx = a[x];
            dist[y * w + x] = d[x].sqrt();
            idx[y * w + x] = col_arg[y * w + sx] * w + sx;
        }
    }
    (dist, idx)
}

/// Normalised 7×7 Gaussian with σ = 5.
fn gauss_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut s = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * 25.0)).exp();
            s += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    k
}

/// Weighted F-measure; 0 for an empty ground truth.
pub fn weighted_f(gt: &Mask, pred: &Mask) -> Result<f64> {
    check(gt, pred)?;
    let (h, w) = (gt.height(), gt.width());
    let g: Vec<bool> = gt.data().iter().map(|&v| fg(v)).collect();
    if !g.iter().any(|&b| b) {
        return Ok(0.0);
    }
    let e: Vec<f64> =
        gt.data().iter().zip(pred.data()).map(|(&gv, &p)| (p as f64 - if fg(gv) { 1.0 } else { 0.0 }).abs()).collect();
    let (dst, idx) = distance_transform(&g, h, w);
    let et: Vec<f64> = (0..h * w).map(|i| if g[i] { e[i] } else { e[idx[i]] }).collect();
    let k = gauss_kernel();
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, row) in k.iter().enumerate() {
                let yy = y as isize + i as isize - 3;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for (j, kv) in row.iter().enumerate() {
                    let xx = x as isize + j as isize - 3;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    s += kv * et[yy as usize * w + xx as usize];
                }
            }
            ea[y * w + x] = s;
        }
    }
    let (mut tp, mut fp, mut fg_err, mut n_fg) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h * w {
        let min_e = if g[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        let b = if g[i] { 1.0 } else { 2.0 - ((0.5f64).ln() / 5.0 * dst[i]).exp() };
        let ew = min_e * b;
        if g[i] {
            fg_err += ew;
            n_fg += 1.0;
        } else {
            fp += ew;
        }
    }
    tp += n_fg - fg_err;
    let r = 1.0 - fg_err / n_fg;
    let p = tp / (tp + fp + EPS);
    Ok((1.0 + F_BETA2) * r * p / (r + F_BETA2 * p + EPS))
}

/// Mean scores over aligned frame lists. Frames with an empty ground truth
/// are left out of the weighted-F average.
pub fn evaluate_video(gt: &[Mask], pred: &[Mask]) -> Result<MetricReport> {
    if pred.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    if gt.len() != pred.len() {
        return Err(Error::invalid(format!("{} predictions for {} ground-truth frames", pred.len(), gt.len())));
    }
    let n = gt.len() as f64;
    let mut r = MetricReport::default();
    let mut fw_frames = 0usize;
    for (gm, pm) in gt.iter().zip(pred) {
        r.s_alpha += s_measure(gm, pm)?;
        r.e_phi += e_measure(gm, pm)?;
        r.mae += mae(gm, pm)?;
        r.m_dice += dice(gm, pm)?;
        r.m_iou += iou(gm, pm)?;
        if gm.data().iter().any(|&v| fg(v)) {
            r.f_w_beta += weighted_f(gm, pm)?;
            fw_frames += 1;
        }
    }
    r.s_alpha /= n;
    r.e_phi /= n;
    r.mae /= n;
    r.m_dice /= n;
    r.m_iou /= n;
    r.f_w_beta = if fw_frames == 0 { 0.0 } else { r.f_w_beta / fw_frames as f64 };
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(h: usize, w: usize, v: &[f32]) -> Mask {
        Mask::new(h, w, v.to_vec()).unwrap()
    }

    fn disc(s: usize) -> Mask {
        Mask::from_fn(s, s, |y, x| {
            let (dy, dx) = (y as f32 - 3.2, x as f32 - 4.1);
            if dy * dy + dx * dx < 6.5 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn pixel_hand_case() {
        let gt = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p = m(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(mae(&gt, &p).unwrap(), 0.25);
        assert!((dice(&gt, &p).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&gt, &p).unwrap(), 0.5);
        let z = Mask::zeros(2, 2);
        assert_eq!((dice(&z, &z).unwrap(), iou(&z, &z).unwrap()), (1.0, 1.0));
        assert_eq!(dice(&z, &p).unwrap(), 0.0);
        assert!(mae(&gt, &Mask::zeros(3, 2)).is_err());
    }

    #[test]
    fn perfect_and_complement() {
        let gt = disc(8);
        let r = evaluate_video(std::slice::from_ref(&gt), std::slice::from_ref(&gt)).unwrap();
        assert_eq!(r.values().map(|v| (v * 1e6).round() / 1e6), [1.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        let c = gt.complement();
        assert!(s_measure(&gt, &c).unwrap() < 0.5);
        assert!(e_measure(&gt, &c).unwrap() <= 0.25);
        assert!(weighted_f(&gt, &c).unwrap() < 0.5);
    }

    fn half(s: usize) -> Mask {
        Mask::from_fn(s, s, |_, x| if x < s / 2 { 1.0 } else { 0.0 })
    }

    fn soft() -> Mask {
        Mask::from_fn(8, 8, |y, x| ((y * 3 + x * 5) % 7) as f32 / 7.0)
    }

    // Reference values from an independent numpy/scipy evaluation.
    #[test]
    fn reference_values() {
        let cases = [
            (disc(8), soft(), 0.27762859833241416, 0.4233870331321614, 0.4891412608922889),
            (disc(8), disc(8).complement(), 0.0, 0.09358305928106816, 0.0),
            (half(8), soft(), 0.3067071461526614, 0.6104743876568337, 0.47828285046875524),
            (half(8), half(8).complement(), 0.040441176470588376, 0.2783058647872192, 0.0),
        ];
        for (i, (gt, p, s, f, e)) in cases.iter().enumerate() {
            assert!((s_measure(gt, p).unwrap() - s).abs() < 1e-9, "case {i} S");
            assert!((weighted_f(gt, p).unwrap() - f).abs() < 1e-9, "case {i} Fw");
            assert!((e_measure(gt, p).unwrap() - e).abs() < 1e-9, "case {i} E");
        }
    }

    #[test]
    fn complemented_half_frame_weighted_f() {
        let gt = half(64);
        let f = weighted_f(&gt, &gt.complement()).unwrap();
        assert!((f - 0.035728636246897254).abs() < 1e-9);
        assert!(f < 0.05);
    }

    #[test]
    fn degenerate_conventions() {
        let z = Mask::zeros(8, 8);
        assert_eq!(s_measure(&z, &z).unwrap(), 1.0);
        assert_eq!(e_measure(&z, &z).unwrap(), 1.0);
        assert_eq!(weighted_f(&z, &z).unwrap(), 0.0);
        let half = Mask::from_fn(8, 8, |_, _| 0.25);
        assert_eq!(s_measure(&z, &half).unwrap(), 0.75);
        assert!(evaluate_video(&[], &[]).is_err());
    }

    #[test]
    fn frame_average() {
        let gt = disc(8);
        let a = evaluate_video(&[gt.clone(), Mask::zeros(8, 8)], &[gt.clone(), gt.clone()]).unwrap();
        assert_eq!(a.m_dice, 0.5);
        assert_eq!(a.m_iou, 0.5);
        // the empty frame is left out of the weighted-F mean
        assert!((a.f_w_beta - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distance_transform_brute_force() {
        let (h, w) = (7, 9);
        let sites: Vec<bool> = (0..h * w).map(|i| (i * 37 + 11) % 13 == 0).collect();
        let (d, idx) = distance_transform(&sites, h, w);
        for i in 0..h * w {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let best = (0..h * w)
                .filter(|&j| sites[j])
                .map(|j| (((j / w) as f64 - y).powi(2) + ((j % w) as f64 - x).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!((d[i] - best).abs() < 1e-12);
            assert!(sites[idx[i]]);
            let (sy, sx) = ((idx[i] / w) as f64, (idx[i] % w) as f64);
            assert!((((sy - y).powi(2) + (sx - x).powi(2)).sqrt() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_invariance() {
        let gt = disc(8);
        let p = Mask::from_fn(8, 8, |y, x| ((y * 3 + x * 5) % 7) as f32 / 7.0);
        let flip = |k: &Mask| Mask::from_fn(8, 8, |y, x| k.get(y, 7 - x));
        for f in [mae, dice, iou, e_measure] {
            assert!((f(&gt, &p).unwrap() - f(&flip(&gt), &flip(&p)).unwrap()).abs() < 1e-12);
        }
    }
}
