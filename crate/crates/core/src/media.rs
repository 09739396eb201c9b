//! Frames, masks, dense optical flow and per-timestep clue windows.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autograd::bilinear_taps;
use crate::error::{Error, Result};

/// RGB frame, interleaved `H × W × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `0.299 R + 0.587 G + 0.114 B` per pixel.
    pub fn luma(&self) -> Vec<f32> {
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        let data = resize_channels(&self.data, self.height, self.width, 3, out_h, out_w);
        Image { height: out_h, width: out_w, data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| self.pixel(y0 + y, x0 + x))
    }

    /// Edge-replicate padding on the bottom and right.
    pub fn pad_to(&self, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| self.pixel(y.min(self.height - 1), x.min(self.width - 1)))
    }
}

/// Single-channel map in `[0, 1]`: binary ground truth or soft prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Normalised `[x1, y1, x2, y2]`.
pub type BoxN = [f32; 4];

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Mask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Mask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn complement(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|v| 1.0 - v).collect() }
    }

    pub fn binarize(&self, threshold: f32) -> Mask {
        let data = self.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
        Mask { height: self.height, width: self.width, data }
    }

    /// Tight normalised box of the pixels `≥ 0.5`, `None` when empty.
    /// Pixel `x` spans `[x/W, (x+1)/W]`.
    pub fn bbox(&self) -> Option<BoxN> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) >= 0.5 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| {
            let (w, h) = (self.width as f32, self.height as f32);
            [x0 as f32 / w, y0 as f32 / h, (x1 + 1) as f32 / w, (y1 + 1) as f32 / h]
        })
    }

    /// Area-average to `g × g`, then threshold at 0.5.
    pub fn downsample_binary(&self, g: usize) -> Mask {
        let ys = area_bins(self.height, g);
        let xs = area_bins(self.width, g);
        Mask::from_fn(g, g, |gy, gx| {
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            for &(y, wy) in &ys[gy] {
                for &(x, wx) in &xs[gx] {
                    acc += wy * wx * self.get(y, x) as f64;
                    wsum += wy * wx;
                }
            }
            if acc / wsum >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Mask {
        let data = resize_channels(&self.data, self.height, self.width, 1, out_h, out_w);
        Mask { height: out_h, width: out_w, data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    /// Draws every pixel inside a normalised box.
    pub fn from_box(height: usize, width: usize, b: BoxN) -> Mask {
        Mask::from_fn(height, width, |y, x| {
            let cx = (x as f32 + 0.5) / width as f32;
            let cy = (y as f32 + 0.5) / height as f32;
            if cx >= b[0] && cx <= b[2] && cy >= b[1] && cy <= b[3] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Overlap of each output cell with the input pixels along one axis.
fn area_bins(n: usize, g: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / g as f64;
    (0..g)
        .map(|i| {
            let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut v = Vec::new();
            let mut p = a.floor() as usize;
            while (p as f64) < b && p < n {
                let w = (b.min(p as f64 + 1.0) - a.max(p as f64)).max(0.0);
                if w > 0.0 {
                    v.push((p, w));
                }
                p += 1;
            }
            v
        })
        .collect()
}

fn resize_channels(src: &[f32], h: usize, w: usize, ch: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0f32; oh * ow * ch];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            for c in 0..ch {
                let at = |y: usize, x: usize| src[(y * w + x) * ch + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * ow + ox) * ch + c] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

/// Resizes a frame to `s × s`.
pub fn resize_bilinear(frame: &Image, s: usize) -> Image {
    frame.resize(s, s)
}

/// Dense displacement field, interleaved `(u, v)` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::invalid("flow field length does not match its size"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("flow field has non-finite values"));
        }
        Ok(FlowField { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField { height, width, data: vec![0.0; height * width * 2] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, y: usize, x: usize, uv: (f32, f32)) {
        let i = (y * self.width + x) * 2;
        self.data[i] = uv.0;
        self.data[i + 1] = uv.1;
    }

    pub fn negate(&self) -> FlowField {
        FlowField { height: self.height, width: self.width, data: self.data.iter().map(|v| -v).collect() }
    }
}

/// Pyramidal Lucas–Kanade settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LkParams {
    pub levels: usize,
    /// Half-width of the square window (2 gives 5×5).
    pub radius: usize,
    pub iterations: usize,
    /// Added to the diagonal of the 2×2 normal equations.
    pub damping: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        LkParams { levels: 3, radius: 2, iterations: 3, damping: 1e-3 }
    }
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f32>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.d[y * self.w + x]
    }

    fn sample(&self, y: f32, x: f32) -> f32 {
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x0 + 1) * fx;
        let bot = self.at(y0 + 1, x0) * (1.0 - fx) + self.at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// 5-tap binomial blur then 2× decimation.
    fn down(&self) -> Plane {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = vec![0.0f32; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                tmp[y * self.w + x] = (0..5).map(|k| K[k] * self.at(y as isize, x as isize + k as isize - 2)).sum();
            }
        }
        let t = Plane { h: self.h, w: self.w, d: tmp };
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut d = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = (0..5).map(|k| K[k] * t.at(2 * y as isize + k as isize - 2, 2 * x as isize)).sum();
            }
        }
        Plane { h, w, d }
    }
}

fn box_sum(src: &[f32], h: usize, w: usize, r: usize) -> Vec<f64> {
    // separable window sum over in-bounds pixels
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (x.saturating_sub(r), (x + r).min(w - 1));
            tmp[y * w + x] = src[y * w + a..=y * w + b].iter().map(|&v| v as f64).sum();
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        let (a, b) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (a..=b).map(|yy| tmp[yy * w + x]).sum();
        }
    }
    out
}

fn lk_level(prev: &Plane, next: &Plane, flow: &mut [f32], p: &LkParams) {
    let (h, w) = (prev.h, prev.w);
    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            gx[y * w + x] = 0.5 * (prev.at(yi, xi + 1) - prev.at(yi, xi - 1));
            gy[y * w + x] = 0.5 * (prev.at(yi + 1, xi) - prev.at(yi - 1, xi));
        }
    }
    let prod = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<f32>>();
    let sxx = box_sum(&prod(&gx, &gx), h, w, p.radius);
    let sxy = box_sum(&prod(&gx, &gy), h, w, p.radius);
    let syy = box_sum(&prod(&gy, &gy), h, w, p.radius);
    let mut it = vec![0.0f32; h * w];
    for _ in 0..p.iterations {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (u, v) = (flow[2 * i], flow[2 * i + 1]);
                it[i] = next.sample(y as f32 + v, x as f32 + u) - prev.d[i];
            }
        }
        let bx = box_sum(&prod(&gx, &it), h, w, p.radius);
        let by = box_sum(&prod(&gy, &it), h, w, p.radius);
        for i in 0..h * w {
            let a = sxx[i] + p.damping;
            let c = syy[i] + p.damping;
            let b = sxy[i];
            let det = a * c - b * b;
            let du = -(c * bx[i] - b * by[i]) / det;
            let dv = -(a * by[i] - b * bx[i]) / det;
            flow[2 * i] += du as f32;
            flow[2 * i + 1] += dv as f32;
        }
    }
}

/// Dense flow from `prev` to `next` on luma: a pixel at `x` in `prev`
/// appears at `x + (u, v)` in `next`.
pub fn compute_optical_flow(prev: &Image, next: &Image, params: &LkParams) -> Result<FlowField> {
    if prev.height != next.height || prev.width != next.width {
        return Err(Error::invalid(format!(
            "flow between {}x{} and {}x{} frames",
            prev.height, prev.width, next.height, next.width
        )));
    }
    let (h, w) = (prev.height, prev.width);
    let mut pa = vec![Plane { h, w, d: prev.luma() }];
    let mut pb = vec![Plane { h, w, d: next.luma() }];
    while pa.len() < params.levels.max(1) {
        let last = pa.last().unwrap();
        if last.h < 8 || last.w < 8 {
            break;
        }
        let (a, b) = (last.down(), pb.last().unwrap().down());
        pa.push(a);
        pb.push(b);
    }
    let mut flow: Vec<f32> = Vec::new();
    let mut fh = 0;
    let mut fw = 0;
    for lvl in (0..pa.len()).rev() {
        let (lh, lw) = (pa[lvl].h, pa[lvl].w);
        flow = if flow.is_empty() {
            vec![0.0; lh * lw * 2]
        } else {
            let up = resize_channels(&flow, fh, fw, 2, lh, lw);
            let sy = lh as f32 / fh as f32;
            let sx = lw as f32 / fw as f32;
            up.chunks_exact(2).flat_map(|c| [c[0] * sx, c[1] * sy]).collect()
        };
        lk_level(&pa[lvl], &pb[lvl], &mut flow, params);
        fh = lh;
        fw = lw;
    }
    for c in flow.chunks_exact_mut(2) {
        c[0] = c[0].clamp(-(w as f32), w as f32);
        c[1] = c[1].clamp(-(h as f32), h as f32);
    }
    FlowField::new(h, w, flow)
}

/// Colour-wheel rendering: hue from the direction (0° along +u), saturation
/// from magnitude relative to the largest one; zero motion is white.
pub fn flow_to_rgb(flow: &FlowField) -> Image {
    let max = flow
        .data
        .chunks_exact(2)
        .map(|c| ((c[0] as f64).powi(2) + (c[1] as f64).powi(2)).sqrt())
        .fold(0.0f64, f64::max);
    Image::from_fn(flow.height, flow.width, |y, x| {
        if max == 0.0 {
            return [1.0; 3];
        }
        let (u, v) = flow.at(y, x);
        let (u, v) = (u as f64, v as f64);
        let sat = (u * u + v * v).sqrt() / max;
        let hue = wrap(v.atan2(u).to_degrees(), 360.0);
        hsv_to_rgb(hue, sat, 1.0)
    })
}

/// Euclidean remainder for a positive modulus.
fn wrap(x: f64, m: f64) -> f64 {
    let r = x % m;
    if r < 0.0 {
        r + m
    } else {
        r
    }
}

/// Hue in degrees of a fully saturated colour, if it has one.
pub fn hue_of(rgb: [f32; 3]) -> Option<f64> {
    let [r, g, b] = rgb.map(|v| v as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 1e-9 {
        return None;
    }
    let h = if max == r {
        60.0 * wrap((g - b) / d, 6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    Some(wrap(h, 360.0))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (wrap(hp, 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Pads (edge-replicate) to a multiple of `g` and cuts `g²` equal tiles in
/// row-major order. Tiles are returned at their native size.
pub fn anyres_split(frame: &Image, g: usize) -> Result<Vec<Image>> {
    if g == 0 {
        return Err(Error::invalid("grid must be at least 1"));
    }
    let (h, w) = (frame.height.div_ceil(g) * g, frame.width.div_ceil(g) * g);
    let padded = frame.pad_to(h, w);
    let (th, tw) = (h / g, w / g);
    let mut tiles = Vec::with_capacity(g * g);
    for r in 0..g {
        for c in 0..g {
            tiles.push(padded.crop(r * th, c * tw, th, tw));
        }
    }
    Ok(tiles)
}

/// Everything the clue encoder sees at one timestep, all `S × S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClueBundle {
    /// `I_{t-2}, I_{t-1}, I_t`.
    pub frames: [Image; 3],
    pub flow_image: Image,
    pub patches: Vec<Image>,
    /// Raw flow at source resolution.
    pub flow: FlowField,
}

impl ClueBundle {
    /// Frames, flow render, then patches: the order of the visual spans.
    pub fn images(&self) -> Vec<&Image> {
        let mut v: Vec<&Image> = self.frames.iter().collect();
        v.push(&self.flow_image);
        v.extend(self.patches.iter());
        v
    }
}

/// Builds the clue bundle for 1-indexed timestep `t ≥ 3`.
pub fn assemble_clue_window(video: &[Image], t: usize, s: usize, grid: usize, lk: &LkParams) -> Result<ClueBundle> {
    if t < 3 || t > video.len() {
        return Err(Error::OutOfRange(format!("timestep {t} outside 3..={}", video.len())));
    }
    let (a, b, c) = (&video[t - 3], &video[t - 2], &video[t - 1]);
    let flow = compute_optical_flow(b, c, lk)?;
    let patches = anyres_split(c, grid)?.iter().map(|p| p.resize(s, s)).collect();
    Ok(ClueBundle {
        frames: [a.resize(s, s), b.resize(s, s), c.resize(s, s)],
        flow_image: flow_to_rgb(&flow).resize(s, s),
        patches,
        flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize, dx: f32, dy: f32) -> Image {
        Image::from_fn(h, w, |y, x| {
            let (xf, yf) = (x as f32 - dx, y as f32 - dy);
            let a = 0.5 + 0.2 * (0.37 * xf + 0.11 * yf).sin() + 0.15 * (0.23 * yf - 0.31 * xf).cos();
            let b = 0.5 + 0.25 * (0.19 * xf * 0.7 + 0.41 * yf).sin();
            [a, b, 0.5 * (a + b)]
        })
    }

    fn median(mut v: Vec<f32>) -> f32 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    fn interior(f: &FlowField, m: usize) -> (Vec<f32>, Vec<f32>) {
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for y in m..f.height() - m {
            for x in m..f.width() - m {
                let (u, v) = f.at(y, x);
                us.push(u);
                vs.push(v);
            }
        }
        (us, vs)
    }

    #[test]
    fn resize_center_sample() {
        let img = Image::new(2, 2, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let r = img.resize(1, 1);
        assert!((r.data()[0] - 0.5).abs() < 1e-6);
        let t = texture(9, 11, 0.0, 0.0);
        assert!(t.resize(9, 11).data().iter().zip(t.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn zero_motion_and_constant_frames() {
        let t = texture(32, 32, 0.0, 0.0);
        let f = compute_optical_flow(&t, &t, &LkParams::default()).unwrap();
        assert!(f.data().iter().all(|v| v.abs() < 1e-3));
        let c = Image::filled(16, 16, [0.4; 3]);
        let f = compute_optical_flow(&c, &c, &LkParams::default()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_is_recovered_and_antisymmetric() {
        let a = texture(64, 64, 0.0, 0.0);
        let b = texture(64, 64, 2.0, 0.0);
        let f = compute_optical_flow(&a, &b, &LkParams::default()).unwrap();
        let (us, vs) = interior(&f, 8);
        let (mu, mv) = (median(us), median(vs));
        assert!((mu - 2.0).abs() < 0.5 && mv.abs() < 0.5, "median ({mu}, {mv})");
        let back = compute_optical_flow(&b, &a, &LkParams::default()).unwrap();
        let (bu, _) = interior(&back, 8);
        assert!((median(bu) + mu).abs() < 0.5);
    }

    #[test]
    fn size_mismatch_rejected() {
        let r =
            compute_optical_flow(&Image::filled(8, 8, [0.0; 3]), &Image::filled(8, 9, [0.0; 3]), &LkParams::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn flow_wheel() {
        let z = FlowField::zeros(4, 4);
        assert!(flow_to_rgb(&z).data().iter().all(|&v| v == 1.0));
        let mut f = FlowField::zeros(3, 3);
        f.set(1, 1, (1.0, 0.0));
        let img = flow_to_rgb(&f);
        assert_eq!(img.pixel(1, 1), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(0, 0), [1.0, 1.0, 1.0]);
        let mut g = FlowField::zeros(1, 2);
        g.set(0, 0, (0.3, 0.8));
        g.set(0, 1, (-1.0, 0.2));
        let (p, n) = (flow_to_rgb(&g), flow_to_rgb(&g.negate()));
        for x in 0..2 {
            let hp = hue_of(p.pixel(0, x)).unwrap();
            let hn = hue_of(n.pixel(0, x)).unwrap();
            let d = (hn - hp).rem_euclid(360.0);
            assert!((d - 180.0).abs() < 1e-3, "hue shift {d}");
        }
    }

    #[test]
    fn anyres_tiles() {
        let t = texture(64, 64, 0.0, 0.0);
        let tiles = anyres_split(&t, 2).unwrap();
        assert_eq!(tiles.len(), 4);
        assert!(tiles.iter().all(|p| p.height() == 32 && p.width() == 32));
        let back = Image::from_fn(64, 64, |y, x| tiles[(y / 32) * 2 + x / 32].pixel(y % 32, x % 32));
        assert_eq!(back, t);
        let odd = anyres_split(&texture(65, 65, 0.0, 0.0), 2).unwrap();
        assert!(odd.iter().all(|p| p.height() == 33 && p.width() == 33));
        assert_eq!(odd[3].pixel(32, 32), odd[3].pixel(31, 31));
    }

    #[test]
    fn clue_window_indices() {
        let video: Vec<Image> = (0..5).map(|i| texture(32, 32, i as f32, 0.0)).collect();
        let b = assemble_clue_window(&video, 3, 16, 2, &LkParams::default()).unwrap();
        assert_eq!(b.frames[0], video[0].resize(16, 16));
        assert_eq!(b.frames[2], video[2].resize(16, 16));
        let direct = compute_optical_flow(&video[1], &video[2], &LkParams::default()).unwrap();
        assert_eq!(b.flow, direct);
        assert_eq!(b.images().len(), 3 + 1 + 4);
        assert!(b.images().iter().all(|i| i.height() == 16 && i.width() == 16));
        assert!(matches!(assemble_clue_window(&video, 2, 16, 2, &LkParams::default()), Err(Error::OutOfRange(_))));
        assert_eq!(
            assemble_clue_window(&video, 4, 16, 2, &LkParams::default()).unwrap(),
            assemble_clue_window(&video, 4, 16, 2, &LkParams::default()).unwrap()
        );
    }

    #[test]
    fn mask_box_and_downsample() {
        let m = Mask::from_fn(8, 8, |y, x| if (2..5).contains(&y) && (1..7).contains(&x) { 1.0 } else { 0.0 });
        assert_eq!(m.bbox(), Some([1.0 / 8.0, 2.0 / 8.0, 7.0 / 8.0, 5.0 / 8.0]));
        assert_eq!(Mask::zeros(4, 4).bbox(), None);
        let d = m.downsample_binary(4);
        assert_eq!(d.get(1, 1), 1.0);
        assert_eq!(d.get(3, 3), 0.0);
        assert_eq!(Mask::from_box(8, 8, m.bbox().unwrap()), m);
    }
}
