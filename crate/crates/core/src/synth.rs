//! Procedural camouflage videos: an elliptical object textured from the same
//! noise process as the background, separable mainly by its motion.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{BoxN, Image, Mask};
use crate::params::seeded_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub octaves: usize,
    /// Lattice cells per pixel of the coarsest octave.
    pub base_freq: f64,
    /// Range of ellipse semi-axes in pixels.
    pub axis_range: (f64, f64),
    /// Range of speed in pixels per frame.
    pub speed_range: (f64, f64),
    /// Static texture blobs that look like objects but never move.
    pub distractors: usize,
    /// Standard deviation of per-frame uniform sensor noise.
    pub noise: f64,
}

impl SceneSpec {
    pub fn desk(seed: u64) -> Self {
        SceneSpec {
            seed,
            height: 64,
            width: 64,
            frames: 8,
            octaves: 3,
            base_freq: 1.0 / 16.0,
            axis_range: (7.0, 13.0),
            speed_range: (1.0, 3.0),
            distractors: 0,
            noise: 0.01,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::invalid("a scene needs at least 3 frames"));
        }
        if self.speed_range.0 < 1.0 || self.speed_range.1 < self.speed_range.0 {
            return Err(Error::invalid("speed range must start at 1 px/frame or more"));
        }
        if self.axis_range.0 < 1.0 || self.axis_range.1 < self.axis_range.0 {
            return Err(Error::invalid("bad ellipse axis range"));
        }
        if 2.0 * self.axis_range.1 >= self.width.min(self.height) as f64 {
            return Err(Error::invalid(format!(
                "object diameter {} does not fit a {}x{} frame",
                2.0 * self.axis_range.1,
                self.height,
                self.width
            )));
        }
        if self.octaves == 0 || self.base_freq <= 0.0 {
            return Err(Error::invalid("texture needs at least one octave and a positive frequency"));
        }
        Ok(())
    }
}

/// A generated video with per-frame annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
    pub boxes: Vec<BoxN>,
}

fn hash(seed: u64, a: i64, b: i64, c: u64) -> f64 {
    // splitmix64 finaliser over the combined lattice key
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
struct ValueNoise {
    seed: u64,
    octaves: usize,
    freq: f64,
}

impl ValueNoise {
    fn lattice(&self, x: f64, y: f64, octave: usize, channel: u64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (smooth(x - x0), smooth(y - y0));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let key = octave as u64 * 4 + channel;
        let v = |dx: i64, dy: i64| hash(self.seed, ix + dx, iy + dy, key);
        let top = v(0, 0) * (1.0 - fx) + v(1, 0) * fx;
        let bot = v(0, 1) * (1.0 - fx) + v(1, 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    fn at(&self, x: f64, y: f64, channel: u64) -> f64 {
        let mut amp = 1.0;
        let mut f = self.freq;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for o in 0..self.octaves {
            acc += amp * self.lattice(x * f, y * f, o, channel);
            norm += amp;
            amp *= 0.5;
            f *= 2.0;
        }
        acc / norm
    }
}

/// Three palette colours blended by one noise channel, modulated by another.
#[derive(Clone, Copy, Debug)]
struct Palette([[f64; 3]; 3]);

impl Palette {
    fn colour(&self, n: f64, m: f64) -> [f64; 3] {
        // stretch the noise (which concentrates near 0.5) before blending
        let t = (0.5 + 1.8 * (n - 0.5)).clamp(0.0, 1.0);
        let (a, b, s) = if t < 0.5 { (0, 1, t * 2.0) } else { (1, 2, (t - 0.5) * 2.0) };
        let shade = 0.8 + 0.4 * m;
        core::array::from_fn(|c| ((self.0[a][c] * (1.0 - s) + self.0[b][c] * s) * shade).clamp(0.0, 1.0))
    }
}

fn texture_colour(noise: &ValueNoise, pal: &Palette, x: f64, y: f64) -> [f64; 3] {
    pal.colour(noise.at(x, y, 0), noise.at(x, y, 1))
}

fn inside(x: usize, y: usize, cx: f64, cy: f64, a: f64, b: f64) -> bool {
    let dx = (x as f64 + 0.5 - cx) / a;
    let dy = (y as f64 + 0.5 - cy) / b;
    dx * dx + dy * dy <= 1.0
}

/// Renders one scene. Deterministic in `spec.seed`.
pub fn gen_sequence(spec: &SceneSpec) -> Result<Sequence> {
    spec.validate()?;
    render(spec, true)
}

/// The same scene with the object held still and no sensor noise: every
/// frame is identical.
pub fn gen_static_sequence(spec: &SceneSpec) -> Result<Sequence> {
    let mut s = spec.clone();
    s.speed_range = (1.0, 1.0);
    s.validate()?;
    s.noise = 0.0;
    render(&s, false)
}

fn render(spec: &SceneSpec, moving: bool) -> Result<Sequence> {
    let mut rng = seeded_rng(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let noise = ValueNoise { seed: rng.random(), octaves: spec.octaves, freq: spec.base_freq };
    let pal = Palette(core::array::from_fn(|_| core::array::from_fn(|_| rng.random_range(0.15..0.85))));
    let a = rng.random_range(spec.axis_range.0..=spec.axis_range.1);
    let b = rng.random_range(spec.axis_range.0..=spec.axis_range.1);
    let mut cx = rng.random_range(a..=w as f64 - a);
    let mut cy = rng.random_range(b..=h as f64 - b);
    let speed = rng.random_range(spec.speed_range.0..=spec.speed_range.1);
    let angle = rng.random_range(0.0..core::f64::consts::TAU);
    let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
    if !moving {
        (vx, vy) = (0.0, 0.0);
    }
    // phase offset into the same noise field for the object's own texture
    let phase = (rng.random_range(500.0..1500.0), rng.random_range(500.0..1500.0));

    let mut background: Vec<[f64; 3]> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            background.push(texture_colour(&noise, &pal, x as f64, y as f64));
        }
    }
    for _ in 0..spec.distractors {
        let (da, db) = (
            rng.random_range(spec.axis_range.0..=spec.axis_range.1),
            rng.random_range(spec.axis_range.0..=spec.axis_range.1),
        );
        let (dx, dy) = (rng.random_range(da..=w as f64 - da), rng.random_range(db..=h as f64 - db));
        let off = (rng.random_range(2000.0..3000.0), rng.random_range(2000.0..3000.0));
        for y in 0..h {
            for x in 0..w {
                if inside(x, y, dx, dy, da, db) {
                    background[y * w + x] = texture_colour(&noise, &pal, x as f64 + off.0, y as f64 + off.1);
                }
            }
        }
    }
    let bg_mean: [f64; 3] =
        core::array::from_fn(|c| background.iter().map(|p| p[c]).sum::<f64>() / background.len() as f64);

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut boxes = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        let mut obj = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if inside(x, y, cx, cy, a, b) {
                    let tx = x as f64 - cx + phase.0;
                    let ty = y as f64 - cy + phase.1;
                    obj.push((y * w + x, texture_colour(&noise, &pal, tx, ty)));
                }
            }
        }
        if obj.is_empty() {
            return Err(Error::invalid("object covers no pixel"));
        }
        let obj_mean: [f64; 3] =
            core::array::from_fn(|c| obj.iter().map(|(_, p)| p[c]).sum::<f64>() / obj.len() as f64);
        let mut pix = background.clone();
        let mut mask = alloc::vec![0.0f32; h * w];
        for (i, p) in obj {
            pix[i] = core::array::from_fn(|c| (p[c] - obj_mean[c] + bg_mean[c]).clamp(0.0, 1.0));
            mask[i] = 1.0;
        }
        let data: Vec<f32> = pix
            .iter()
            .flat_map(|p| *p)
            .map(|v| {
                let n = if spec.noise > 0.0 { rng.random_range(-1.0..1.0) * spec.noise * 3f64.sqrt() } else { 0.0 };
                (v + n).clamp(0.0, 1.0) as f32
            })
            .collect();
        let mask = Mask::new(h, w, mask)?;
        boxes.push(mask.bbox().expect("object is nonempty"));
        masks.push(mask);
        frames.push(Image::new(h, w, data)?);

        cx += vx;
        cy += vy;
        if cx - a < 0.0 || cx + a > w as f64 {
            vx = -vx;
            cx = cx.clamp(a, w as f64 - a);
        }
        if cy - b < 0.0 || cy + b > h as f64 {
            vy = -vy;
            cy = cy.clamp(b, h as f64 - b);
        }
    }
    Ok(Sequence { frames, masks, boxes })
}

/// Camouflage statistics of a generated video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamouflageStats {
    /// Largest per-channel gap between object and background mean colour,
    /// averaged over frames.
    pub mean_gap: f64,
    /// Mean squared inter-frame difference inside the object divided by the
    /// same quantity over the background.
    pub motion_ratio: f64,
}

pub fn camouflage_stats(seq: &Sequence) -> CamouflageStats {
    let mut gap = 0.0;
    for (f, m) in seq.frames.iter().zip(&seq.masks) {
        let mut sums = [[0.0f64; 3]; 2];
        let mut counts = [0usize; 2];
        for (i, p) in f.data().chunks_exact(3).enumerate() {
            let k = (m.data()[i] >= 0.5) as usize;
            counts[k] += 1;
            for c in 0..3 {
                sums[k][c] += p[c] as f64;
            }
        }
        let g = (0..3)
            .map(|c| (sums[1][c] / counts[1].max(1) as f64 - sums[0][c] / counts[0].max(1) as f64).abs())
            .fold(0.0, f64::max);
        gap += g;
    }
    let mut e = [0.0f64; 2];
    let mut n = [0usize; 2];
    for t in 1..seq.frames.len() {
        let (a, b) = (seq.frames[t - 1].data(), seq.frames[t].data());
        for i in 0..seq.masks[t].data().len() {
            let k = (seq.masks[t].data()[i] >= 0.5) as usize;
            let d: f64 = (0..3).map(|c| ((b[3 * i + c] - a[3 * i + c]) as f64).powi(2)).sum();
            e[k] += d;
            n[k] += 1;
        }
    }
    let inside_e = e[1] / n[1].max(1) as f64;
    let outside_e = e[0] / n[0].max(1) as f64;
    CamouflageStats { mean_gap: gap / seq.frames.len() as f64, motion_ratio: inside_e / outside_e.max(1e-12) }
}

/// One entry of a benchmark split.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSpec {
    pub id: String,
    pub split: String,
    pub scene: SceneSpec,
}

/// Video specs of a train/validation benchmark. Seeds derive from `seed`.
pub fn benchmark(seed: u64, n_train: usize, n_val: usize, size: usize, frames: usize) -> Vec<VideoSpec> {
    let mut rng = seeded_rng(seed ^ 0x5EED_DA7A);
    let mut out = Vec::with_capacity(n_train + n_val);
    for (split, n) in [("train", n_train), ("val", n_val)] {
        for i in 0..n {
            let mut scene = SceneSpec::desk(rng.random());
            scene.height = size;
            scene.width = size;
            scene.frames = frames;
            let s = size as f64 / 64.0;
            scene.axis_range = (7.0 * s, 13.0 * s);
            out.push(VideoSpec { id: format!("{split}-{i:04}"), split: split.into(), scene });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = gen_sequence(&SceneSpec::desk(9)).unwrap();
        let b = gen_sequence(&SceneSpec::desk(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames[0], gen_sequence(&SceneSpec::desk(10)).unwrap().frames[0]);
    }

    #[test]
    fn masks_nonempty_and_boxes_tight() {
        for seed in 0..5 {
            let s = gen_sequence(&SceneSpec::desk(seed)).unwrap();
            for (m, b) in s.masks.iter().zip(&s.boxes) {
                assert_eq!(m.bbox(), Some(*b));
                let (w, h) = (m.width() as f32, m.height() as f32);
                let px = [(b[0] * w) as usize, (b[1] * h) as usize, (b[2] * w) as usize - 1, (b[3] * h) as usize - 1];
                // every edge row/column of the box touches the mask
                assert!((px[1]..=px[3]).any(|y| m.get(y, px[0]) == 1.0));
                assert!((px[1]..=px[3]).any(|y| m.get(y, px[2]) == 1.0));
                assert!((px[0]..=px[2]).any(|x| m.get(px[1], x) == 1.0));
                assert!((px[0]..=px[2]).any(|x| m.get(px[3], x) == 1.0));
            }
        }
    }

    #[test]
    fn camouflaged_but_moving() {
        for seed in 0..10 {
            let st = camouflage_stats(&gen_sequence(&SceneSpec::desk(seed)).unwrap());
            assert!(st.mean_gap < 0.05, "seed {seed}: {st:?}");
            assert!(st.motion_ratio >= 3.0, "seed {seed}: {st:?}");
        }
    }

    #[test]
    fn static_scene_has_identical_frames() {
        let s = gen_static_sequence(&SceneSpec::desk(4)).unwrap();
        assert!(s.frames.windows(2).all(|w| w[0] == w[1]));
        assert!(s.masks.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn oversized_object_rejected() {
        let mut s = SceneSpec::desk(0);
        s.axis_range = (20.0, 40.0);
        assert!(matches!(gen_sequence(&s), Err(Error::InvalidArgument(_))));
        let mut s = SceneSpec::desk(0);
        s.speed_range = (0.0, 1.0);
        assert!(gen_sequence(&s).is_err());
    }

    #[test]
    fn benchmark_ids() {
        let b = benchmark(1, 40, 8, 64, 8);
        assert_eq!(b.len(), 48);
        assert_eq!(b[0].id, "train-0000");
        assert_eq!(b[40].id, "val-0000");
        assert_eq!(b.iter().filter(|v| v.split == "val").count(), 8);
    }
}
