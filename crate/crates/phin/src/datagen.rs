//! Writes a procedural benchmark to disk as PPM frames, PGM masks and a
//! JSONL manifest.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use phin_core::synth::{benchmark, gen_sequence, VideoSpec};

use crate::error::{Error, Result};
use crate::manifest::{Manifest, VideoRecord, FILE_NAME};
use crate::pnm;

pub const THREADS_VAR: &str = "PHANTOM_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub size: usize,
    pub frames: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec { seed: 0, n_train: 40, n_val: 8, size: 64, frames: 8 }
    }
}

/// Worker count: `PHANTOM_THREADS` when set to a positive integer, else the
/// available parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<NonZeroUsize>()
            .map(NonZeroUsize::get)
            .map_err(|_| Error::Config(format!("{THREADS_VAR} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, NonZeroUsize::get)),
    }
}

/// Runs `f` over `items` on at most `threads` workers, keeping input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<U>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every item visited")).collect()
}

fn write_video(root: &Path, spec: &VideoSpec) -> Result<VideoRecord> {
    let seq = gen_sequence(&spec.scene)?;
    let mut rec =
        VideoRecord { id: spec.id.clone(), split: spec.split.clone(), frames: vec![], masks: vec![], boxes: seq.boxes };
    for (i, (f, m)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        let frame = PathBuf::from(&spec.id).join("frames").join(format!("{:04}.ppm", i + 1));
        let mask = PathBuf::from(&spec.id).join("masks").join(format!("{:04}.pgm", i + 1));
        pnm::write_ppm(&root.join(&frame), f)?;
        pnm::write_pgm(&root.join(&mask), m)?;
        rec.frames.push(frame);
        rec.masks.push(mask);
    }
    Ok(rec)
}

/// Generates every video of the benchmark under `root` and writes
/// `root/manifest.jsonl`.
pub fn generate(root: &Path, spec: BenchmarkSpec, threads: usize) -> Result<Manifest> {
    let specs = benchmark(spec.seed, spec.n_train, spec.n_val, spec.size, spec.frames);
    let records = par_map(&specs, threads, |s| write_video(root, s))?;
    let manifest = Manifest { records };
    manifest.write(&root.join(FILE_NAME))?;
    Ok(manifest)
}
