//! JSONL dataset manifests: one record per video, paths relative to the
//! manifest's directory.

use std::path::{Path, PathBuf};

use phin_core::media::BoxN;
use phin_core::model::LabeledVideo;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::pnm;

pub const FILE_NAME: &str = "manifest.jsonl";

/// Largest coordinate gap tolerated between a stored box and the mask's
/// tight box.
const BOX_TOL: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub split: String,
    pub frames: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
    /// Normalised tight box of every mask.
    pub boxes: Vec<BoxN>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<VideoRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses and checks the shape of every record; blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let idx = records.len();
            let r: VideoRecord = serde_json::from_str(line)
                .map_err(|e| phin_core::Error::format(format!("manifest record {idx}: {e}")))?;
            if r.frames.len() < 3 || r.frames.len() != r.masks.len() || r.masks.len() != r.boxes.len() {
                return Err(phin_core::Error::format(format!(
                    "manifest record {idx} ({}): {} frames, {} masks, {} boxes; need equal counts of at least 3",
                    r.id,
                    r.frames.len(),
                    r.masks.len(),
                    r.boxes.len()
                ))
                .into());
            }
            records.push(r);
        }
        Ok(Manifest { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsio::write(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Manifest::from_jsonl(&fsio::read_string(path)?)
    }

    pub fn split(&self, tag: &str) -> Vec<&VideoRecord> {
        self.records.iter().filter(|r| r.split == tag).collect()
    }
}

/// Manifest path for a dataset directory or an explicit manifest file.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(FILE_NAME)
    } else {
        data.to_path_buf()
    }
}

/// Reads every frame and mask of `record`, checking that each file exists
/// and each stored box is the tight box of its mask.
pub fn load_video(root: &Path, idx: usize, record: &VideoRecord) -> Result<LabeledVideo> {
    let fail =
        |msg: String| Error::Core(phin_core::Error::format(format!("manifest record {idx} ({}): {msg}", record.id)));
    let mut frames = Vec::with_capacity(record.frames.len());
    let mut masks = Vec::with_capacity(record.masks.len());
    for ((f, m), b) in record.frames.iter().zip(&record.masks).zip(&record.boxes) {
        let (fp, mp) = (root.join(f), root.join(m));
        for p in [&fp, &mp] {
            if !p.is_file() {
                return Err(fail(format!("missing file {}", p.display())));
            }
        }
        let mask = pnm::read_pgm_mask(&mp)?;
        let tight = mask.bbox().ok_or_else(|| fail(format!("empty mask {}", mp.display())))?;
        if tight.iter().zip(b).any(|(x, y)| (x - y).abs() > BOX_TOL) {
            return Err(fail(format!("box {b:?} is not the tight box {tight:?} of {}", mp.display())));
        }
        frames.push(pnm::read_ppm(&fp)?);
        masks.push(mask);
    }
    Ok(LabeledVideo::new(record.id.clone(), frames, masks)?)
}

/// Videos of the given split (all videos when `split` is `None`).
pub fn load_videos(manifest_file: &Path, split: Option<&str>) -> Result<Vec<LabeledVideo>> {
    let manifest = Manifest::read(manifest_file)?;
    let root = manifest_file.parent().unwrap_or(Path::new("."));
    manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| split.is_none_or(|s| r.split == s))
        .map(|(i, r)| load_video(root, i, r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> VideoRecord {
        VideoRecord {
            id: "v".into(),
            split: "train".into(),
            frames: (1..=3).map(|i| PathBuf::from(format!("v/frames/{i:04}.ppm"))).collect(),
            masks: (1..=3).map(|i| PathBuf::from(format!("v/masks/{i:04}.pgm"))).collect(),
            boxes: vec![[0.1, 0.2, 0.3, 0.4]; 3],
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let m = Manifest { records: vec![record(), VideoRecord { id: "w".into(), ..record() }] };
        assert_eq!(Manifest::from_jsonl(&m.to_jsonl()).unwrap(), m);
    }

    #[test]
    fn malformed_record_names_index() {
        let good = serde_json::to_string(&record()).unwrap();
        let err = Manifest::from_jsonl(&format!("{good}\n{{\"id\": 3}}\n")).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
        assert_eq!(err.exit_code(), 3);
        let mut short = record();
        short.boxes.pop();
        let err = Manifest::from_jsonl(&serde_json::to_string(&short).unwrap()).unwrap_err();
        assert!(err.to_string().contains("record 0"));
    }
}
