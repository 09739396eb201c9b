use std::path::Path;
use std::process::Command;

use phin::datagen::{generate, BenchmarkSpec};
use phin::manifest::{load_videos, Manifest, FILE_NAME};
use phin::{cli, pnm};

fn phin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_phin")).args(args).env("PHANTOM_THREADS", "2").output().unwrap()
}

fn small(root: &Path) -> Manifest {
    let spec = BenchmarkSpec { seed: 3, n_train: 2, n_val: 1, size: 64, frames: 4 };
    generate(root, spec, 2).unwrap()
}

#[test]
fn datagen_layout_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = small(dir.path());
    assert_eq!(m.records.len(), 3);
    assert_eq!(m.split("val").len(), 1);
    let read = Manifest::read(&dir.path().join(FILE_NAME)).unwrap();
    assert_eq!(read, m);
    assert!(dir.path().join("train-0000/frames/0001.ppm").is_file());
    assert!(dir.path().join("train-0000/masks/0004.pgm").is_file());
    let videos = load_videos(&dir.path().join(FILE_NAME), Some("train")).unwrap();
    assert_eq!(videos.len(), 2);
    assert_eq!(videos[0].frames.len(), 4);
}

#[test]
fn deleted_mask_is_a_format_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let gone = dir.path().join("train-0001/masks/0002.pgm");
    std::fs::remove_file(&gone).unwrap();
    let err = load_videos(&dir.path().join(FILE_NAME), None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("record 1") && msg.contains("0002.pgm"), "{msg}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn loose_box_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = small(dir.path());
    m.records[0].boxes[1][2] += 0.05;
    m.write(&dir.path().join(FILE_NAME)).unwrap();
    let err = load_videos(&dir.path().join(FILE_NAME), None).unwrap_err();
    assert!(err.to_string().contains("tight box"), "{err}");
}

#[test]
fn perfect_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let videos = load_videos(&dir.path().join(FILE_NAME), Some("val")).unwrap();
    let pred = dir.path().join("pred");
    for v in &videos {
        for t in 3..=v.frames.len() {
            pnm::write_pgm(&pred.join(&v.id).join("masks").join(format!("{t:04}.pgm")), &v.masks[t - 1]).unwrap();
        }
    }
    let (mean, _) = cli::evaluate_dir(&pred, &videos).unwrap();
    let want = [1.0, 1.0, 1.0, 0.0, 1.0, 1.0];
    for (v, w) in mean.values().iter().zip(want) {
        assert!((v - w).abs() < 1e-9, "{mean:?}");
    }
    std::fs::remove_file(pred.join("val-0000/masks/0004.pgm")).unwrap();
    let err = cli::evaluate_dir(&pred, &videos).unwrap_err();
    assert!(err.to_string().contains("frame 4"), "{err}");
}

#[test]
fn exit_codes_of_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, "{\"epochs\": 0}").unwrap();
    let out = phin(&["gradcheck", "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = phin(&["train", "--data", dir.path().join("nowhere").to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
    let out = phin(&["eval", "--pred", "p", "--data", ".", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_infer_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = phin(&["datagen", "--out", data.to_str().unwrap(), "--train", "1", "--val", "1", "--frames", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{\"epochs\": 1, \"grad_accum\": 1}").unwrap();
    let run = dir.path().join("run");
    let out = phin(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--mode",
        "image-only",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mDice") && stdout.contains("\"tag\":\"image-only\""), "{stdout}");
    let log = std::fs::read_to_string(run.join("runlog.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().last().unwrap().contains("\"split\":\"val\""));

    let pred = dir.path().join("pred");
    let ckpt = run.join("model.ckpt");
    let out = phin(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.join("val-0000").to_str().unwrap(),
        "--out",
        pred.join("val-0000").to_str().unwrap(),
        "--overlay",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pred.join("val-0000/masks/0003.pgm").is_file());
    assert!(!pred.join("val-0000/masks/0002.pgm").exists());
    assert!(pred.join("val-0000/overlays/0003.ppm").is_file());
    let boxes = std::fs::read_to_string(pred.join("val-0000/boxes.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(boxes.lines().next().unwrap()).unwrap();
    let text = rec["text_box"].as_str().unwrap();
    assert!(text.starts_with('[') && text.split(", ").count() == 4, "{text}");

    let out =
        phin(&["eval", "--pred", pred.to_str().unwrap(), "--data", data.to_str().unwrap(), "--mode", "image-only"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let last = String::from_utf8_lossy(&out.stdout).lines().last().unwrap().to_string();
    let j: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert!(j["mDice"].as_f64().unwrap() >= 0.0);
}
