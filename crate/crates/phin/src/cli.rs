//! Command-line interface: `datagen`, `train`, `infer`, `eval`, `gradcheck`
//! and `ablate`.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use phin_core::config::{AblationMode, RunConfig};
use phin_core::fusion::format_box;
use phin_core::media::{Image, Mask};
use phin_core::metrics::{evaluate_video, MetricReport};
use phin_core::model::{FramePrediction, LabeledVideo, Model};
use phin_core::synth::{gen_sequence, SceneSpec};
use phin_core::train::{check_model_gradients, evaluate, run_training, RunLog, SplitReport};
use phin_core::ParamStore;
use serde::Serialize;

use crate::ckpt;
use crate::datagen::{self, par_map, worker_threads, BenchmarkSpec};
use crate::error::{Error, Result};
use crate::fsio;
use crate::manifest::{self, manifest_path, Manifest};
use crate::pnm;

pub const CKPT_NAME: &str = "model.ckpt";
pub const RUNLOG_NAME: &str = "runlog.jsonl";
pub const BOXES_NAME: &str = "boxes.jsonl";
/// Largest relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "phin", version, about = "Video camouflaged object detection at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    Datagen(DatagenArgs),
    /// Train a model and write its checkpoint and run log.
    Train(TrainArgs),
    /// Predict masks and boxes for every frame from the third on.
    Infer(InferArgs),
    /// Score predicted masks against a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate several pipeline variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; missing fields take desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured pipeline variant.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub train: usize,
    #[arg(long, default_value_t = 8)]
    pub val: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint path; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A video directory holding `frames/*.ppm`, or a dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset split to run on; every video when omitted.
    #[arg(long)]
    pub split: Option<String>,
    /// Also write frames with the mask blended in.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction directory written by `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Label of the row in the report.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variants; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen(a) => cmd_datagen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

pub fn parse_mode(tag: &str) -> Result<AblationMode> {
    AblationMode::parse(tag).map_err(|e| Error::Config(e.to_string()))
}

/// Desk defaults, then the config file, then command-line overrides.
pub fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => serde_json::from_str::<RunConfig>(&fsio::read_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => RunConfig::desk(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = &args.mode {
        cfg.mode = parse_mode(m)?;
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn cmd_datagen(a: DatagenArgs) -> Result<()> {
    let spec = BenchmarkSpec { seed: a.seed, n_train: a.train, n_val: a.val, size: a.size, frames: a.frames };
    let m = datagen::generate(&a.out, spec, worker_threads()?)?;
    println!("wrote {} videos to {}", m.records.len(), a.out.display());
    Ok(())
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable record")
}

/// One JSON object per step, then one per evaluated split.
pub fn runlog_jsonl(log: &RunLog) -> String {
    let mut out = String::new();
    for s in &log.steps {
        out.push_str(&json_line(s));
        out.push('\n');
    }
    for m in &log.metrics {
        out.push_str(&json_line(m));
        out.push('\n');
    }
    out
}

/// Trains on the `train` split and scores the `val` split when present.
pub fn train_and_score(cfg: &RunConfig, data: &Path) -> Result<(phin_core::train::TrainOutput, Option<MetricReport>)> {
    let mf = manifest_path(data);
    let train = manifest::load_videos(&mf, Some("train"))?;
    if train.is_empty() {
        return Err(Error::Data(format!("{} has no train videos", mf.display())));
    }
    let val = manifest::load_videos(&mf, Some("val"))?;
    let mut out = run_training(cfg, &train, |r| {
        eprintln!("step {:>4} epoch {} lr {:.3e} loss {:.4}", r.step, r.epoch, r.lr, r.loss.total);
    })?;
    let score = if val.is_empty() {
        None
    } else {
        let (mean, _) = evaluate(&out.model, &out.store, &val)?;
        out.log.metrics.push(SplitReport { split: "val".into(), report: mean });
        Some(mean)
    };
    Ok((out, score))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.run)?;
    let (out, score) = train_and_score(&cfg, &a.data)?;
    let ck = a.ckpt.unwrap_or_else(|| a.out.join(CKPT_NAME));
    ckpt::save(&ck, &cfg, &out.store)?;
    fsio::write(&a.out.join(RUNLOG_NAME), runlog_jsonl(&out.log).as_bytes())?;
    if let Some(r) = score {
        print!("{}", metric_table(&[(cfg.mode.tag().to_string(), r)]));
        println!("{}", report_json(cfg.mode.tag(), &r));
    }
    Ok(())
}

/// Frames of a video directory (`frames/*.ppm`, sorted by name).
pub fn read_video_dir(dir: &Path) -> Result<Vec<Image>> {
    let fdir = dir.join("frames");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&fdir)
        .map_err(|e| Error::io(&fdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    paths.iter().map(|p| pnm::read_ppm(p)).collect()
}

#[derive(Serialize)]
struct BoxRecord<'a> {
    t: usize,
    text_box: String,
    box_prompt: &'a [f32; 4],
    learned_box: &'a [f32; 4],
    bins: &'a [usize; 4],
}

/// `alpha = 0.5 · mask` red blend.
pub fn overlay(frame: &Image, mask: &Mask) -> Image {
    Image::from_fn(frame.height(), frame.width(), |y, x| {
        let a = 0.5 * mask.get(y, x);
        let p = frame.pixel(y, x);
        [(1.0 - a) * p[0] + a, (1.0 - a) * p[1], (1.0 - a) * p[2]]
    })
}

/// Masks go to `<out>/masks/NNNN.pgm` for `t = 3..=T`, boxes to
/// `<out>/boxes.jsonl`.
pub fn write_predictions(out: &Path, frames: &[Image], preds: &[FramePrediction], with_overlay: bool) -> Result<()> {
    let mut boxes = String::new();
    for p in preds {
        pnm::write_pgm(&out.join("masks").join(format!("{:04}.pgm", p.t)), &p.mask)?;
        if with_overlay {
            pnm::write_ppm(&out.join("overlays").join(format!("{:04}.ppm", p.t)), &overlay(&frames[p.t - 1], &p.mask))?;
        }
        let rec = BoxRecord {
            t: p.t,
            text_box: format_box(&p.text_box),
            box_prompt: &p.box_prompt,
            learned_box: &p.learned_box,
            bins: &p.bins,
        };
        boxes.push_str(&json_line(&rec));
        boxes.push('\n');
    }
    fsio::write(&out.join(BOXES_NAME), boxes.as_bytes())
}

fn infer_one(
    model: &Model,
    store: &ParamStore<f32>,
    frames: &[Image],
    out: &Path,
    with_overlay: bool,
) -> Result<usize> {
    let preds = model.infer_video(store, frames)?;
    write_predictions(out, frames, &preds, with_overlay)?;
    Ok(preds.len())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (_, model, store) = ckpt::load(&a.ckpt)?;
    if a.data.join("frames").is_dir() {
        let frames = read_video_dir(&a.data)?;
        let n = infer_one(&model, &store, &frames, &a.out, a.overlay)?;
        println!("wrote {n} masks to {}", a.out.display());
        return Ok(());
    }
    let videos = manifest::load_videos(&manifest_path(&a.data), a.split.as_deref())?;
    let counts =
        par_map(&videos, worker_threads()?, |v| infer_one(&model, &store, &v.frames, &a.out.join(&v.id), a.overlay))?;
    println!("wrote {} masks for {} videos to {}", counts.iter().sum::<usize>(), videos.len(), a.out.display());
    Ok(())
}

/// Predicted masks of `video` from `<pred>/<id>/masks`, one per frame from
/// the third on.
pub fn read_predictions(pred: &Path, video: &LabeledVideo) -> Result<Vec<Mask>> {
    (3..=video.frames.len())
        .map(|t| {
            let p = pred.join(&video.id).join("masks").join(format!("{t:04}.pgm"));
            if !p.is_file() {
                return Err(Error::Data(format!(
                    "missing prediction for video {} frame {t}: {}",
                    video.id,
                    p.display()
                )));
            }
            let m = pnm::read_pgm_soft(&p)?;
            let gt = &video.masks[t - 1];
            if (m.height(), m.width()) != (gt.height(), gt.width()) {
                return Err(Error::Data(format!("{}: prediction size differs from ground truth", p.display())));
            }
            Ok(m)
        })
        .collect()
}

/// Per-video reports and their mean.
pub fn evaluate_dir(pred: &Path, videos: &[LabeledVideo]) -> Result<(MetricReport, Vec<(String, MetricReport)>)> {
    let per = par_map(videos, worker_threads()?, |v| {
        let masks = read_predictions(pred, v)?;
        Ok((v.id.clone(), evaluate_video(&v.masks[2..], &masks)?))
    })?;
    let reports: Vec<_> = per.iter().map(|(_, r)| *r).collect();
    Ok((MetricReport::mean(&reports)?, per))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let tag = match &a.mode {
        Some(m) => parse_mode(m)?.tag().to_string(),
        None => "mean".to_string(),
    };
    let mf = manifest_path(&a.data);
    let videos = manifest::load_videos(&mf, Some(&a.split))?;
    if videos.is_empty() {
        return Err(Error::Data(format!("{} has no '{}' videos", mf.display(), a.split)));
    }
    let (mean, per) = evaluate_dir(&a.pred, &videos)?;
    let mut rows = per;
    rows.push((tag.clone(), mean));
    print!("{}", metric_table(&rows));
    println!("{}", report_json(&tag, &mean));
    Ok(())
}

/// Fixed-width table in the order Sα, Fwβ, Eφ, M, mDice, mIoU.
pub fn metric_table(rows: &[(String, MetricReport)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:<w$}", "");
    for c in MetricReport::COLUMNS {
        s.push_str(&format!(" {c:>8}"));
    }
    s.push('\n');
    for (name, r) in rows {
        s.push_str(&format!("{name:<w$}"));
        for v in r.values() {
            s.push_str(&format!(" {v:>8.4}"));
        }
        s.push('\n');
    }
    s.push_str("E_phi: single threshold at 0.5\n");
    s
}

/// `{"tag": ..., "S_alpha": ..., ..., "mIoU": ...}`.
pub fn report_json(tag: &str, r: &MetricReport) -> String {
    let mut m = serde_json::Map::new();
    m.insert("tag".into(), tag.into());
    for (c, v) in MetricReport::COLUMNS.iter().zip(r.values()) {
        m.insert((*c).into(), v.into());
    }
    serde_json::Value::Object(m).to_string()
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = load_config(&a.run)?;
    let mut scene = SceneSpec::desk(cfg.seed);
    scene.height = cfg.model.clue_encoder.size;
    scene.width = scene.height;
    scene.frames = 3;
    let s = scene.height as f64 / 64.0;
    scene.axis_range = (scene.axis_range.0 * s, scene.axis_range.1 * s);
    let seq = gen_sequence(&scene)?;
    let video = LabeledVideo::new("gradcheck", seq.frames, seq.masks)?;
    let start = std::time::Instant::now();
    let r = check_model_gradients(&cfg, &video, 3, a.coords, a.step)?;
    println!(
        "checked {} skipped {} max_rel_error {:.3e} worst {:?} ({:.1}s)",
        r.checked,
        r.skipped,
        r.max_rel_error,
        r.worst,
        start.elapsed().as_secs_f64()
    );
    if r.max_rel_error > GRADCHECK_TOL {
        return Err(phin_core::Error::Numerical(format!(
            "max relative gradient error {:.3e} exceeds {GRADCHECK_TOL:e}",
            r.max_rel_error
        ))
        .into());
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = load_config(&a.run)?;
    let modes = if a.modes.is_empty() {
        AblationMode::ALL.to_vec()
    } else {
        a.modes.iter().map(|m| parse_mode(m)).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    let mut lines = String::new();
    for mode in modes {
        let cfg = RunConfig { mode, ..base.clone() };
        let (out, score) = train_and_score(&cfg, &a.data)?;
        let dir = a.out.join(mode.tag());
        ckpt::save(&dir.join(CKPT_NAME), &cfg, &out.store)?;
        fsio::write(&dir.join(RUNLOG_NAME), runlog_jsonl(&out.log).as_bytes())?;
        let r = score.ok_or_else(|| Error::Data("ablation needs a val split".into()))?;
        lines.push_str(&report_json(mode.tag(), &r));
        lines.push('\n');
        eprintln!("{}", report_json(mode.tag(), &r));
        rows.push((mode.tag().to_string(), r));
    }
    fsio::write(&a.out.join("ablation.jsonl"), lines.as_bytes())?;
    let table = metric_table(&rows);
    fsio::write(&a.out.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    std::io::stdout().flush().map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    Ok(())
}

/// Reads a whole manifest without loading media.
pub fn read_manifest(data: &Path) -> Result<Manifest> {
    Manifest::read(&manifest_path(data))
}
