//! Command implementations behind the `mrkp` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use mrkp_core::config::TrainConfig;
use mrkp_core::encoder::pointwise_saliency;
use mrkp_core::geometry::{farthest_point_sample, AnnotationSet, KeypointSet, PointCloud, UnitBoxTransform};
use mrkp_core::metrics::{self, CategoryScores, MetricsReport};
use mrkp_core::synthetic::{self, Family, SyntheticSpec};
use mrkp_core::trainer::{Checkpoint, Model, Trainer, STEP_LOG_HEADER};

use crate::error::{Error, Result};
use crate::manifest::{fingerprint, RunManifest};
use crate::{checkpoint, io, report};

pub const METRIC_NAMES: [&str; 4] = ["das", "miou", "part_corr", "repeatability"];

pub const CHECKPOINT_FILE: &str = "checkpoint.mrkp";
pub const STEP_LOG_FILE: &str = "steps.log";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "mrkp", version, about = "Unsupervised 3D semantic keypoints from self and mutual reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a directory of clouds of one category.
    Train(TrainArgs),
    /// Write the keypoints of one cloud.
    Detect(DetectArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Repeatability under increasing Gaussian noise.
    NoiseSweep(SweepArgs),
    /// Colored ply with cloud, saliency, keypoints and reconstruction.
    ExportViz(VizArgs),
    /// Generate a synthetic category with annotations.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of .xyz / .ply clouds.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detect with this checkpoint.
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<cloud id>.txt` keypoint files instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// One directory per category; repeatable.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Comma-separated subset of das, miou, part_corr, repeatability.
    #[arg(long, default_value = "das,miou,part_corr")]
    pub metrics: String,
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ascending, comma-separated noise levels.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = metrics::REPEATABILITY_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// box, tee, cross or airplane-toy.
    #[arg(long)]
    pub family: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Samples down to `points` when larger, then normalizes. Returns the
/// normalized cloud and the transform from the input frame.
pub fn prepare(cloud: &PointCloud, points: usize, seed: u64) -> Result<(PointCloud, UnitBoxTransform)> {
    let sampled = if cloud.len() > points { farthest_point_sample(cloud, points, seed)? } else { cloud.clone() };
    let t = UnitBoxTransform::fit(sampled.points())?;
    let pts = sampled.points().iter().map(|p| t.apply(*p)).collect();
    let labels = sampled.part_labels().map(<[i64]>::to_vec);
    let out = PointCloud::new(pts, labels)?.with_meta(sampled.category.clone(), sampled.id.clone());
    Ok((out, t))
}

/// A loaded category directory.
pub struct Dataset {
    pub files: Vec<PathBuf>,
    pub clouds: Vec<PointCloud>,
    pub transforms: Vec<UnitBoxTransform>,
}

fn dir_name(dir: &Path) -> String {
    dir.canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_default()
}

/// Loads every cloud of `dir`. With `strict`, clouds smaller than `points`
/// are an error; otherwise they are used as they are.
pub fn load_dataset(dir: &Path, category: &str, points: usize, seed: u64, strict: bool) -> Result<Dataset> {
    let files = io::list_clouds(dir)?;
    let category = if category.is_empty() { dir_name(dir) } else { category.to_string() };
    let mut clouds = Vec::with_capacity(files.len());
    let mut transforms = Vec::with_capacity(files.len());
    for f in &files {
        let raw = io::load_any(f)?;
        if strict && raw.len() < points {
            return Err(Error::Usage(format!("{}: {} points, need at least {points}", f.display(), raw.len())));
        }
        let id = raw.id.clone();
        let (c, t) = prepare(&raw.with_meta(category.clone(), id), points, seed)?;
        clouds.push(c);
        transforms.push(t);
    }
    Ok(Dataset { files, clouds, transforms })
}

fn run_id(run: &Value) -> Option<String> {
    run.get("run_id").and_then(Value::as_str).map(str::to_owned)
}

pub fn build_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(Error::io(path))?;
            TrainConfig::parse(&text).map_err(Error::at(path))?
        }
        None => TrainConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--override expects key=value, got `{kv}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    config.validate()?;
    Ok(config)
}

/// Previous log lines up to and including `step`, when resuming into the
/// same output directory.
fn previous_log(path: &Path, step: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else { return Vec::new() };
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter(|l| l.split(',').next().and_then(|s| s.trim().parse::<u64>().ok()).is_some_and(|s| s <= step))
        .map(str::to_owned)
        .collect()
}

pub fn train(args: &TrainArgs, progress: &mut dyn FnMut(&str)) -> Result<()> {
    let mut config = build_config(args)?;
    let data = load_dataset(&args.data, &config.category, config.points_per_cloud, config.seed, true)?;
    if config.category.is_empty() {
        config.category = data.clouds[0].category.clone();
    }
    let manifest = RunManifest::new(config.clone(), fingerprint(&data.files)?, data.files.len());
    let run = manifest.to_json();
    let id = manifest.run_id();

    let resumed = match &args.resume {
        Some(p) => Some(checkpoint::read(p)?.0),
        None => None,
    };
    let mut trainer = match &resumed {
        Some(ck) => Trainer::resume_with(ck, config.clone(), &data.clouds)?,
        None => Trainer::new(config.clone(), &data.clouds)?,
    };
    fs::create_dir_all(&args.out).map_err(Error::io(&args.out))?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;

    let log_path = args.out.join(STEP_LOG_FILE);
    let mut lines = if resumed.is_some() { previous_log(&log_path, trainer.step_count()) } else { Vec::new() };
    let render = |lines: &[String]| {
        let mut s = format!("# run {id}\n# {STEP_LOG_HEADER}\n");
        for l in lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    };
    let per_epoch = trainer.pairs_per_epoch() as u64;
    let total = trainer.total_steps();
    let mut outcome = Ok(());
    while !trainer.is_finished() {
        let target = (trainer.step_count() / per_epoch + 1) * per_epoch;
        let mut epoch_loss = 0.0;
        let mut n = 0;
        outcome = trainer.run_until(target, |r| {
            lines.push(r.log_line());
            epoch_loss += r.loss.total;
            n += 1;
        });
        if outcome.is_err() {
            break;
        }
        io::write_atomic(&args.out.join(CHECKPOINT_FILE), &checkpoint::encode(&trainer.checkpoint(), &run))?;
        io::write_atomic(&log_path, render(&lines).as_bytes())?;
        progress(&format!(
            "epoch {}/{}  step {}/{}  mean loss {:.6}",
            trainer.step_count() / per_epoch,
            config.epochs,
            trainer.step_count(),
            total,
            epoch_loss / n.max(1) as f64
        ));
    }
    if outcome.is_err() {
        io::write_atomic(&log_path, render(&lines).as_bytes())?;
    }
    outcome.map_err(Error::from)
}

fn load_model(path: &Path) -> Result<(Checkpoint, Model, Option<String>)> {
    let (ck, run) = checkpoint::read(path)?;
    let model = ck.model()?;
    Ok((ck, model, run_id(&run)))
}

/// Keypoints of `cloud` in its own (input) frame.
pub fn detect_in_frame(ck: &Checkpoint, model: &Model, cloud: &PointCloud) -> Result<KeypointSet> {
    let (prepared, t) = prepare(cloud, ck.config.points_per_cloud, ck.config.seed)?;
    let mut kp = model.detect(&prepared)?;
    for p in &mut kp.keypoints {
        *p = t.invert(*p);
    }
    Ok(kp)
}

pub fn detect(args: &DetectArgs) -> Result<()> {
    let (ck, model, run) = load_model(&args.checkpoint)?;
    let cloud = io::load_any(&args.cloud)?;
    let kp = detect_in_frame(&ck, &model, &cloud)?;
    io::write_atomic(&args.out, io::write_keypoints(&kp, run.as_deref()).as_bytes())
}

pub fn parse_metrics(list: &str) -> Result<Vec<&'static str>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match METRIC_NAMES.iter().find(|m| **m == name) {
            Some(m) if !out.contains(m) => out.push(*m),
            Some(_) => {}
            None => {
                return Err(Error::Usage(format!("unknown metric `{name}`; valid names: {}", METRIC_NAMES.join(", "))))
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Usage(format!("no metrics selected; valid names: {}", METRIC_NAMES.join(", "))));
    }
    Ok(out)
}

/// Scores one category. Predictions and annotations are compared in each
/// cloud's normalized frame.
fn eval_category(
    data: &Dataset,
    preds: &[KeypointSet],
    anns: &BTreeMap<String, AnnotationSet>,
    which: &[&str],
    seed: u64,
) -> Result<CategoryScores> {
    let mut scores = CategoryScores::default();
    let annotated: Vec<(KeypointSet, AnnotationSet)> = data
        .clouds
        .iter()
        .zip(preds)
        .zip(&data.transforms)
        .filter_map(|((c, p), t)| anns.get(&c.id).map(|a| (p.clone(), a.transformed(t))))
        .collect();
    let (ap, aa): (Vec<_>, Vec<_>) = annotated.into_iter().unzip();
    if which.contains(&"das") {
        let s = metrics::das_dataset(&ap, &aa, metrics::DAS_REFERENCES, seed)?;
        scores.das = Some(s.mean);
        scores.das_undefined = s.undefined;
    }
    if which.contains(&"miou") {
        scores.miou = Some(metrics::miou_dataset(&ap, &aa, metrics::MIOU_TAU)?);
    }
    if which.contains(&"part_corr") {
        scores.part_corr = Some(metrics::part_correspondence_dataset(preds, &data.clouds, metrics::PART_PAIRS, seed)?);
    }
    Ok(scores)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let which = parse_metrics(&args.metrics)?;
    let needs_ann = which.iter().any(|m| *m == "das" || *m == "miou");
    let anns = match &args.annotations {
        Some(p) => io::load_annotations(p)?,
        None if needs_ann => return Err(Error::Usage("das and miou need --annotations".into())),
        None => BTreeMap::new(),
    };
    let model = match &args.checkpoint {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    if which.contains(&"repeatability") && model.is_none() {
        return Err(Error::Usage("repeatability needs --checkpoint".into()));
    }
    let (points, seed) = match &model {
        Some((ck, _, _)) => (ck.config.points_per_cloud, ck.config.seed),
        None => (usize::MAX, 0),
    };
    let mut report = MetricsReport::new();
    let mut repeat_clouds = Vec::new();
    for dir in &args.data {
        let data = load_dataset(dir, "", points, seed, false)?;
        let preds = match (&model, &args.predictions) {
            (Some((_, m, _)), _) => data.clouds.iter().map(|c| m.detect(c)).collect::<mrkp_core::Result<Vec<_>>>()?,
            (None, Some(pdir)) => data
                .clouds
                .iter()
                .zip(&data.transforms)
                .map(|(c, t)| {
                    let mut kp = io::load_keypoints(&pdir.join(format!("{}.txt", c.id)))?;
                    for p in &mut kp.keypoints {
                        *p = t.apply(*p);
                    }
                    Ok(kp)
                })
                .collect::<Result<Vec<_>>>()?,
            (None, None) => return Err(Error::Usage("pass --checkpoint or --predictions".into())),
        };
        let scores = eval_category(&data, &preds, &anns, &which, args.seed)?;
        let category = data.clouds[0].category.clone();
        report.per_category.insert(category, scores);
        repeat_clouds.extend(data.clouds);
    }
    if let Some((_, m, _)) = &model {
        if which.contains(&"repeatability") {
            report.repeatability_curve =
                metrics::repeatability(|c| m.detect(c), &repeat_clouds, &args.sigmas, metrics::REPEATABILITY_THRESHOLD, args.seed)?;
        }
    }
    let run = model.as_ref().and_then(|m| m.2.clone());
    fs::create_dir_all(&args.out).map_err(Error::io(&args.out))?;
    let mut json = serde_json::to_string_pretty(&report::to_json(&report, run.as_deref())).expect("report serializes");
    json.push('\n');
    io::write_atomic(&args.out.join("metrics.json"), json.as_bytes())?;
    io::write_atomic(&args.out.join("metrics.txt"), report::to_text(&report, run.as_deref()).as_bytes())
}

pub fn noise_sweep(args: &SweepArgs) -> Result<Vec<(f64, f64)>> {
    let (ck, model, run) = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data, "", ck.config.points_per_cloud, ck.config.seed, false)?;
    let curve = metrics::repeatability(|c| model.detect(c), &data.clouds, &args.sigmas, args.threshold, args.seed)?;
    io::write_atomic(&args.out, report::curve_text(&curve, run.as_deref()).as_bytes())?;
    Ok(curve)
}

pub fn export_viz(args: &VizArgs) -> Result<()> {
    let (ck, model, _) = load_model(&args.checkpoint)?;
    let raw = io::load_any(&args.cloud)?;
    let (cloud, _) = prepare(&raw, ck.config.points_per_cloud, ck.config.seed)?;
    let (scores, kp, rec) = model.reconstruct(&cloud)?;
    let saliency = pointwise_saliency(&scores);
    io::write_atomic(&args.out, io::write_viz(&cloud, &saliency, &kp, &rec).as_bytes())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let family = Family::parse(&args.family).ok_or_else(|| {
        let names: Vec<&str> = Family::ALL.iter().map(|f| f.as_str()).collect();
        Error::Usage(format!("unknown family `{}`; valid names: {}", args.family, names.join(", ")))
    })?;
    let spec = SyntheticSpec::new(family, args.points, args.seed);
    let (clouds, anns) = synthetic::generate(&spec, args.count)?;
    fs::create_dir_all(&args.out).map_err(Error::io(&args.out))?;
    for c in &clouds {
        io::write_atomic(&args.out.join(format!("{}.xyz", c.id)), io::write_xyz(c).as_bytes())?;
    }
    io::write_atomic(&args.out.join("annotations.txt"), io::write_annotations(&anns).as_bytes())
}

/// Runs a parsed command, reporting progress on stderr.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a, &mut |msg| eprintln!("{msg}")),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::NoiseSweep(a) => noise_sweep(a).map(|_| ()),
        Command::ExportViz(a) => export_viz(a),
        Command::Synth(a) => synth(a),
    }
}
