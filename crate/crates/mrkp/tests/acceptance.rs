//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any of them fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

use common::*;
use mrkp::checkpoint;
use mrkp::cli::{self, DetectArgs, EvalArgs, SynthArgs, TrainArgs, CHECKPOINT_FILE, STEP_LOG_FILE};
use mrkp::manifest::RunManifest;
use mrkp_core::config::TrainConfig;
use mrkp_core::geometry::{AnnotationSet, KeypointSet};
use mrkp_core::losses::ccd_parts;
use mrkp_core::metrics::{self, das, DAS_REFERENCES, MIOU_TAU, PART_PAIRS, REPEATABILITY_THRESHOLD};
use mrkp_core::synthetic::{self, Family, SyntheticSpec};
use mrkp_core::trainer::Model;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Verdict { pass, detail }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn loss_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let toy = Toy::random(&mut rng);
        let (pts, ranges) = toy.flatten();
        let parts = ccd_parts(&pts, &ranges, &toy.acts, &toy.target).unwrap();
        let fid = fidelity_oracle(&toy.segments, &toy.acts, &toy.target);
        let cov = coverage_oracle(&toy.segments, &toy.acts, &toy.target);
        for err in [parts.fidelity - fid, parts.coverage - cov, parts.fidelity + parts.coverage - (fid + cov)] {
            worst = worst.max(err.abs());
        }
    }
    let took = start.elapsed();
    Verdict::new(
        worst <= 1e-6 && took < Duration::from_secs(10),
        format!("200 instances, max abs error {worst:.1e}, {}", secs(took)),
    )
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let suites = [
        ("ccd", ccd_suite(20, 101)),
        ("predict_keypoints", keypoint_suite(15, 102)),
        ("reshape", reshape_suite(10, 103)),
        ("decode", decode_suite(10, 104)),
    ];
    let took = start.elapsed();
    let all: Vec<&GradReport> = suites.iter().flat_map(|(_, r)| r).collect();
    let usable = all.iter().filter(|r| r.ok()).count();
    let failures: usize = all.iter().map(|r| r.failures).sum();
    let kinks: usize = all.iter().map(|r| r.kinks).sum();
    let worst = all.iter().map(|r| r.worst_rel).fold(0.0, f64::max);
    Verdict::new(
        failures == 0 && usable >= 50 && took < Duration::from_secs(60),
        format!("{usable} instances within 1e-3, worst relative error {worst:.1e}, {kinks} tie coordinates skipped, {}", secs(took)),
    )
}

fn structural_constants() -> Verdict {
    let model = Model::init(&TrainConfig::default()).unwrap();
    let (clouds, _) = synthetic::generate(&SyntheticSpec::new(Family::AirplaneToy, 2048, 1), 1).unwrap();
    let (_, kp, rec) = model.reconstruct(&clouds[0]).unwrap();
    let args = TrainArgs {
        data: PathBuf::new(),
        out: PathBuf::new(),
        config: None,
        seed: None,
        epochs: None,
        overrides: Vec::new(),
        resume: None,
    };
    let manifest = RunManifest::new(cli::build_config(&args).unwrap(), String::new(), 0).to_json();
    let c = &manifest["config"];
    let shown = [
        ("points_per_cloud", "2048"),
        ("epochs", "80"),
        ("loss.lambda_self", "0.5"),
        ("loss.lambda_mutual", "0.5"),
    ];
    let verbatim = shown.iter().all(|(k, v)| c[*k] == *v);
    let get = |k: &str| c[k].as_str().unwrap_or("missing").to_string();
    Verdict::new(
        kp.len() == 10 && rec.segments.len() == 45 && model.encoder.skeleton_count() == 45 && verbatim,
        format!(
            "K={} gives {} skeletons; manifest points={} epochs={} lambda_self={} lambda_mutual={}",
            kp.len(),
            rec.segments.len(),
            get("points_per_cloud"),
            get("epochs"),
            get("loss.lambda_self"),
            get("loss.lambda_mutual")
        ),
    )
}

fn as_predictions(anns: &[AnnotationSet]) -> Vec<KeypointSet> {
    anns.iter().map(|a| KeypointSet::new(a.keypoints().iter().map(|k| k.1).collect(), a.cloud_id.clone())).collect()
}

fn metric_consistency() -> Verdict {
    let mut scores = Vec::new();
    for family in Family::ALL {
        let (clouds, anns) = synthetic::generate(&SyntheticSpec::new(family, 512, 9), 12).unwrap();
        let preds = as_predictions(&anns);
        let d = metrics::das_dataset(&preds, &anns, DAS_REFERENCES, 0).unwrap().mean;
        let m = metrics::miou_dataset(&preds, &anns, MIOU_TAU).unwrap();
        let p = metrics::part_correspondence_dataset(&preds, &clouds, PART_PAIRS, 0).unwrap();
        scores.push((family.as_str(), d, m, p));
    }
    // Four corners; the reference swaps the channels of the last two.
    let corners = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
    let src = KeypointSet::new(corners.clone(), "src");
    let swapped = KeypointSet::new(vec![corners[0], corners[1], corners[3], corners[2]], "ref");
    let ann = |id: &str| AnnotationSet::new(id, corners.iter().enumerate().map(|(i, p)| (i as i64, *p)).collect()).unwrap();
    let half = das(&src, &swapped, &ann("src"), &ann("ref")).unwrap();

    let perfect = scores.iter().all(|s| s.1 == 1.0 && s.2 == 1.0 && s.3 == 1.0);
    let listed: Vec<String> = scores.iter().map(|s| format!("{} {}/{}/{}", s.0, s.1, s.2, s.3)).collect();
    Verdict::new(perfect && half == 0.5, format!("das/miou/part_corr: {}; half-aligned das {half}", listed.join(", ")))
}

/// The desk-scale tee setup.
const TEE_COUNT: usize = 200;
const TEE_POINTS: usize = 256;
const DETECT_FILES: usize = 10;

fn tee_args(data: &Path, out: &Path, seed: u64, mutual: bool) -> TrainArgs {
    let mut overrides: Vec<String> = [
        "keypoints=4",
        "points_per_cloud=256",
        "pairs_per_epoch=100",
        "encoder.sa1_centers=128",
        "encoder.sa2_centers=32",
    ]
    .map(String::from)
    .to_vec();
    if !mutual {
        overrides.push("loss.lambda_mutual=0".into());
    }
    TrainArgs {
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        config: None,
        seed: Some(seed),
        epochs: Some(5),
        overrides,
        resume: None,
    }
}

struct Run {
    out: PathBuf,
    took: Duration,
}

impl Run {
    fn checkpoint(&self) -> PathBuf {
        self.out.join(CHECKPOINT_FILE)
    }

    fn totals(&self) -> Vec<f64> {
        fs::read_to_string(self.out.join(STEP_LOG_FILE))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.rsplit(',').next().unwrap().trim().parse().unwrap())
            .collect()
    }
}

fn train(data: &Path, out: PathBuf, seed: u64, mutual: bool) -> Run {
    eprintln!("training {} (seed {seed}, mutual {mutual})", out.display());
    let start = Instant::now();
    cli::train(&tee_args(data, &out, seed, mutual), &mut |_| {}).unwrap();
    let run = Run { out, took: start.elapsed() };
    let kp_dir = run.out.join("keypoints");
    fs::create_dir_all(&kp_dir).unwrap();
    for i in 0..DETECT_FILES {
        let id = format!("tee-{i:04}");
        cli::detect(&DetectArgs {
            checkpoint: run.checkpoint(),
            cloud: data.join(format!("{id}.xyz")),
            out: kp_dir.join(format!("{id}.txt")),
        })
        .unwrap();
    }
    run
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_training(data: &Path, run: &Run) -> Verdict {
    let start = Instant::now();
    let totals = run.totals();
    let first = mean(&totals[..10]);
    let last = mean(&totals[totals.len() - 10..]);
    let drop = 1.0 - last / first;
    let (ck, _) = checkpoint::read(&run.checkpoint()).unwrap();
    let model = ck.model().unwrap();
    let clouds = cli::load_dataset(data, "", TEE_POINTS, ck.config.seed, true).unwrap().clouds;
    let curve = metrics::repeatability(|c| model.detect(c), &clouds, &[0.01], REPEATABILITY_THRESHOLD, 0).unwrap();
    let rep = curve[0].1;
    let took = run.took + start.elapsed();
    Verdict::new(
        totals.len() == 500 && drop >= 0.5 && rep >= 0.8 && took < Duration::from_secs(15 * 60),
        format!(
            "{} steps, loss {first:.3} -> {last:.3} ({:.1}% drop), repeatability at sigma 0.01: {rep:.3}, {}",
            totals.len(),
            100.0 * drop,
            secs(took)
        ),
    )
}

fn mean_das(data: &Path, run: &Run) -> f64 {
    let out = run.out.join("eval");
    cli::eval(&EvalArgs {
        checkpoint: Some(run.checkpoint()),
        predictions: None,
        data: vec![data.to_path_buf()],
        annotations: Some(data.join("annotations.txt")),
        metrics: "das".into(),
        sigmas: vec![0.01],
        seed: 0,
        out: out.clone(),
    })
    .unwrap();
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    v["per_category"]["tee"]["das"].as_f64().unwrap()
}

fn ablation(data: &Path, root: &Path, seed0: &Run) -> Verdict {
    let mut full = vec![mean_das(data, seed0)];
    for seed in 1..3 {
        full.push(mean_das(data, &train(data, root.join(format!("full-{seed}")), seed, true)));
    }
    let mut without = Vec::new();
    for seed in 0..3 {
        without.push(mean_das(data, &train(data, root.join(format!("no-mutual-{seed}")), seed, false)));
    }
    let (f, w) = (mean(&full), mean(&without));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    Verdict::new(
        f >= w,
        format!("mean DAS full {f:.4} [{}] vs lambda_mutual=0 {w:.4} [{}]", fmt(&full), fmt(&without)),
    )
}

fn determinism(data: &Path, a: &Run, root: &Path) -> Verdict {
    let b = train(data, root.join("repeat"), 0, true);
    let mut files = vec![PathBuf::from(STEP_LOG_FILE), PathBuf::from(CHECKPOINT_FILE)];
    files.extend((0..DETECT_FILES).map(|i| Path::new("keypoints").join(format!("tee-{i:04}.txt"))));
    let differing: Vec<String> = files
        .iter()
        .filter(|f| fs::read(a.out.join(f)).unwrap() != fs::read(b.out.join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    Verdict::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("step log, checkpoint and {DETECT_FILES} keypoint files byte-identical")
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn report(n: usize, name: &str, v: &Verdict) {
    println!("{} criterion {n} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` on other targets should not trigger the long runs.
    if std::env::args().skip(1).any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let mut verdicts = Vec::new();
    let mut check = |n: usize, name: &str, v: Verdict| {
        report(n, name, &v);
        verdicts.push(v.pass);
    };
    check(1, "loss oracle", loss_oracle());
    check(2, "gradients", gradients());
    check(3, "structural constants", structural_constants());
    check(4, "metric consistency", metric_consistency());

    let root = TempDir::new().unwrap();
    let data = root.path().join("tee");
    cli::synth(&SynthArgs { family: "tee".into(), count: TEE_COUNT, points: TEE_POINTS, seed: 7, out: data.clone() }).unwrap();
    let base = train(&data, root.path().join("full-0"), 0, true);
    check(5, "desk-scale training", desk_training(&data, &base));
    check(6, "ablation direction", ablation(&data, root.path(), &base));
    check(7, "determinism", determinism(&data, &base, root.path()));

    if verdicts.iter().all(|p| *p) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
