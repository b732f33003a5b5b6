//! Hierarchical set-abstraction encoder producing per-keypoint score rows and
//! a global feature.
//!
//! Sampling and grouping are resolved before the differentiable pass and are
//! independent of the order in which points are stored: centers are picked by
//! farthest point sampling started from the point farthest from the centroid,
//! neighborhoods keep the nearest points within the ball radius, and every
//! distance tie is broken by comparing coordinates. Together with max pooling
//! and per-point layers this makes the score matrix permutation equivariant.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::geometry::{KeypointSet, PointCloud};
use crate::nn::{add_mlp, dense, mlp, Bindings, ParamStore};
use crate::tape::{RowMix, Tape, Var};
use crate::tensor::Tensor;
use crate::vec3::{self, Point3};

const SA1: [usize; 4] = [3, 32, 32, 64];
const SA2_HIDDEN: [usize; 3] = [64, 64, 128];
const GLOBAL_HIDDEN: [usize; 2] = [128, 256];
const FP2_OUT: usize = 128;
const FP1_HIDDEN: [usize; 2] = [64, 64];

/// Width of the pooled global descriptor.
pub const DESCRIPTOR_WIDTH: usize = 256;

/// How score rows are normalized across points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreNorm {
    Softmax,
    None,
}

impl ScoreNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreNorm::Softmax => "softmax",
            ScoreNorm::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(ScoreNorm::Softmax),
            "none" => Some(ScoreNorm::None),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub keypoints: usize,
    pub sa1_centers: usize,
    pub sa2_centers: usize,
    pub sa1_radius: f64,
    pub sa2_radius: f64,
    pub group_size: usize,
    pub offset_code_width: usize,
    pub score_norm: ScoreNorm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            keypoints: 10,
            sa1_centers: 512,
            sa2_centers: 128,
            sa1_radius: 0.2,
            sa2_radius: 0.4,
            group_size: 32,
            offset_code_width: 32,
            score_norm: ScoreNorm::Softmax,
        }
    }
}

impl EncoderConfig {
    pub fn skeleton_count(&self) -> usize {
        self.keypoints * (self.keypoints - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints < 2 {
            bail!(Argument, "at least 2 keypoints are required, got {}", self.keypoints);
        }
        if self.sa1_centers == 0 || self.sa2_centers == 0 || self.group_size == 0 || self.offset_code_width == 0 {
            bail!(Argument, "encoder sizes must be positive");
        }
        if !(self.sa1_radius > 0.0 && self.sa2_radius > 0.0) {
            bail!(Argument, "ball radii must be positive");
        }
        Ok(())
    }

    /// Registers the encoder parameters under `encoder.*`.
    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        add_mlp(store, "encoder.sa1", &SA1, false, rng);
        let sa2 = [3 + SA1[3], SA2_HIDDEN[0], SA2_HIDDEN[1], SA2_HIDDEN[2]];
        add_mlp(store, "encoder.sa2", &sa2, false, rng);
        let global = [3 + SA2_HIDDEN[2], GLOBAL_HIDDEN[0], GLOBAL_HIDDEN[1]];
        add_mlp(store, "encoder.global", &global, false, rng);
        add_mlp(store, "encoder.fp2", &[SA2_HIDDEN[2] + SA1[3], FP2_OUT], false, rng);
        add_mlp(store, "encoder.fp1", &[FP2_OUT + 3, FP1_HIDDEN[0], FP1_HIDDEN[1]], false, rng);
        store.add_dense("encoder.score_head", FP1_HIDDEN[1], self.keypoints, false, rng);
        store.add_dense("encoder.activation_head", DESCRIPTOR_WIDTH, self.skeleton_count(), false, rng);
        store.add_dense("encoder.offset_head", DESCRIPTOR_WIDTH, self.offset_code_width, false, rng);
    }
}

/// `K x N` point-wise keypoint weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    weights: Tensor,
}

impl ScoreMatrix {
    /// Wraps a `K x N` matrix; entries must be finite and non-negative.
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            bail!(Argument, "empty score matrix");
        }
        if weights.data().iter().any(|w| !w.is_finite() || *w < 0.0) {
            bail!(Argument, "score weights must be finite and non-negative");
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn keypoints(&self) -> usize {
        self.weights.rows()
    }

    pub fn points(&self) -> usize {
        self.weights.cols()
    }
}

/// Activation strengths plus the code that drives per-point skeleton offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature {
    pub activations: Vec<f64>,
    pub offset_code: Vec<f64>,
}

/// Keypoint `k` is `sum_n weights[k, n] * points[n]`.
pub fn predict_keypoints(scores: &ScoreMatrix, cloud: &PointCloud) -> Result<KeypointSet> {
    if scores.points() != cloud.len() {
        bail!(Argument, "score matrix covers {} points, cloud has {}", scores.points(), cloud.len());
    }
    let kp = scores.weights.matmul(&Tensor::from_points(cloud.points()));
    Ok(KeypointSet::new(kp.to_points(), cloud.id.clone()))
}

/// Per-point sum of the keypoint weights, for visualization.
pub fn pointwise_saliency(scores: &ScoreMatrix) -> Vec<f64> {
    let w = &scores.weights;
    (0..w.cols()).map(|n| (0..w.rows()).map(|k| w.get(k, n)).sum()).collect()
}

/// Precomputed sampling and grouping indices for one cloud.
#[derive(Clone, Debug)]
pub struct Structure {
    centers1: Vec<usize>,
    groups1: Vec<usize>,
    centers2: Vec<usize>,
    groups2: Vec<usize>,
    interp2: RowMix,
    interp1: RowMix,
    group_size: usize,
}

/// Farthest point sampling that does not depend on storage order.
pub(crate) fn canonical_fps(points: &[Point3], m: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    let centroid = vec3::scale(
        points.iter().fold([0.0; 3], |acc, p| vec3::add(acc, *p)),
        1.0 / n as f64,
    );
    let better = |d: f64, i: usize, best_d: f64, best: usize| {
        d > best_d || (d == best_d && vec3::lex_cmp(&points[i], &points[best]).is_lt())
    };
    let mut first = 0;
    let mut first_d = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = vec3::dist2(*p, centroid);
        if better(d, i, first_d, first) {
            first = i;
            first_d = d;
        }
    }
    let mut nearest = alloc::vec![f64::INFINITY; n];
    let mut chosen = Vec::with_capacity(m);
    let mut current = first;
    for _ in 0..m {
        chosen.push(current);
        let c = points[current];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = vec3::dist2(*p, c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if better(nearest[i], i, best_d, best) {
                best = i;
                best_d = nearest[i];
            }
        }
        current = best;
    }
    chosen
}

/// Indices of the `count` nearest `candidates` to `q`, ordered by distance
/// then coordinates.
fn nearest(points: &[Point3], candidates: &[usize], q: Point3, count: usize, radius2: f64) -> Vec<(f64, usize)> {
    let mut found: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| (vec3::dist2(points[i], q), i))
        .filter(|(d, _)| *d <= radius2)
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0).then_with(|| vec3::lex_cmp(&points[a.1], &points[b.1]))
    };
    if found.len() > count {
        found.select_nth_unstable_by(count - 1, cmp);
        found.truncate(count);
    }
    found.sort_unstable_by(cmp);
    found
}

fn ball_groups(points: &[Point3], candidates: &[usize], centers: &[usize], radius: f64, size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(centers.len() * size);
    for &c in centers {
        let found = nearest(points, candidates, points[c], size, radius * radius);
        // The center is always within its own ball, so `found` is non-empty.
        for k in 0..size {
            out.push(found.get(k).unwrap_or(&found[0]).1);
        }
    }
    out
}

/// Inverse-distance interpolation from `sources` onto `targets` using the
/// three nearest sources. Indices in the result refer to positions within
/// `sources`.
fn interpolation(points: &[Point3], sources: &[usize], targets: &[Point3]) -> RowMix {
    let mut mix = RowMix::new();
    let pos: alloc::collections::BTreeMap<usize, usize> =
        sources.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    for &t in targets {
        let found = nearest(points, sources, t, 3, f64::INFINITY);
        let w: Vec<f64> = found.iter().map(|(d2, _)| 1.0 / (libm::sqrt(*d2) + 1e-8)).collect();
        let total: f64 = w.iter().sum();
        mix.push_row(found.iter().zip(&w).map(|((_, i), wi)| (pos[i], wi / total)));
    }
    mix
}

impl Structure {
    pub fn build(points: &[Point3], cfg: &EncoderConfig) -> Self {
        let all: Vec<usize> = (0..points.len()).collect();
        let centers1 = canonical_fps(points, cfg.sa1_centers);
        let groups1 = ball_groups(points, &all, &centers1, cfg.sa1_radius, cfg.group_size);
        let c1_points: Vec<Point3> = centers1.iter().map(|&i| points[i]).collect();
        let centers2_local = canonical_fps(&c1_points, cfg.sa2_centers);
        let centers2: Vec<usize> = centers2_local.iter().map(|&i| centers1[i]).collect();
        let groups2 = ball_groups(points, &centers1, &centers2, cfg.sa2_radius, cfg.group_size);
        let interp2 = interpolation(points, &centers2, &c1_points);
        let interp1 = interpolation(points, &centers1, points);
        // Translate group members to positions within the level-1 centers.
        let pos1: alloc::collections::BTreeMap<usize, usize> =
            centers1.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let groups2 = groups2.iter().map(|g| pos1[g]).collect();
        let centers2 = centers2_local;
        Self { centers1, groups1, centers2, groups2, interp2, interp1, group_size: cfg.group_size }
    }
}

/// Encoder outputs as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `K x N` score matrix.
    pub scores: Var,
    /// `1 x K(K-1)/2` activation strengths.
    pub activations: Var,
    /// `1 x H` offset code.
    pub offset_code: Var,
    /// `N x 3` input points.
    pub points: Var,
}

fn repeat_each(index: &[usize], times: usize) -> Vec<usize> {
    index.iter().flat_map(|&i| core::iter::repeat_n(i, times)).collect()
}

/// Differentiable forward pass over `points` (an `N x 3` node).
pub fn forward(tape: &mut Tape, b: &Bindings, cfg: &EncoderConfig, points: Var, structure: &Structure) -> EncoderVars {
    let s = structure.group_size;
    let n1 = structure.centers1.len();
    let n2 = structure.centers2.len();

    let members = tape.gather_rows(points, structure.groups1.clone());
    let anchors = tape.gather_rows(points, repeat_each(&structure.centers1, s));
    let rel = tape.sub(members, anchors);
    let rel = tape.scale(rel, 1.0 / cfg.sa1_radius);
    let h = mlp(tape, b, "encoder.sa1", SA1.len() - 1, rel, true);
    let f1 = tape.max_pool_groups(h, s);
    let xyz1 = tape.gather_rows(points, structure.centers1.clone());

    let members = tape.gather_rows(xyz1, structure.groups2.clone());
    let anchors = tape.gather_rows(xyz1, repeat_each(&structure.centers2, s));
    let rel = tape.sub(members, anchors);
    let rel = tape.scale(rel, 1.0 / cfg.sa2_radius);
    let feats = tape.gather_rows(f1, structure.groups2.clone());
    let h = tape.concat_cols(rel, feats);
    let h = mlp(tape, b, "encoder.sa2", 3, h, true);
    let f2 = tape.max_pool_groups(h, s);
    let xyz2 = tape.gather_rows(xyz1, structure.centers2.clone());

    let h = tape.concat_cols(xyz2, f2);
    let h = mlp(tape, b, "encoder.global", 2, h, true);
    let descriptor = tape.max_pool_groups(h, n2);

    let up = tape.mix_rows(f2, structure.interp2.clone());
    debug_assert_eq!(tape.value(up).rows(), n1);
    let h = tape.concat_cols(up, f1);
    let f1b = mlp(tape, b, "encoder.fp2", 1, h, true);
    let up = tape.mix_rows(f1b, structure.interp1.clone());
    let h = tape.concat_cols(up, points);
    let h = mlp(tape, b, "encoder.fp1", 2, h, true);
    let logits = dense(tape, b, "encoder.score_head", h);
    let logits = tape.transpose(logits);
    let scores = match cfg.score_norm {
        ScoreNorm::Softmax => tape.softmax_rows(logits),
        ScoreNorm::None => logits,
    };

    let a = dense(tape, b, "encoder.activation_head", descriptor);
    let activations = tape.sigmoid(a);
    let offset_code = dense(tape, b, "encoder.offset_head", descriptor);
    EncoderVars { scores, activations, offset_code, points }
}

fn check_input(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    if cloud.len() < cfg.keypoints {
        bail!(Argument, "cloud has {} points, fewer than {} keypoints", cloud.len(), cfg.keypoints);
    }
    Ok(())
}

/// Places `cloud` on the tape and runs the encoder.
pub fn forward_cloud(tape: &mut Tape, b: &Bindings, cfg: &EncoderConfig, cloud: &PointCloud) -> Result<EncoderVars> {
    check_input(cloud, cfg)?;
    let structure = Structure::build(cloud.points(), cfg);
    let points = tape.constant(Tensor::from_points(cloud.points()));
    Ok(forward(tape, b, cfg, points, &structure))
}

/// Inference-only encoding.
pub fn encode(cloud: &PointCloud, params: &ParamStore, cfg: &EncoderConfig) -> Result<(ScoreMatrix, GlobalFeature)> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let out = forward_cloud(&mut tape, &b, cfg, cloud)?;
    let acts = tape.value(out.activations);
    if !acts.is_finite() {
        bail!(Numeric, "encoder produced non-finite activations for cloud `{}`", cloud.id);
    }
    let scores = tape.value(out.scores).clone();
    if !scores.is_finite() {
        bail!(Numeric, "encoder produced non-finite scores for cloud `{}`", cloud.id);
    }
    let scores = match cfg.score_norm {
        ScoreNorm::Softmax => ScoreMatrix::new(scores)?,
        // Unnormalized rows may be negative; keep them as produced.
        ScoreNorm::None => ScoreMatrix { weights: scores },
    };
    let gf = GlobalFeature {
        activations: acts.data().to_vec(),
        offset_code: tape.value(out.offset_code).data().to_vec(),
    };
    Ok((scores, gf))
}

/// Short description of the backbone, recorded in manifests.
pub fn backbone_summary(cfg: &EncoderConfig) -> String {
    format!(
        "sa1(centers={},radius={},group={},mlp=3-32-32-64) sa2(centers={},radius={},group={},mlp=67-64-64-128) global(131-128-256) fp(192-128,131-64-64) heads(score={},activation={},offset_code={})",
        cfg.sa1_centers,
        cfg.sa1_radius,
        cfg.group_size,
        cfg.sa2_centers,
        cfg.sa2_radius,
        cfg.group_size,
        cfg.keypoints,
        cfg.skeleton_count(),
        cfg.offset_code_width
    )
}
