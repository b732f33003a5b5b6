//! Skeleton decoder: `K(K-1)/2` point segments between keypoint pairs, moved
//! by learned per-point offsets and weighted by activation strengths.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::GlobalFeature;
use crate::error::{bail, Result};
use crate::geometry::KeypointSet;
use crate::nn::{dense, Bindings, ParamStore};
use crate::tape::{RowMix, Tape, Var};
use crate::tensor::Tensor;
use crate::vec3::{self, Point3};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Spacing between consecutive skeleton points.
    pub interval: f64,
    pub cap_per_segment: usize,
    pub hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { interval: 0.05, cap_per_segment: 64, hidden: 64 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0) || !self.interval.is_finite() {
            bail!(Argument, "skeleton interval must be positive, got {}", self.interval);
        }
        if self.cap_per_segment < 2 {
            bail!(Argument, "cap_per_segment must be at least 2");
        }
        if self.hidden == 0 {
            bail!(Argument, "decoder hidden width must be positive");
        }
        Ok(())
    }

    /// Points emitted for a segment of the given length.
    pub fn points_for_length(&self, length: f64) -> usize {
        // Guard against `0.4 / 0.1 = 4.000000000000001`.
        let steps = libm::ceil(length / self.interval - 1e-9).max(0.0) as usize;
        (steps + 1).clamp(2, self.cap_per_segment)
    }

    /// Registers `decoder.*` for `segments` skeletons driven by an offset code
    /// of width `code_width`. The output layer starts at zero.
    pub fn register(&self, store: &mut ParamStore, segments: usize, code_width: usize, rng: &mut ChaCha8Rng) {
        store.add_dense("decoder.code", code_width, self.hidden, false, rng);
        let mut embed = Tensor::zeros(segments, self.hidden);
        for x in embed.data_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
        store.insert("decoder.segment_embedding", embed);
        let mut arc = Tensor::zeros(1, self.hidden);
        for x in arc.data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        store.insert("decoder.arc", arc);
        store.add_dense("decoder.out", self.hidden, 3, true, rng);
    }
}

/// Unordered keypoint pairs in lexicographic order `(0,1), (0,2), ..., (K-2,K-1)`.
pub fn segment_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub endpoints: (usize, usize),
    pub points: Vec<Point3>,
    pub activation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonReconstruction {
    pub segments: Vec<Segment>,
    /// Pairs whose keypoints coincide.
    pub degenerate: Vec<(usize, usize)>,
}

impl SkeletonReconstruction {
    pub fn total_points(&self) -> usize {
        self.segments.iter().map(|s| s.points.len()).sum()
    }

    pub fn activations(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.activation).collect()
    }

    /// Flattened points with the index range of each segment.
    pub fn flatten(&self) -> (Vec<Point3>, Vec<core::ops::Range<usize>>) {
        let mut points = Vec::with_capacity(self.total_points());
        let mut ranges = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            let start = points.len();
            points.extend_from_slice(&s.points);
            ranges.push(start..points.len());
        }
        (points, ranges)
    }
}

/// Point placement of every segment, decided from keypoint positions and
/// held fixed while differentiating.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub pairs: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
}

impl Layout {
    pub fn from_keypoints(kp: &[Point3], cfg: &DecoderConfig) -> Self {
        let pairs = segment_pairs(kp.len());
        let counts = pairs.iter().map(|&(i, j)| cfg.points_for_length(vec3::dist(kp[i], kp[j]))).collect();
        Self { pairs, counts }
    }

    pub fn total_points(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn ranges(&self) -> Vec<core::ops::Range<usize>> {
        let mut start = 0;
        self.counts
            .iter()
            .map(|c| {
                let r = start..start + c;
                start += c;
                r
            })
            .collect()
    }

    /// Linear map from keypoints to skeleton points.
    fn interpolation(&self) -> RowMix {
        let mut mix = RowMix::new();
        for (&(i, j), &count) in self.pairs.iter().zip(&self.counts) {
            for p in 0..count {
                let t = p as f64 / (count - 1) as f64;
                mix.push_row([(i, 1.0 - t), (j, t)]);
            }
        }
        mix
    }

    fn segment_ids(&self) -> Vec<usize> {
        self.counts.iter().enumerate().flat_map(|(s, &c)| core::iter::repeat_n(s, c)).collect()
    }

    fn arc_positions(&self) -> Tensor {
        let data = self
            .counts
            .iter()
            .flat_map(|&c| (0..c).map(move |p| p as f64 / (c - 1) as f64))
            .collect::<Vec<_>>();
        let n = data.len();
        Tensor::from_vec(n, 1, data).expect("arc position length")
    }
}

/// Straight segments between every keypoint pair with unit activations.
pub fn build_skeletons(kp: &KeypointSet, cfg: &DecoderConfig) -> Result<SkeletonReconstruction> {
    cfg.validate()?;
    if kp.len() < 2 {
        bail!(Argument, "at least 2 keypoints are required, got {}", kp.len());
    }
    let layout = Layout::from_keypoints(&kp.keypoints, cfg);
    let points = layout.interpolation().apply(&Tensor::from_points(&kp.keypoints)).to_points();
    Ok(assemble(&layout, &points, &alloc::vec![1.0; layout.pairs.len()], &kp.keypoints))
}

fn assemble(layout: &Layout, points: &[Point3], activations: &[f64], kp: &[Point3]) -> SkeletonReconstruction {
    let segments = layout
        .pairs
        .iter()
        .zip(layout.ranges())
        .zip(activations)
        .map(|((&endpoints, r), &activation)| Segment { endpoints, points: points[r].to_vec(), activation })
        .collect();
    let degenerate = layout.pairs.iter().copied().filter(|&(i, j)| kp[i] == kp[j]).collect();
    SkeletonReconstruction { segments, degenerate }
}

/// Tape nodes of one decoded reconstruction.
#[derive(Clone, Debug)]
pub struct DecodedVars {
    /// `M x 3` displaced skeleton points.
    pub points: Var,
    /// `M x 3` learned displacements.
    pub offsets: Var,
    /// `1 x S` activation strengths.
    pub activations: Var,
    pub layout: Layout,
}

fn offsets_forward(tape: &mut Tape, b: &Bindings, layout: &Layout, code: Var) -> Var {
    let m = layout.total_points();
    let h = dense(tape, b, "decoder.code", code);
    let h = tape.gather_rows(h, alloc::vec![0; m]);
    let e = tape.gather_rows(b.var("decoder.segment_embedding"), layout.segment_ids());
    let t = tape.constant(layout.arc_positions());
    let arc = tape.matmul(t, b.var("decoder.arc"));
    let z = tape.add(h, e);
    let z = tape.add(z, arc);
    let z = tape.relu(z);
    dense(tape, b, "decoder.out", z)
}

/// Differentiable decode of a `K x 3` keypoint node.
pub fn decode_forward(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &DecoderConfig,
    kp: Var,
    activations: Var,
    code: Var,
) -> DecodedVars {
    let layout = Layout::from_keypoints(&tape.value(kp).to_points(), cfg);
    let base = tape.mix_rows(kp, layout.interpolation());
    let offsets = offsets_forward(tape, b, &layout, code);
    let points = tape.add(base, offsets);
    DecodedVars { points, offsets, activations, layout }
}

fn check_structure(skel: &SkeletonReconstruction, gf: &GlobalFeature, params: &ParamStore) -> Result<()> {
    let s = skel.segments.len();
    if gf.activations.len() != s {
        bail!(Argument, "{} activations for {} segments", gf.activations.len(), s);
    }
    let embed = params.require("decoder.segment_embedding")?;
    if embed.rows() != s {
        bail!(Argument, "decoder is configured for {} segments, reconstruction has {}", embed.rows(), s);
    }
    let code = params.require("decoder.code.weight")?;
    if code.rows() != gf.offset_code.len() {
        bail!(Argument, "offset code width {} does not match decoder input {}", gf.offset_code.len(), code.rows());
    }
    if skel.segments.iter().any(|seg| seg.points.len() < 2) {
        bail!(Argument, "every segment needs at least 2 points");
    }
    Ok(())
}

/// Learned displacement of every skeleton point, in flattened order.
pub fn skeleton_offsets(skel: &SkeletonReconstruction, gf: &GlobalFeature, params: &ParamStore) -> Result<Vec<Point3>> {
    check_structure(skel, gf, params)?;
    let layout = Layout {
        pairs: skel.segments.iter().map(|s| s.endpoints).collect(),
        counts: skel.segments.iter().map(|s| s.points.len()).collect(),
    };
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let code = tape.constant(Tensor::from_vec(1, gf.offset_code.len(), gf.offset_code.clone())?);
    let o = offsets_forward(&mut tape, &b, &layout, code);
    Ok(tape.value(o).to_points())
}

/// Moves every point by the matching flattened offset and sets activations.
pub fn displace(skel: &SkeletonReconstruction, offsets: &[Point3], activations: &[f64]) -> Result<SkeletonReconstruction> {
    if offsets.len() != skel.total_points() {
        bail!(Argument, "{} offsets for {} skeleton points", offsets.len(), skel.total_points());
    }
    if activations.len() != skel.segments.len() {
        bail!(Argument, "{} activations for {} segments", activations.len(), skel.segments.len());
    }
    let mut out = skel.clone();
    let mut it = offsets.iter();
    for (seg, &a) in out.segments.iter_mut().zip(activations) {
        for p in seg.points.iter_mut() {
            *p = vec3::add(*p, *it.next().expect("offset count checked"));
        }
        seg.activation = a;
    }
    Ok(out)
}

pub fn apply_offsets(skel: &SkeletonReconstruction, gf: &GlobalFeature, params: &ParamStore) -> Result<SkeletonReconstruction> {
    let offsets = skeleton_offsets(skel, gf, params)?;
    displace(skel, &offsets, &gf.activations)
}

pub fn decode(kp: &KeypointSet, gf: &GlobalFeature, params: &ParamStore, cfg: &DecoderConfig) -> Result<SkeletonReconstruction> {
    apply_offsets(&build_skeletons(kp, cfg)?, gf, params)
}
