//! Semantic-consistency and robustness metrics for predicted keypoints.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::geometry::{add_gaussian_noise, AnnotationSet, KeypointSet, PointCloud};
use crate::vec3::{self, Point3};

/// Default match threshold for keypoint mIoU, in normalized units.
pub const MIOU_TAU: f64 = 0.1;
/// Default localization threshold for repeatability.
pub const REPEATABILITY_THRESHOLD: f64 = 0.1;
/// Reference draws per source object for dataset DAS.
pub const DAS_REFERENCES: usize = 10;
/// Seeded object pairs per category for part correspondence.
pub const PART_PAIRS: usize = 100;

/// Index of the keypoint nearest to `q`, lowest index on ties.
fn nearest_channel(kp: &[Point3], q: Point3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in kp.iter().enumerate() {
        let d = vec3::dist2(*p, q);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Dual alignment score between a source and a reference object.
pub fn das(pred_src: &KeypointSet, pred_ref: &KeypointSet, ann_src: &AnnotationSet, ann_ref: &AnnotationSet) -> Result<f64> {
    if pred_src.len() != pred_ref.len() {
        bail!(Argument, "source has {} keypoints, reference {}", pred_src.len(), pred_ref.len());
    }
    if pred_src.is_empty() {
        bail!(Argument, "no predicted keypoints");
    }
    let mut evaluated = 0usize;
    let mut aligned = 0usize;
    for &(id, src_pos) in ann_src.keypoints() {
        let Some(ref_pos) = ann_ref.position(id) else { continue };
        evaluated += 1;
        let ref_channel = nearest_channel(&pred_ref.keypoints, ref_pos);
        let src_channel = nearest_channel(&pred_src.keypoints, src_pos);
        if ref_channel == src_channel {
            aligned += 1;
        }
    }
    if evaluated == 0 {
        bail!(
            UndefinedMetric,
            "annotations of `{}` and `{}` share no semantic id",
            ann_src.cloud_id,
            ann_ref.cloud_id
        );
    }
    Ok(aligned as f64 / evaluated as f64)
}

/// Number of greedy one-to-one matches within `tau`: the globally closest
/// remaining (prediction, annotation) pair is matched first.
pub fn greedy_matches(pred: &[Point3], ann: &[Point3], tau: f64) -> usize {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, a) in ann.iter().enumerate() {
            let d = vec3::dist(*p, *a);
            if d <= tau {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_p = alloc::vec![false; pred.len()];
    let mut used_a = alloc::vec![false; ann.len()];
    let mut matches = 0;
    for (_, i, j) in candidates {
        if !used_p[i] && !used_a[j] {
            used_p[i] = true;
            used_a[j] = true;
            matches += 1;
        }
    }
    matches
}

/// Keypoint IoU of one object: `matches / (K + |ann| - matches)`.
pub fn miou(pred: &KeypointSet, ann: &AnnotationSet, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        bail!(Argument, "mIoU threshold must be positive, got {tau}");
    }
    if pred.is_empty() {
        bail!(Argument, "no predicted keypoints");
    }
    if ann.is_empty() {
        bail!(Argument, "no annotations for `{}`", ann.cloud_id);
    }
    let positions: Vec<Point3> = ann.keypoints().iter().map(|(_, p)| *p).collect();
    let m = greedy_matches(&pred.keypoints, &positions, tau);
    Ok(m as f64 / (pred.len() + positions.len() - m) as f64)
}

/// Part label of the cloud point nearest to `q`.
fn label_at(cloud: &PointCloud, labels: &[i64], q: Point3) -> i64 {
    labels[nearest_channel(cloud.points(), q)]
}

/// Fraction of channels landing on the same part in both objects.
pub fn part_correspondence(pred_a: &KeypointSet, cloud_a: &PointCloud, pred_b: &KeypointSet, cloud_b: &PointCloud) -> Result<f64> {
    let (Some(la), Some(lb)) = (cloud_a.part_labels(), cloud_b.part_labels()) else {
        bail!(Argument, "part correspondence needs part labels on both clouds");
    };
    if pred_a.len() != pred_b.len() || pred_a.is_empty() {
        bail!(Argument, "keypoint counts differ or are zero: {} vs {}", pred_a.len(), pred_b.len());
    }
    let agree = pred_a
        .keypoints
        .iter()
        .zip(&pred_b.keypoints)
        .filter(|(a, b)| label_at(cloud_a, la, **a) == label_at(cloud_b, lb, **b))
        .count();
    Ok(agree as f64 / pred_a.len() as f64)
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the combined value.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Repeatability of a detector under Gaussian noise: for each sigma, the
/// fraction of channels whose noisy position stays within `threshold` of the
/// clean one, averaged over channels and clouds. Each cloud uses the same
/// noise seed at every sigma.
pub fn repeatability<D>(detect: D, clouds: &[PointCloud], sigmas: &[f64], threshold: f64, seed: u64) -> Result<Vec<(f64, f64)>>
where
    D: Fn(&PointCloud) -> Result<KeypointSet>,
{
    if clouds.is_empty() {
        bail!(Argument, "no clouds to evaluate");
    }
    if sigmas.is_empty() {
        bail!(Argument, "no noise levels given");
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        bail!(Argument, "noise levels must be non-negative");
    }
    if sigmas.windows(2).any(|w| w[1] < w[0]) {
        bail!(Argument, "noise levels must be sorted ascending");
    }
    if !(threshold > 0.0) {
        bail!(Argument, "repeatability threshold must be positive");
    }
    let clean: Vec<KeypointSet> = clouds.iter().map(&detect).collect::<Result<_>>()?;
    let mut curve = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut total = 0.0;
        for (ci, (cloud, kp)) in clouds.iter().zip(&clean).enumerate() {
            let noisy = add_gaussian_noise(cloud, sigma, derive_seed(seed, ci as u64))?;
            let kp_noisy = detect(&noisy)?;
            if kp_noisy.len() != kp.len() {
                bail!(Argument, "detector changed keypoint count under noise");
            }
            let kept = kp
                .keypoints
                .iter()
                .zip(&kp_noisy.keypoints)
                .filter(|(a, b)| vec3::dist(**a, **b) <= threshold)
                .count();
            total += kept as f64 / kp.len() as f64;
        }
        curve.push((sigma, total / clouds.len() as f64));
    }
    Ok(curve)
}

/// Dataset-level DAS summary.
#[derive(Clone, Debug, PartialEq)]
pub struct DasSummary {
    pub mean: f64,
    pub evaluated: usize,
    pub undefined: usize,
    pub references_per_source: usize,
}

/// Average DAS over every source object and `references` seeded reference
/// draws (distinct from the source) each. Undefined pairs are counted and
/// left out of the mean.
pub fn das_dataset(preds: &[KeypointSet], anns: &[AnnotationSet], references: usize, seed: u64) -> Result<DasSummary> {
    if preds.len() != anns.len() {
        bail!(Argument, "{} predictions for {} annotation sets", preds.len(), anns.len());
    }
    if preds.len() < 2 {
        bail!(Argument, "DAS needs at least 2 objects");
    }
    if references == 0 {
        bail!(Argument, "at least one reference per source is required");
    }
    let n = preds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut evaluated, mut undefined) = (0.0, 0, 0);
    for src in 0..n {
        for _ in 0..references {
            let mut r = rng.random_range(0..n - 1);
            if r >= src {
                r += 1;
            }
            match das(&preds[src], &preds[r], &anns[src], &anns[r]) {
                Ok(v) => {
                    sum += v;
                    evaluated += 1;
                }
                Err(Error::UndefinedMetric(_)) => undefined += 1,
                Err(e) => return Err(e),
            }
        }
    }
    if evaluated == 0 {
        bail!(UndefinedMetric, "no source/reference pair shares a semantic id");
    }
    Ok(DasSummary { mean: sum / evaluated as f64, evaluated, undefined, references_per_source: references })
}

/// Mean per-object IoU.
pub fn miou_dataset(preds: &[KeypointSet], anns: &[AnnotationSet], tau: f64) -> Result<f64> {
    if preds.len() != anns.len() || preds.is_empty() {
        bail!(Argument, "{} predictions for {} annotation sets", preds.len(), anns.len());
    }
    let mut sum = 0.0;
    for (p, a) in preds.iter().zip(anns) {
        sum += miou(p, a, tau)?;
    }
    Ok(sum / preds.len() as f64)
}

/// Mean part correspondence over `pairs` seeded pairs of distinct objects.
pub fn part_correspondence_dataset(preds: &[KeypointSet], clouds: &[PointCloud], pairs: usize, seed: u64) -> Result<f64> {
    if preds.len() != clouds.len() || preds.len() < 2 {
        bail!(Argument, "part correspondence needs at least 2 objects with predictions");
    }
    if pairs == 0 {
        bail!(Argument, "at least one pair is required");
    }
    let n = preds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..pairs {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        sum += part_correspondence(&preds[a], &clouds[a], &preds[b], &clouds[b])?;
    }
    Ok(sum / pairs as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryScores {
    pub das: Option<f64>,
    pub miou: Option<f64>,
    pub part_corr: Option<f64>,
    /// Source/reference pairs without common annotations.
    pub das_undefined: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub per_category: BTreeMap<String, CategoryScores>,
    pub repeatability_curve: Vec<(f64, f64)>,
    pub miou_tau: f64,
    pub repeatability_threshold: f64,
    pub das_references: usize,
    pub part_pairs: usize,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self {
            miou_tau: MIOU_TAU,
            repeatability_threshold: REPEATABILITY_THRESHOLD,
            das_references: DAS_REFERENCES,
            part_pairs: PART_PAIRS,
            ..Default::default()
        }
    }

    fn mean_of(&self, pick: impl Fn(&CategoryScores) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.per_category.values().filter_map(pick).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn mean_das(&self) -> Option<f64> {
        self.mean_of(|c| c.das)
    }

    pub fn mean_miou(&self) -> Option<f64> {
        self.mean_of(|c| c.miou)
    }

    pub fn mean_part_corr(&self) -> Option<f64> {
        self.mean_of(|c| c.part_corr)
    }
}
