//! Point-cloud data model, normalization, sampling and noise injection.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::vec3::{self, Point3};

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    part_labels: Option<Vec<i64>>,
    pub category: String,
    pub id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, part_labels: Option<Vec<i64>>) -> Result<Self> {
        if points.len() < 2 {
            bail!(Degenerate, "a point cloud needs at least 2 points, got {}", points.len());
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            bail!(Argument, "point {i} has a non-finite coordinate");
        }
        if let Some(labels) = &part_labels {
            if labels.len() != points.len() {
                bail!(Argument, "{} part labels for {} points", labels.len(), points.len());
            }
        }
        Ok(Self { points, part_labels, category: String::new(), id: String::new() })
    }

    pub fn with_meta(mut self, category: impl Into<String>, id: impl Into<String>) -> Self {
        self.category = category.into();
        self.id = id.into();
        self
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn part_labels(&self) -> Option<&[i64]> {
        self.part_labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        bounds(&self.points)
    }

    /// Same metadata, new coordinates; labels are kept.
    fn with_points(&self, points: Vec<Point3>) -> Self {
        Self {
            points,
            part_labels: self.part_labels.clone(),
            category: self.category.clone(),
            id: self.id.clone(),
        }
    }

    /// Subset by index, carrying part labels through.
    pub fn select(&self, index: &[usize]) -> Self {
        Self {
            points: index.iter().map(|&i| self.points[i]).collect(),
            part_labels: self.part_labels.as_ref().map(|l| index.iter().map(|&i| l[i]).collect()),
            category: self.category.clone(),
            id: self.id.clone(),
        }
    }
}

pub fn bounds(points: &[Point3]) -> (Point3, Point3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Similarity transform mapping a cloud into the unit box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitBoxTransform {
    pub center: Point3,
    pub scale: f64,
}

impl UnitBoxTransform {
    pub fn fit(points: &[Point3]) -> Result<Self> {
        let (lo, hi) = bounds(points);
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if !(extent > 0.0) {
            bail!(Degenerate, "all points are identical; cannot normalize");
        }
        let center = vec3::scale(vec3::add(lo, hi), 0.5);
        Ok(Self { center, scale: 1.0 / extent })
    }

    #[inline]
    pub fn apply(&self, p: Point3) -> Point3 {
        vec3::scale(vec3::sub(p, self.center), self.scale)
    }

    #[inline]
    pub fn invert(&self, p: Point3) -> Point3 {
        vec3::add(vec3::scale(p, 1.0 / self.scale), self.center)
    }
}

/// Centers the cloud on its bounding-box center and scales it uniformly so
/// that the longest bounding-box side is 1.
pub fn normalize_unit_box(cloud: &PointCloud) -> Result<PointCloud> {
    let t = UnitBoxTransform::fit(&cloud.points)?;
    Ok(cloud.with_points(cloud.points.iter().map(|&p| t.apply(p)).collect()))
}

/// Indices chosen by farthest point sampling. The first index is a seeded
/// uniform draw; ties in the max-min distance go to the lowest index.
pub fn farthest_point_indices(points: &[Point3], m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        bail!(Argument, "cannot sample {m} of {n} points");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    Ok(greedy_max_min(points, m, first))
}

/// Greedy max-min selection starting at `first`.
pub(crate) fn greedy_max_min(points: &[Point3], m: usize, first: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(m);
    let mut nearest = alloc::vec![f64::INFINITY; points.len()];
    let mut current = first;
    for _ in 0..m {
        chosen.push(current);
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = vec3::dist2(*p, c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        current = best;
    }
    chosen
}

pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    let index = farthest_point_indices(&cloud.points, m, seed)?;
    Ok(cloud.select(&index))
}

/// Perturbs every coordinate with independent `N(0, sigma^2)` draws.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        bail!(Argument, "noise sigma must be finite and non-negative, got {sigma}");
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = match Normal::new(0.0, sigma) {
        Ok(n) => n,
        Err(_) => bail!(Argument, "invalid noise sigma {sigma}"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in q.iter_mut() {
                *c += normal.sample(&mut rng);
            }
            q
        })
        .collect();
    Ok(cloud.with_points(points))
}

/// Human keypoint annotations for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub cloud_id: String,
    keypoints: Vec<(i64, Point3)>,
}

impl AnnotationSet {
    pub fn new(cloud_id: impl Into<String>, keypoints: Vec<(i64, Point3)>) -> Result<Self> {
        for (i, (id, p)) in keypoints.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                bail!(Argument, "annotation {id} has a non-finite coordinate");
            }
            if keypoints[..i].iter().any(|(other, _)| other == id) {
                bail!(Argument, "duplicate semantic id {id}");
            }
        }
        Ok(Self { cloud_id: cloud_id.into(), keypoints })
    }

    pub fn keypoints(&self) -> &[(i64, Point3)] {
        &self.keypoints
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn position(&self, semantic_id: i64) -> Option<Point3> {
        self.keypoints.iter().find(|(id, _)| *id == semantic_id).map(|(_, p)| *p)
    }

    pub fn transformed(&self, t: &UnitBoxTransform) -> Self {
        Self {
            cloud_id: self.cloud_id.clone(),
            keypoints: self.keypoints.iter().map(|(id, p)| (*id, t.apply(*p))).collect(),
        }
    }
}

/// `K` ordered keypoints; the index is the semantic channel.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub keypoints: Vec<Point3>,
    pub source_id: String,
}

impl KeypointSet {
    pub fn new(keypoints: Vec<Point3>, source_id: impl Into<String>) -> Self {
        Self { keypoints, source_id: source_id.into() }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points, None).unwrap()
    }

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random::<f64>() * 3.0, rng.random::<f64>() - 2.0, rng.random::<f64>() * 0.5]).collect()
    }

    #[test]
    fn rejects_degenerate_clouds() {
        assert!(matches!(PointCloud::new(vec![[0.0; 3]], None), Err(crate::Error::Degenerate(_))));
        assert!(PointCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]], None).is_err());
        assert!(PointCloud::new(vec![[0.0; 3], [1.0; 3]], Some(vec![1])).is_err());
    }

    #[test]
    fn cube_corners_map_to_half_unit_cube() {
        let mut pts = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        let out = normalize_unit_box(&cloud(pts.clone())).unwrap();
        for (a, b) in out.points().iter().zip(&pts) {
            assert_eq!(*a, vec3::scale(*b, 0.5));
        }
    }

    #[test]
    fn segment_normalizes_to_unit_length() {
        let out = normalize_unit_box(&cloud(vec![[0.0; 3], [2.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.points(), &[[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]]);
    }

    #[test]
    fn normalized_random_cloud_has_unit_extent() {
        let out = normalize_unit_box(&cloud(random_points(100, 3))).unwrap();
        let (lo, hi) = out.bounds();
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        assert!((extent - 1.0).abs() < 1e-6);
        assert!(lo.iter().chain(&hi).all(|c| c.abs() <= 0.5 + 1e-12));
    }

    #[test]
    fn identical_points_cannot_be_normalized() {
        let err = normalize_unit_box(&cloud(vec![[1.0; 3], [1.0; 3]])).unwrap_err();
        assert!(matches!(err, crate::Error::Degenerate(_)));
    }

    #[test]
    fn fps_full_sample_is_a_permutation() {
        let pts = random_points(20, 5);
        let mut idx = farthest_point_indices(&pts, 20, 9).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn fps_collinear_endpoints() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(greedy_max_min(&pts, 2, 0), vec![0, 3]);
        assert_eq!(greedy_max_min(&pts, 2, 3), vec![3, 0]);
    }

    #[test]
    fn fps_rejects_oversampling() {
        let c = cloud(random_points(5, 1));
        assert!(farthest_point_sample(&c, 6, 0).is_err());
        assert!(farthest_point_sample(&c, 0, 0).is_err());
    }

    #[test]
    fn fps_carries_labels() {
        let pts = random_points(10, 2);
        let c = PointCloud::new(pts, Some((0..10).collect())).unwrap();
        let s = farthest_point_sample(&c, 4, 1).unwrap();
        for (p, l) in s.points().iter().zip(s.part_labels().unwrap()) {
            assert_eq!(*p, c.points()[*l as usize]);
        }
    }

    #[test]
    fn zero_noise_is_identity_and_noise_is_deterministic() {
        let c = cloud(random_points(50, 4));
        assert_eq!(add_gaussian_noise(&c, 0.0, 1).unwrap(), c);
        let a = add_gaussian_noise(&c, 0.05, 7).unwrap();
        let b = add_gaussian_noise(&c, 0.05, 7).unwrap();
        assert_eq!(a, b);
        assert!(add_gaussian_noise(&c, -0.1, 7).is_err());
    }

    #[test]
    fn noise_standard_deviation_matches_sigma() {
        let c = cloud(random_points(2048, 8));
        let noisy = add_gaussian_noise(&c, 0.02, 3).unwrap();
        let deltas: Vec<f64> = c
            .points()
            .iter()
            .zip(noisy.points())
            .flat_map(|(a, b)| (0..3).map(move |k| b[k] - a[k]))
            .collect();
        let n = deltas.len() as f64;
        let mean = deltas.iter().sum::<f64>() / n;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let sd = libm::sqrt(var);
        assert!((sd - 0.02).abs() < 0.002, "sd = {sd}");
    }

    #[test]
    fn annotations_reject_duplicate_ids() {
        assert!(AnnotationSet::new("a", vec![(1, [0.0; 3]), (1, [1.0; 3])]).is_err());
    }
}
