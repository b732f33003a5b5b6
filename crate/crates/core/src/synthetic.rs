//! Deterministic wire-frame shape families with known keypoints and parts.
//!
//! Every instance is a set of straight wires sampled uniformly by length,
//! jittered by a small thickness, and normalized into the unit box. The
//! annotated structural points (corners, junctions, ends) are themselves
//! included as cloud points so that their part labels are unambiguous.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::geometry::{AnnotationSet, PointCloud, UnitBoxTransform};
use crate::vec3::{self, Point3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Box,
    Tee,
    Cross,
    AirplaneToy,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Tee => "tee",
            Family::Cross => "cross",
            Family::AirplaneToy => "airplane-toy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "box" => Some(Family::Box),
            "tee" => Some(Family::Tee),
            "cross" => Some(Family::Cross),
            "airplane-toy" => Some(Family::AirplaneToy),
            _ => None,
        }
    }

    pub const ALL: [Family; 4] = [Family::Box, Family::Tee, Family::Cross, Family::AirplaneToy];

    /// Number of annotated structural points per instance.
    pub fn keypoint_count(self) -> usize {
        match self {
            Family::Box => 8,
            Family::Tee => 4,
            Family::Cross => 5,
            Family::AirplaneToy => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub family: Family,
    /// Range of the primary length (box x, tee bar, cross horizontal span,
    /// airplane fuselage).
    pub length: (f64, f64),
    /// Range of the secondary length (box y/z, tee stem, cross vertical span,
    /// airplane wing span).
    pub width: (f64, f64),
    /// Per-axis uniform jitter around each wire.
    pub thickness: f64,
    pub points: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(family: Family, points: usize, seed: u64) -> Self {
        Self { family, length: (0.6, 1.2), width: (0.4, 1.0), thickness: 0.01, points, seed }
    }
}

/// One wire: endpoints and part label.
struct Wire {
    a: Point3,
    b: Point3,
    part: i64,
}

struct Shape {
    wires: Vec<Wire>,
    /// `(semantic id, position, part label)`.
    keypoints: Vec<(i64, Point3, i64)>,
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn shape(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Shape {
    let l = draw(rng, spec.length);
    let w = draw(rng, spec.width);
    match spec.family {
        Family::Box => {
            let d = draw(rng, spec.width);
            let (hx, hy, hz) = (l / 2.0, d / 2.0, w / 2.0);
            let corner = |i: usize| {
                [
                    if i & 1 == 0 { -hx } else { hx },
                    if i & 2 == 0 { -hy } else { hy },
                    if i & 4 == 0 { -hz } else { hz },
                ]
            };
            let part_of = |i: usize| if i & 4 != 0 { 0 } else { 1 };
            let mut wires = Vec::new();
            for i in 0..8usize {
                for bit in [1usize, 2, 4] {
                    let j = i | bit;
                    if j != i {
                        let part = if bit == 4 { 2 } else { part_of(i) };
                        wires.push(Wire { a: corner(i), b: corner(j), part });
                    }
                }
            }
            let keypoints = (0..8).map(|i| (i as i64, corner(i), part_of(i))).collect();
            Shape { wires, keypoints }
        }
        Family::Tee => {
            let left = [-l / 2.0, 0.0, 0.0];
            let right = [l / 2.0, 0.0, 0.0];
            let junction = [0.0, 0.0, 0.0];
            let foot = [0.0, -w, 0.0];
            Shape {
                wires: alloc::vec![
                    Wire { a: left, b: junction, part: 0 },
                    Wire { a: junction, b: right, part: 0 },
                    Wire { a: junction, b: foot, part: 1 },
                ],
                keypoints: alloc::vec![(0, left, 0), (1, right, 0), (2, junction, 0), (3, foot, 1)],
            }
        }
        Family::Cross => {
            let arms = [draw(rng, spec.length), draw(rng, spec.length), draw(rng, spec.width), draw(rng, spec.width)];
            let center = [0.0; 3];
            let left = [-arms[0] / 2.0, 0.0, 0.0];
            let right = [arms[1] / 2.0, 0.0, 0.0];
            let up = [0.0, arms[2] / 2.0, 0.0];
            let down = [0.0, -arms[3] / 2.0, 0.0];
            Shape {
                wires: alloc::vec![
                    Wire { a: center, b: left, part: 0 },
                    Wire { a: center, b: right, part: 0 },
                    Wire { a: center, b: up, part: 1 },
                    Wire { a: center, b: down, part: 1 },
                ],
                keypoints: alloc::vec![(0, center, 0), (1, left, 0), (2, right, 0), (3, up, 1), (4, down, 1)],
            }
        }
        Family::AirplaneToy => {
            let wing_x = l * rng.random_range(0.0..0.15);
            let fin = 0.3 * l;
            let nose = [l / 2.0, 0.0, 0.0];
            let tail = [-l / 2.0, 0.0, 0.0];
            let root = [wing_x, 0.0, 0.0];
            let left = [wing_x, 0.0, -w / 2.0];
            let right = [wing_x, 0.0, w / 2.0];
            let fin_top = [-l / 2.0, fin, 0.0];
            Shape {
                wires: alloc::vec![
                    Wire { a: tail, b: nose, part: 0 },
                    Wire { a: root, b: left, part: 1 },
                    Wire { a: root, b: right, part: 1 },
                    Wire { a: tail, b: fin_top, part: 2 },
                ],
                keypoints: alloc::vec![(0, nose, 0), (1, tail, 0), (2, left, 1), (3, right, 1), (4, fin_top, 2)],
            }
        }
    }
}

fn sample(shape: &Shape, points: usize, thickness: f64, rng: &mut ChaCha8Rng) -> (Vec<Point3>, Vec<i64>) {
    let mut pts: Vec<Point3> = shape.keypoints.iter().map(|k| k.1).collect();
    let mut labels: Vec<i64> = shape.keypoints.iter().map(|k| k.2).collect();
    let lengths: Vec<f64> = shape.wires.iter().map(|w| vec3::dist(w.a, w.b)).collect();
    let total: f64 = lengths.iter().sum();
    while pts.len() < points {
        let mut u = rng.random_range(0.0..total);
        let mut idx = 0;
        while idx + 1 < lengths.len() && u >= lengths[idx] {
            u -= lengths[idx];
            idx += 1;
        }
        let w = &shape.wires[idx];
        let t: f64 = rng.random_range(0.0..1.0);
        let mut p = vec3::add(w.a, vec3::scale(vec3::sub(w.b, w.a), t));
        if thickness > 0.0 {
            for c in p.iter_mut() {
                *c += rng.random_range(-thickness..thickness);
            }
        }
        pts.push(p);
        labels.push(w.part);
    }
    (pts, labels)
}

/// Generates `count` normalized instances with their annotations.
pub fn generate(spec: &SyntheticSpec, count: usize) -> Result<(Vec<PointCloud>, Vec<AnnotationSet>)> {
    for (name, r) in [("length", spec.length), ("width", spec.width)] {
        if !(r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite()) {
            bail!(Argument, "degenerate {name} range ({}, {})", r.0, r.1);
        }
    }
    if !(spec.thickness >= 0.0) {
        bail!(Argument, "thickness must be non-negative");
    }
    let k = spec.family.keypoint_count();
    if spec.points < k.max(2) {
        bail!(Argument, "{} points cannot hold {} structural points", spec.points, k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let category: String = spec.family.as_str().into();
    let mut clouds = Vec::with_capacity(count);
    let mut anns = Vec::with_capacity(count);
    for i in 0..count {
        let s = shape(spec, &mut rng);
        let (pts, labels) = sample(&s, spec.points, spec.thickness, &mut rng);
        let t = UnitBoxTransform::fit(&pts)?;
        let pts = pts.into_iter().map(|p| t.apply(p)).collect();
        let id = format!("{}-{:04}", category, i);
        clouds.push(PointCloud::new(pts, Some(labels))?.with_meta(category.clone(), id.clone()));
        let kps = s.keypoints.iter().map(|(sid, p, _)| (*sid, t.apply(*p))).collect();
        anns.push(AnnotationSet::new(id, kps)?);
    }
    Ok((clouds, anns))
}
