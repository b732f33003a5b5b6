//! Composite Chamfer distance and the training objective.
//!
//! Both CCD terms are plain sums over points (no averaging):
//!
//! * fidelity: `sum_i a_i sum_{q in segment i} min_p |q - p|`
//! * coverage: for each target point, segments are visited nearest first and
//!   their distances are weighted by activation until the weights reach 1; the
//!   last weight is clipped so the visited weights sum to exactly 1. When all
//!   activations together stay below 1 every segment is used unclipped.
//!
//! Distance ties in the visiting order keep the segment order.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{bail, Result};
use crate::geometry::PointCloud;
use crate::skeleton::SkeletonReconstruction;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vec3::{self, Point3};

/// CCD values with their partial derivatives.
#[derive(Clone, Debug, Default)]
pub struct CcdParts {
    pub fidelity: f64,
    pub coverage: f64,
    pub fidelity_grad_points: Vec<Point3>,
    pub fidelity_grad_activations: Vec<f64>,
    pub coverage_grad_points: Vec<Point3>,
    pub coverage_grad_activations: Vec<f64>,
}

#[inline]
fn unit_toward(from: Point3, to: Point3, d: f64) -> Point3 {
    if d > 0.0 {
        vec3::scale(vec3::sub(to, from), 1.0 / d)
    } else {
        [0.0; 3]
    }
}

/// Evaluates both CCD terms for a flattened reconstruction.
pub fn ccd_parts(points: &[Point3], ranges: &[Range<usize>], activations: &[f64], target: &[Point3]) -> Result<CcdParts> {
    if target.is_empty() {
        bail!(Argument, "empty target cloud");
    }
    if points.is_empty() || ranges.is_empty() {
        bail!(Argument, "empty reconstruction");
    }
    if ranges.len() != activations.len() {
        bail!(Argument, "{} activations for {} segments", activations.len(), ranges.len());
    }
    let s = ranges.len();
    let n = target.len();

    // Nearest target per reconstruction point, nearest point per
    // (target, segment).
    let mut fid_best = vec![(f64::INFINITY, 0usize); points.len()];
    let mut cov_best = vec![(f64::INFINITY, 0usize); n * s];
    for (seg, r) in ranges.iter().enumerate() {
        for qi in r.clone() {
            let q = points[qi];
            let fb = &mut fid_best[qi];
            for (pi, p) in target.iter().enumerate() {
                let d2 = vec3::dist2(q, *p);
                if d2 < fb.0 {
                    *fb = (d2, pi);
                }
                let cb = &mut cov_best[pi * s + seg];
                if d2 < cb.0 {
                    *cb = (d2, qi);
                }
            }
        }
    }

    let mut out = CcdParts {
        fidelity_grad_points: vec![[0.0; 3]; points.len()],
        fidelity_grad_activations: vec![0.0; s],
        coverage_grad_points: vec![[0.0; 3]; points.len()],
        coverage_grad_activations: vec![0.0; s],
        ..Default::default()
    };

    for (seg, r) in ranges.iter().enumerate() {
        let a = activations[seg];
        let mut seg_sum = 0.0;
        for qi in r.clone() {
            let (d2, pi) = fid_best[qi];
            let d = libm::sqrt(d2);
            seg_sum += d;
            out.fidelity_grad_points[qi] = vec3::scale(unit_toward(target[pi], points[qi], d), a);
        }
        out.fidelity += a * seg_sum;
        out.fidelity_grad_activations[seg] = seg_sum;
    }

    let mut order: Vec<usize> = (0..s).collect();
    let mut dist = vec![0.0; s];
    for (pi, p) in target.iter().enumerate() {
        let row = &cov_best[pi * s..(pi + 1) * s];
        for (d, (d2, _)) in dist.iter_mut().zip(row) {
            *d = libm::sqrt(*d2);
        }
        order.sort_by(|&x, &y| dist[x].total_cmp(&dist[y]).then(x.cmp(&y)));
        let mut acc = 0.0;
        let mut prefix_end = s;
        let mut truncated = false;
        for (rank, &seg) in order.iter().enumerate() {
            if acc + activations[seg] >= 1.0 {
                prefix_end = rank + 1;
                truncated = true;
                break;
            }
            acc += activations[seg];
        }
        let last = order[prefix_end - 1];
        for (rank, &seg) in order[..prefix_end].iter().enumerate() {
            let is_last = truncated && rank + 1 == prefix_end;
            let w = if is_last { 1.0 - acc } else { activations[seg] };
            let d = dist[seg];
            out.coverage += w * d;
            if !is_last {
                out.coverage_grad_activations[seg] += if truncated { d - dist[last] } else { d };
            }
            let qi = row[seg].1;
            let g = vec3::scale(unit_toward(*p, points[qi], d), w);
            out.coverage_grad_points[qi] = vec3::add(out.coverage_grad_points[qi], g);
        }
    }
    Ok(out)
}

fn parts_for(rec: &SkeletonReconstruction, target: &PointCloud) -> Result<CcdParts> {
    let (points, ranges) = rec.flatten();
    ccd_parts(&points, &ranges, &rec.activations(), target.points())
}

pub fn fidelity_loss(rec: &SkeletonReconstruction, target: &PointCloud) -> Result<f64> {
    Ok(parts_for(rec, target)?.fidelity)
}

pub fn coverage_loss(rec: &SkeletonReconstruction, target: &PointCloud) -> Result<f64> {
    if !(rec.activations().iter().sum::<f64>() > 0.0) {
        bail!(Argument, "coverage needs a positive total activation");
    }
    Ok(parts_for(rec, target)?.coverage)
}

/// Composite Chamfer distance: fidelity plus coverage.
pub fn ccd(rec: &SkeletonReconstruction, target: &PointCloud) -> Result<f64> {
    let p = parts_for(rec, target)?;
    Ok(p.fidelity + p.coverage)
}

/// `CCD(P1, REC1) + CCD(P2, REC2)`.
pub fn self_loss(p1: &PointCloud, rec1: &SkeletonReconstruction, p2: &PointCloud, rec2: &SkeletonReconstruction) -> Result<f64> {
    check_pair(rec1, rec2)?;
    Ok(ccd(rec1, p1)? + ccd(rec2, p2)?)
}

/// `CCD(P1, REC1') + CCD(P2, REC2')`.
pub fn mutual_loss(
    p1: &PointCloud,
    rec1_prime: &SkeletonReconstruction,
    p2: &PointCloud,
    rec2_prime: &SkeletonReconstruction,
) -> Result<f64> {
    check_pair(rec1_prime, rec2_prime)?;
    Ok(ccd(rec1_prime, p1)? + ccd(rec2_prime, p2)?)
}

fn check_pair(a: &SkeletonReconstruction, b: &SkeletonReconstruction) -> Result<()> {
    if a.segments.len() != b.segments.len() {
        bail!(Argument, "reconstructions have {} and {} segments", a.segments.len(), b.segments.len());
    }
    Ok(())
}

/// Records both CCD terms on the tape. Returns `(fidelity, coverage)`.
pub fn ccd_forward(
    tape: &mut Tape,
    points: Var,
    activations: Var,
    ranges: &[Range<usize>],
    target: &[Point3],
) -> Result<(Var, Var)> {
    let pts = tape.value(points).to_points();
    let acts = tape.value(activations).data().to_vec();
    let parts = ccd_parts(&pts, ranges, &acts, target)?;
    let s = acts.len();
    let fid = tape.custom_scalar(
        parts.fidelity,
        vec![
            (points, Tensor::from_points(&parts.fidelity_grad_points)),
            (activations, Tensor::from_vec(1, s, parts.fidelity_grad_activations)?),
        ],
    );
    let cov = tape.custom_scalar(
        parts.coverage,
        vec![
            (points, Tensor::from_points(&parts.coverage_grad_points)),
            (activations, Tensor::from_vec(1, s, parts.coverage_grad_activations)?),
        ],
    );
    Ok((fid, cov))
}

/// Weights of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_self: f64,
    pub lambda_mutual: f64,
    pub mu_skeleton: f64,
    pub mu_keypoint: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_self: 0.5, lambda_mutual: 0.5, mu_skeleton: 0.01, mu_keypoint: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_self", self.lambda_self),
            ("lambda_mutual", self.lambda_mutual),
            ("mu_skeleton", self.mu_skeleton),
            ("mu_keypoint", self.mu_keypoint),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                bail!(Argument, "loss weight {name} must be finite and non-negative, got {w}");
            }
        }
        Ok(())
    }
}

/// Raw loss components of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossInputs {
    /// Fidelity summed over every CCD evaluation of the step.
    pub fidelity: f64,
    /// Coverage summed over every CCD evaluation of the step.
    pub coverage: f64,
    pub self_loss: f64,
    pub mutual_loss: f64,
    /// Squared L2 norm of all skeleton point offsets.
    pub skeleton_offsets_sq: f64,
    /// Squared L2 norm of the keypoint offsets `O_K`.
    pub keypoint_offsets_sq: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub fidelity: f64,
    pub coverage: f64,
    pub self_loss: f64,
    pub mutual_loss: f64,
    pub reg_skeleton_offsets: f64,
    pub reg_keypoint_offsets: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("fidelity", self.fidelity),
            ("coverage", self.coverage),
            ("self", self.self_loss),
            ("mutual", self.mutual_loss),
            ("reg_skeleton_offsets", self.reg_skeleton_offsets),
            ("reg_keypoint_offsets", self.reg_keypoint_offsets),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `lambda_s * self + lambda_m * mutual + mu_1 |skeleton offsets|^2 + mu_2 |O_K|^2`.
pub fn total_loss(inputs: &LossInputs, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let total = weights.lambda_self * inputs.self_loss
        + weights.lambda_mutual * inputs.mutual_loss
        + weights.mu_skeleton * inputs.skeleton_offsets_sq
        + weights.mu_keypoint * inputs.keypoint_offsets_sq;
    Ok(LossBreakdown {
        fidelity: inputs.fidelity,
        coverage: inputs.coverage,
        self_loss: inputs.self_loss,
        mutual_loss: inputs.mutual_loss,
        reg_skeleton_offsets: inputs.skeleton_offsets_sq,
        reg_keypoint_offsets: inputs.keypoint_offsets_sq,
        total,
    })
}
