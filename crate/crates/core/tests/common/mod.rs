//! Brute-force reference implementations and a finite-difference checker
//! shared by the integration tests.
#![allow(dead_code)]

use std::ops::Range;

use mrkp_core::losses::ccd_forward;
use mrkp_core::mutual::{self, Direction};
use mrkp_core::nn::{Bindings, ParamStore};
use mrkp_core::skeleton::{decode_forward, DecoderConfig, Layout};
use mrkp_core::tape::{Tape, Var};
use mrkp_core::tensor::Tensor;
use mrkp_core::vec3::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dist(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Fidelity: activation-weighted sum of each skeleton point's distance to
/// its nearest target point.
pub fn fidelity_oracle(segments: &[Vec<Point3>], acts: &[f64], target: &[Point3]) -> f64 {
    let mut total = 0.0;
    for (seg, a) in segments.iter().zip(acts) {
        for q in seg {
            let nearest = target.iter().map(|p| dist(*p, *q)).fold(f64::INFINITY, f64::min);
            total += a * nearest;
        }
    }
    total
}

/// Coverage: per target point, segments ranked by (distance, index) and
/// weighted by activation until the running weight reaches 1.
pub fn coverage_oracle(segments: &[Vec<Point3>], acts: &[f64], target: &[Point3]) -> f64 {
    let mut total = 0.0;
    for p in target {
        let mut ranked: Vec<(f64, usize)> = segments
            .iter()
            .enumerate()
            .map(|(i, seg)| (seg.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min), i))
            .collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut budget = 1.0;
        for (d, i) in ranked {
            if acts[i] >= budget {
                total += budget * d;
                break;
            }
            total += acts[i] * d;
            budget -= acts[i];
        }
    }
    total
}

/// Greedy max-min selection starting at `first`; ties to the lowest index.
pub fn fps_oracle(points: &[Point3], m: usize, first: usize) -> Vec<usize> {
    let mut chosen = vec![first];
    while chosen.len() < m {
        let mut best = None::<(f64, usize)>;
        for i in 0..points.len() {
            let d = chosen.iter().map(|&c| dist(points[i], points[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.shape();
    let m = b.shape().1;
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(i, t) * b.get(t, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<Point3> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(-scale..scale))).collect()
}

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// A random loss instance: up to 4 segments and up to 10 points each.
pub struct Toy {
    pub segments: Vec<Vec<Point3>>,
    pub acts: Vec<f64>,
    pub target: Vec<Point3>,
}

impl Toy {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let s = rng.random_range(1..=4);
        let segments = (0..s)
            .map(|_| {
                let n = rng.random_range(1..=10);
                random_points(rng, n, 1.0)
            })
            .collect();
        let acts = (0..s).map(|_| rng.random_range(0.01..1.0)).collect();
        let nt = rng.random_range(1..=10);
        let target = random_points(rng, nt, 1.0);
        Toy { segments, acts, target }
    }

    /// Concatenated points and the range of each segment.
    pub fn flatten(&self) -> (Vec<Point3>, Vec<Range<usize>>) {
        let mut pts = Vec::new();
        let mut ranges = Vec::new();
        for s in &self.segments {
            ranges.push(pts.len()..pts.len() + s.len());
            pts.extend_from_slice(s);
        }
        (pts, ranges)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates left out because the function is not smooth there.
    pub kinks: usize,
    pub worst_rel: f64,
    pub failures: usize,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Compares tape gradients of a scalar function of `inputs` with central
/// differences. A coordinate whose one-sided differences disagree sits on a
/// kink or a tie and is skipped.
pub fn grad_check<F>(inputs: &[Tensor], f: F, rel_tol: f64) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    grad_check_strided(inputs, f, rel_tol, 1)
}

/// Like [`grad_check`] but only probes every `stride`-th coordinate.
pub fn grad_check_strided<F>(inputs: &[Tensor], f: F, rel_tol: f64, stride: usize) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let f0 = tape.value(out).item();
    let grads = tape.backward(out);
    let mut report = GradReport::default();
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
        for idx in (0..input.data().len()).step_by(stride) {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[idx] += h;
            let fp = eval(&vals);
            vals[k].data_mut()[idx] -= 2.0 * h;
            let fm = eval(&vals);
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            if (fwd - bwd).abs() > 1e-4 * (fwd.abs() + bwd.abs()) + 1e-5 {
                report.kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[idx];
            let scale = a.abs().max(numeric.abs()).max(1e-2);
            let rel = (a - numeric).abs() / scale;
            report.checked += 1;
            report.worst_rel = report.worst_rel.max(rel);
            if rel > rel_tol {
                report.failures += 1;
            }
        }
    }
    report
}

// Gradient-check suites over random small instances.

pub const GRAD_TOL: f64 = 1e-3;

/// Parameters with every entry redrawn, so zero-initialized layers also
/// carry signal.
pub fn randomized(store: &ParamStore, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Tensor>) {
    store
        .iter()
        .map(|(k, t)| (k.clone(), random_tensor(rng, t.rows(), t.cols(), 0.4)))
        .unzip()
}

pub fn bind(names: &[String], vars: &[Var]) -> Bindings {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

/// Reduces a `M x 3` node to a scalar with fixed random weights.
pub fn probe(tape: &mut Tape, x: Var, w: &Tensor) -> Var {
    let w = tape.constant(w.clone());
    let y = tape.matmul(x, w);
    tape.sum_squares(y)
}

pub fn ccd_suite(count: usize, seed: u64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for _ in 0..count {
        let s = rng.random_range(1..=4);
        let counts: Vec<usize> = (0..s).map(|_| rng.random_range(2..=6)).collect();
        let m: usize = counts.iter().sum();
        let mut ranges = Vec::new();
        let mut start = 0;
        for c in &counts {
            ranges.push(start..start + c);
            start += c;
        }
        let points = random_tensor(&mut rng, m, 3, 1.0);
        let acts = Tensor::from_vec(1, s, (0..s).map(|_| rng.random_range(0.05..0.9)).collect()).unwrap();
        let nt = rng.random_range(3..=10);
        let target = random_points(&mut rng, nt, 1.0);
        reports.push(grad_check(
            &[points, acts],
            |tape, v| {
                let (f, c) = ccd_forward(tape, v[0], v[1], &ranges, &target).unwrap();
                tape.combine(vec![(f, 1.0), (c, 1.0)])
            },
            GRAD_TOL,
        ));
    }
    reports
}

pub fn keypoint_suite(count: usize, seed: u64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for _ in 0..count {
        let (k, n) = (rng.random_range(2..=5), rng.random_range(3..=12));
        let logits = random_tensor(&mut rng, k, n, 2.0);
        let points = random_tensor(&mut rng, n, 3, 1.0);
        let w = random_tensor(&mut rng, 3, 2, 1.0);
        reports.push(grad_check(
            &[logits, points],
            |tape, v| {
                let f = tape.softmax_rows(v[0]);
                let kp = tape.matmul(f, v[1]);
                probe(tape, kp, &w)
            },
            GRAD_TOL,
        ));
    }
    reports
}

pub fn reshape_suite(count: usize, seed: u64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    mutual::register(&mut store, &mut rng);
    let mut reports = Vec::new();
    for i in 0..count {
        let direction = if i % 2 == 0 { Direction::Verbatim } else { Direction::Mirrored };
        let k = rng.random_range(2..=5);
        let (names, mut inputs) = randomized(&store, &mut rng);
        inputs.push(random_tensor(&mut rng, k, 3, 0.5));
        inputs.push(random_tensor(&mut rng, k, 3, 0.5));
        let (w1, w2) = (random_tensor(&mut rng, 3, 2, 1.0), random_tensor(&mut rng, 3, 2, 1.0));
        let np = names.len();
        reports.push(grad_check_strided(
            &inputs,
            |tape, v| {
                let b = bind(&names, &v[..np]);
                let (_, ok) = mutual::offset_forward(tape, &b, v[np], v[np + 1]);
                let (a, c) = mutual::reshape_forward(tape, v[np], v[np + 1], ok, direction);
                let pa = probe(tape, a, &w1);
                let pc = probe(tape, c, &w2);
                tape.combine(vec![(pa, 1.0), (pc, 0.5)])
            },
            GRAD_TOL,
            7,
        ));
    }
    reports
}

pub fn decode_suite(count: usize, seed: u64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DecoderConfig { interval: 0.2, cap_per_segment: 8, hidden: 8 };
    let mut reports = Vec::new();
    for _ in 0..count {
        let k = rng.random_range(2..=4);
        let segments = k * (k - 1) / 2;
        let code_width = 4;
        let mut store = ParamStore::new();
        cfg.register(&mut store, segments, code_width, &mut rng);
        let (names, mut inputs) = randomized(&store, &mut rng);
        let np = names.len();
        inputs.push(random_tensor(&mut rng, k, 3, 0.5));
        inputs.push(random_tensor(&mut rng, 1, code_width, 1.0));
        let kp0 = inputs[np].to_points();
        let w = random_tensor(&mut rng, 3, 2, 1.0);
        assert_eq!(Layout::from_keypoints(&kp0, &cfg).pairs.len(), segments);
        reports.push(grad_check_strided(
            &inputs,
            |tape, v| {
                let b = bind(&names, &v[..np]);
                let acts = tape.constant(Tensor::full(1, segments, 1.0));
                let dec = decode_forward(tape, &b, &cfg, v[np], acts, v[np + 1]);
                probe(tape, dec.points, &w)
            },
            GRAD_TOL,
            3,
        ));
    }
    reports
}

