//! Keypoint offsets between two shapes and keypoint reshaping for mutual
//! reconstruction.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::geometry::KeypointSet;
use crate::nn::{add_mlp, mlp, Bindings, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vec3::{self, Point3};

/// Widths of the per-channel offset transformation.
pub const OFFSET_WIDTHS: [usize; 4] = [3, 64, 64, 3];

/// Which reshaped set reconstructs which input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `kp1' = kp2 + O`, `kp2' = kp1 - O`; `kp1'` reconstructs the first input.
    Verbatim,
    /// `kp1' = kp1 + O`, `kp2' = kp2 - O`; `kp1'` reconstructs the second input.
    Mirrored,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Verbatim => "verbatim",
            Direction::Mirrored => "mirrored",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "verbatim" => Some(Direction::Verbatim),
            "mirrored" => Some(Direction::Mirrored),
            _ => None,
        }
    }
}

/// Registers `mutual.offset.*`; the last layer starts at zero so the initial
/// reshaping is the identity swap.
pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    add_mlp(store, "mutual.offset", &OFFSET_WIDTHS, true, rng);
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReshapedKeypoints {
    pub kp1_prime: KeypointSet,
    pub kp2_prime: KeypointSet,
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        bail!(Argument, "keypoint count mismatch: {a} vs {b}");
    }
    Ok(())
}

/// Channel-wise difference `kp1 - kp2`.
pub fn point_offsets(kp1: &KeypointSet, kp2: &KeypointSet) -> Result<Vec<Point3>> {
    check_same_len(kp1.len(), kp2.len())?;
    Ok(kp1.keypoints.iter().zip(&kp2.keypoints).map(|(a, b)| vec3::sub(*a, *b)).collect())
}

/// Tape version: returns `(O_P, O_K)` as `K x 3` nodes.
pub fn offset_forward(tape: &mut Tape, b: &Bindings, kp1: Var, kp2: Var) -> (Var, Var) {
    let op = tape.sub(kp1, kp2);
    let ok = mlp(tape, b, "mutual.offset", OFFSET_WIDTHS.len() - 1, op, false);
    (op, ok)
}

/// Transformed keypoint offsets `O_K`, one 3-vector per channel.
pub fn keypoint_offset(kp1: &KeypointSet, kp2: &KeypointSet, params: &ParamStore) -> Result<Vec<Point3>> {
    check_same_len(kp1.len(), kp2.len())?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let a = tape.constant(Tensor::from_points(&kp1.keypoints));
    let c = tape.constant(Tensor::from_points(&kp2.keypoints));
    let (_, ok) = offset_forward(&mut tape, &b, a, c);
    Ok(tape.value(ok).to_points())
}

/// Tape version of [`reshape_keypoints`].
pub fn reshape_forward(tape: &mut Tape, kp1: Var, kp2: Var, ok: Var, direction: Direction) -> (Var, Var) {
    match direction {
        Direction::Verbatim => (tape.add(kp2, ok), tape.sub(kp1, ok)),
        Direction::Mirrored => (tape.add(kp1, ok), tape.sub(kp2, ok)),
    }
}

/// `kp1' = kp2 + O_K` and `kp2' = kp1 - O_K`.
pub fn reshape_keypoints(kp1: &KeypointSet, kp2: &KeypointSet, offsets: &[Point3]) -> Result<ReshapedKeypoints> {
    reshape_keypoints_with(kp1, kp2, offsets, Direction::Verbatim)
}

pub fn reshape_keypoints_with(
    kp1: &KeypointSet,
    kp2: &KeypointSet,
    offsets: &[Point3],
    direction: Direction,
) -> Result<ReshapedKeypoints> {
    check_same_len(kp1.len(), kp2.len())?;
    check_same_len(kp1.len(), offsets.len())?;
    let (base1, base2) = match direction {
        Direction::Verbatim => (kp2, kp1),
        Direction::Mirrored => (kp1, kp2),
    };
    let p1 = base1.keypoints.iter().zip(offsets).map(|(k, o)| vec3::add(*k, *o)).collect();
    let p2 = base2.keypoints.iter().zip(offsets).map(|(k, o)| vec3::sub(*k, *o)).collect();
    Ok(ReshapedKeypoints {
        kp1_prime: KeypointSet::new(p1, kp1.source_id.clone()),
        kp2_prime: KeypointSet::new(p2, kp2.source_id.clone()),
    })
}
