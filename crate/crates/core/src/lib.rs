//! Unsupervised 3D semantic keypoints learned by reconstructing point clouds
//! from keypoint skeletons, both of the cloud itself and of a paired shape.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod config;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod mutual;
pub mod nn;
pub mod pairs;
pub mod skeleton;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vec3;

pub use error::{Error, Result};
