//! Speech-to-gesture synthesis: log-Mel speech features, a UNet generator
//! and motion discriminator trained adversarially, PCK evaluation, and
//! conversion of generated keypoints into joint rotations exported as BVH.

pub mod animation;
pub mod audio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
