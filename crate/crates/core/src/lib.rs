//! Multi-view voxel reconstruction with a transformer that predicts rank-1
//! decomposition factors, plus the surrounding training, data and evaluation
//! machinery.

pub mod cp_fit;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
mod kernels;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod voxel;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use voxel::{FactorSet, OccupancyGrid};
