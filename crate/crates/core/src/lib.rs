//! Groupwise deformable registration and unbiased atlas construction.
//!
//! The crate is generic over the scalar type ([`Real`]); training and
//! inference use `f32`, numerical checks reuse the same code in `f64`.

pub mod atlas;
pub mod baseline_iter;
pub mod autodiff;
pub mod error;
pub mod evalkit;
pub mod fields;
pub mod grid;
pub mod groupnet;
mod kernels;
pub mod losses;
pub mod scalar;
pub mod seed;
pub mod synthgen;
pub mod tensor;
pub mod tensorio;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use grid::Grid;
pub use scalar::Real;
pub use tensor::Tensor;
pub use volume::{DisplacementField, ImageVolume, ProbSeg, VelocityField, Volume};

/// Single-precision aliases used by the training and inference paths.
pub type Image = ImageVolume<f32>;
pub type Seg = ProbSeg<f32>;
pub type Velocity = VelocityField<f32>;
pub type Displacement = DisplacementField<f32>;
