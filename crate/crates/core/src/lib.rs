//! Multimodal (camera + LiDAR) 3D human pose estimation.
//!
//! The core is generic over the floating-point type; [`f32`] aliases below
//! are what the command-line tool uses.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod evalkit;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod pointops;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use scalar::{Jet, Scalar};

pub type CameraRig = geometry::CameraRig<f64>;
pub type PoseModel = fusion::PoseModel<f32>;
pub type PoseModel64 = fusion::PoseModel<f64>;
pub type PreparedSample = fusion::PreparedSample<f32>;
pub type Tensor = tensor::Tensor<f32>;
pub type Graph = autograd::Graph<f32>;
