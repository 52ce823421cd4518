//! Diffusion-based relighting of synthetic head images.
//!
//! The crate renders a blendshape head under spherical-harmonic light
//! ([`sh`], [`geometry`]), generates datasets with exact annotations
//! ([`dataset`], [`encoders`]), trains a conditional noise predictor
//! ([`network`], [`pipeline`]) and relights images by inverting them with
//! DDIM under their own conditioning and decoding under a new one
//! ([`diffusion`], [`pipeline::Relighter`]). [`eval`] and [`metrics`] score
//! the result.

pub mod dataset;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod sh;
pub mod tensor;

pub use dataset::{DatasetSpec, Split};
pub use diffusion::{CorrectionSequence, DecodeSolver, NoiseSchedule, Trajectory};
pub use encoders::{FeatureVector, Sidecar};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use geometry::{Camera, Mesh, ShapeParams, Vec3};
pub use image::RgbImage;
pub use network::{Conditioning, Mode, Model, UNetConfig};
pub use pipeline::{Relighter, TrainConfig, Trainer};
pub use sh::LightSh;
pub use tensor::{Float, Grads, Graph, Tensor, Var};
