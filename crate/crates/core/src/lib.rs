//! Camera-LiDAR bird's-eye-view fusion detector.
//!
//! The crate covers the differentiable tensor engine, the camera backbone
//! with cognitive adapters, the lift-splat camera-to-BEV transform with a
//! contrastive RGB/depth alignment loss, a pillar LiDAR branch, fusion with
//! section-aware coordinate attention, the detection heads and auxiliary
//! camera branch, a procedural lunar scene generator, detection metrics, and
//! the training/evaluation harness.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradsuite;
pub mod harness;
pub mod heads;
pub mod layers;
pub mod lidar;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod view_transform;

pub use error::{Error, Result};
pub use geometry::{BEVGridSpec, Box3D, CameraCalib};
pub use params::{ParamStore, Parameter};
pub use tensor::{Graph, Scalar, Tensor, Var};
