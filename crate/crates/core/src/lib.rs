//! Differentiable 3D Gaussian splatting with a two-stage score-distillation
//! text-to-3D optimization pipeline.
//!
//! The crate is organized around a small set of building blocks:
//!
//! - [`gaussians`]: the point-based scene representation (positions, scales,
//!   rotations, colors, opacities in raw parameter space) plus initialization
//!   from point clouds and meshes.
//! - [`camera`]: pinhole cameras and pose sampling for training views.
//! - [`rasterizer`]: tile-based differentiable forward rendering (color,
//!   alpha, depth, depth variance) and a brute-force reference renderer.
//! - [`grad`]: the analytic backward pass through the rasterizer and a
//!   finite-difference checker for it.
//! - [`guidance`]: diffusion noise schedules and score-distillation gradients
//!   for images and point sets, with pluggable score providers.
//! - [`adaptive`]: density control (split, compactness densification,
//!   pruning) driven by accumulated positional gradients and nearest-neighbor
//!   queries.
//! - [`pipeline`]: the optimizer, the geometry/refinement stages, training
//!   orchestration, checkpoints, and the photometric fitting loop.
//! - [`io`]: PLY/OBJ/PNG/raw-buffer import and export.
//!
//! Rendering and gradient code is generic over the scalar type so the same
//! implementation runs in `f32` for production and `f64` for verification.

pub mod adaptive;
pub mod buffer;
pub mod camera;
pub mod error;
pub mod gaussians;
pub mod grad;
pub mod guidance;
pub mod io;
pub mod math;
pub mod pipeline;
pub mod rasterizer;

pub use buffer::{Image, Plane};
pub use camera::{Camera, PoseSamplerConfig};
pub use error::GsError;
pub use gaussians::{ActivatedGaussians, ColorInit, GaussianCloud, InitConfig};
pub use grad::ParamGrads;
pub use guidance::{Condition, ImageScoreProvider, NoiseSchedule, PointScoreProvider};
pub use math::Real;
pub use pipeline::{Checkpoint, StepMetrics, TrainConfig, TrainLogs, TrainObserver};
pub use rasterizer::{BackgroundModel, RasterOptions, RenderOutput};
