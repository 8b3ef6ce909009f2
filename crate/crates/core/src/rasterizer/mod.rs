//! Tile-based differentiable forward rendering: EWA projection, 16×16-pixel
//! tile binning, depth-sorted alpha compositing, and a brute-force reference
//! renderer.

mod background;
mod composite;
mod oracle;
mod project;
mod tiles;

pub use background::{ray_directions, BackgroundMlp, BackgroundModel, MLP_PARAM_COUNT};
pub use composite::{composite, render, ForwardTape, RenderOutput};
pub use oracle::brute_force_render;
pub use project::{project, ProjectedGaussian};
pub use tiles::{bin_tiles, TileBins, TILE_SIZE};

/// Pieces of the forward pass shared with the backward pass.
pub(crate) mod composite_internals {
    pub(crate) use super::background::pixel_ray;
    pub(crate) use super::composite::splat_eval;
    pub(crate) use super::project::perspective_jacobian;
}

use crate::math::{c, Real};

/// Low-pass dilation added to both diagonal entries of every projected 2D
/// covariance (in px²) so splats never degenerate below pixel size.
pub const COV_DILATION: f64 = 0.3;

/// Per-contribution alpha ceiling; keeps `1 − α` bounded away from zero in
/// the backward pass.
pub const ALPHA_CLAMP: f64 = 0.99;

/// Contribution thresholds used by both the tiled renderer and the
/// brute-force reference.
///
/// `gaussian_cutoff` bounds the Mahalanobis quadratic form `q = δᵀ·conic·δ`
/// of admitted contributions and, equivalently, the tile-binning radius
/// `sqrt(gaussian_cutoff · λ_max(Σ′))`; the production value 9 corresponds
/// to the 3σ screen-space extent. Under equal options the tiled path and the
/// reference path admit exactly the same contributions per pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterOptions<T = f32> {
    /// Contributions with `α < alpha_skip` are skipped (0 disables).
    pub alpha_skip: T,
    /// Contributions with `q > gaussian_cutoff` are skipped (∞ disables).
    pub gaussian_cutoff: T,
    /// Per-pixel compositing stops once transmittance drops below this
    /// value (0 disables).
    pub early_termination: T,
}

impl<T: Real> RasterOptions<T> {
    /// Production thresholds: skip α < 1/255, 3σ cutoff, terminate below
    /// transmittance 1e-4.
    pub fn production() -> Self {
        RasterOptions {
            alpha_skip: c::<T>(1.0 / 255.0),
            gaussian_cutoff: c::<T>(9.0),
            early_termination: c::<T>(1e-4),
        }
    }

    /// All thresholds disabled; every projected Gaussian contributes to
    /// every pixel. Used by oracles and finite-difference verification.
    pub fn exact() -> Self {
        RasterOptions {
            alpha_skip: T::zero(),
            gaussian_cutoff: T::from_f64(f64::INFINITY).unwrap(),
            early_termination: T::zero(),
        }
    }
}

impl<T: Real> Default for RasterOptions<T> {
    fn default() -> Self {
        RasterOptions::production()
    }
}
