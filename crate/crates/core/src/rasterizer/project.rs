//! EWA projection of activated 3D Gaussians onto the image plane.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::gaussians::ActivatedGaussians;
use crate::math::{c, Real};

use super::COV_DILATION;

/// A Gaussian after projection: 2D mean in pixel coordinates, dilated 2D
/// covariance and its inverse (conic), view-space center, and the activated
/// appearance parameters it carries into compositing.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedGaussian<T = f32> {
    pub mean2d: Vector2<T>,
    /// Inverse of `cov2d`; symmetric positive-definite.
    pub conic: Matrix2<T>,
    /// `J·W·Σ·Wᵀ·Jᵀ + 0.3·I`, symmetric positive-definite.
    pub cov2d: Matrix2<T>,
    /// Center in view space (camera looks down −z).
    pub view_pos: Vector3<T>,
    /// Positive view-space depth of the center, `−view_pos.z`.
    pub view_depth: T,
    pub color: Vector3<T>,
    pub opacity: T,
    /// Standard deviation along the major screen-space axis,
    /// `sqrt(λ_max(cov2d))`, in pixels.
    pub sigma_max: T,
    pub source_index: u32,
}

/// Jacobian of the pixel projection with respect to view-space coordinates,
/// evaluated at view point `v`.
#[inline]
pub(crate) fn perspective_jacobian<T: Real>(focal: T, v: &Vector3<T>) -> Matrix2x3<T> {
    let depth = -v[2];
    let inv = T::one() / depth;
    let inv2 = inv * inv;
    Matrix2x3::new(
        focal * inv,
        T::zero(),
        focal * v[0] * inv2,
        T::zero(),
        -focal * inv,
        -focal * v[1] * inv2,
    )
}

/// Largest eigenvalue of a symmetric 2×2 matrix.
#[inline]
pub(crate) fn max_eigenvalue_2x2<T: Real>(m: &Matrix2<T>) -> T {
    let half = c::<T>(0.5);
    let mid = (m[(0, 0)] + m[(1, 1)]) * half;
    let d = (m[(0, 0)] - m[(1, 1)]) * half;
    let disc = (d * d + m[(0, 1)] * m[(1, 0)]).max(T::zero()).sqrt();
    mid + disc
}

/// Projects activated Gaussians through `cam`, culling those whose center
/// lies at or behind the near plane. Output order follows cloud order.
pub fn project<T: Real>(act: &ActivatedGaussians<T>, cam: &Camera<T>) -> Vec<ProjectedGaussian<T>> {
    let rot: Matrix3<T> = cam.rotation();
    let trans = cam.translation();
    let focal = cam.focal();
    let (cx, cy) = cam.principal_point();
    let near = cam.near;
    let dil = c::<T>(COV_DILATION);
    let half = c::<T>(0.5);

    let maybe: Vec<Option<ProjectedGaussian<T>>> = (0..act.len())
        .into_par_iter()
        .map(|i| {
            let v = rot * act.positions[i] + trans;
            let depth = -v[2];
            if depth <= near {
                return None;
            }
            let inv_d = T::one() / depth;
            let mean2d = Vector2::new(cx + focal * v[0] * inv_d, cy - focal * v[1] * inv_d);
            let cov_view = rot * act.covariances[i] * rot.transpose();
            let j = perspective_jacobian(focal, &v);
            let raw = j * cov_view * j.transpose();
            let off = (raw[(0, 1)] + raw[(1, 0)]) * half;
            let cov2d = Matrix2::new(raw[(0, 0)] + dil, off, off, raw[(1, 1)] + dil);
            let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
            let conic = Matrix2::new(cov2d[(1, 1)], -off, -off, cov2d[(0, 0)]) / det;
            Some(ProjectedGaussian {
                mean2d,
                conic,
                cov2d,
                view_pos: v,
                view_depth: depth,
                color: act.colors[i],
                opacity: act.opacities[i],
                sigma_max: max_eigenvalue_2x2(&cov2d).sqrt(),
                source_index: i as u32,
            })
        })
        .collect();
    maybe.into_iter().flatten().collect()
}
