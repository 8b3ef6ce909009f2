//! Pinhole cameras and the stratified pose-sampling distribution used to
//! draw training views.
//!
//! Conventions: right-handed world with +z up, the camera looks down −z in
//! view space, pixel origin at the top-left, pixel centers at half-integer
//! coordinates.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::GsError;
use crate::math::{c, Real};

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T = f32> {
    pub world_to_camera: Matrix4<T>,
    /// Vertical field of view in degrees.
    pub fov_y: T,
    pub width: usize,
    pub height: usize,
    pub near: T,
    pub far: T,
}

impl<T: Real> Camera<T> {
    /// Checks the rigid-transform and range invariants.
    pub fn validate(&self) -> Result<(), GsError> {
        let r = self.rotation();
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho.to_f64_lossy() > 1e-4 {
            return Err(GsError::invalid("world_to_camera rotation block is not orthonormal"));
        }
        if (r.determinant() - T::one()).abs().to_f64_lossy() > 1e-4 {
            return Err(GsError::invalid("world_to_camera rotation block must have det +1"));
        }
        if !(self.near > T::zero() && self.far > self.near) {
            return Err(GsError::invalid("camera requires 0 < near < far"));
        }
        let fov = self.fov_y.to_f64_lossy();
        if !(fov > 0.0 && fov < 180.0) {
            return Err(GsError::invalid("fov_y must lie in (0, 180) degrees"));
        }
        Ok(())
    }

    /// Rotation block of the world-to-camera transform.
    pub fn rotation(&self) -> Matrix3<T> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Translation part of the world-to-camera transform.
    pub fn translation(&self) -> Vector3<T> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Transforms a world point into view space.
    #[inline]
    pub fn view_transform(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation() * p + self.translation()
    }

    /// Focal length in pixels (identical for x and y).
    pub fn focal(&self) -> T {
        let half_fov = self.fov_y.to_f64_lossy().to_radians() * 0.5;
        c::<T>(self.height as f64 * 0.5 / half_fov.tan())
    }

    /// Principal point, at the image center.
    pub fn principal_point(&self) -> (T, T) {
        (c::<T>(self.width as f64 * 0.5), c::<T>(self.height as f64 * 0.5))
    }

    /// Projects a view-space point to pixel coordinates, returning the
    /// positive view depth as the third component. Points at or behind the
    /// camera plane yield `None`.
    pub fn project_view_point(&self, v: &Vector3<T>) -> Option<(T, T, T)> {
        let depth = -v[2];
        if depth <= T::zero() {
            return None;
        }
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        Some((cx + f * v[0] / depth, cy - f * v[1] / depth, depth))
    }

    /// Camera position in world space.
    pub fn eye(&self) -> Vector3<T> {
        let r = self.rotation();
        -(r.transpose() * self.translation())
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            world_to_camera: self.world_to_camera.map(|v| c::<U>(v.to_f64_lossy())),
            fov_y: c::<U>(self.fov_y.to_f64_lossy()),
            width: self.width,
            height: self.height,
            near: c::<U>(self.near.to_f64_lossy()),
            far: c::<U>(self.far.to_f64_lossy()),
        }
    }
}

/// Builds a camera at `eye` whose forward axis points toward `target`.
pub fn look_at_camera<T: Real>(
    eye: Vector3<T>,
    target: Vector3<T>,
    up: Vector3<T>,
    fov_y: T,
    width: usize,
    height: usize,
) -> Result<Camera<T>, GsError> {
    let forward = target - eye;
    if forward.norm() == T::zero() {
        return Err(GsError::invalid("look_at eye and target coincide"));
    }
    let f = forward.normalize();
    let right_raw = f.cross(&up);
    if right_raw.norm().to_f64_lossy() < 1e-9 {
        return Err(GsError::invalid("look_at up direction is parallel to the view direction"));
    }
    let right = right_raw.normalize();
    let true_up = right.cross(&f);
    // View basis rows: x→right, y→up, z→backward (camera looks down −z).
    let rot = Matrix3::from_rows(&[right.transpose(), true_up.transpose(), (-f).transpose()]);
    let trans = -(rot * eye);
    let mut w2c = Matrix4::identity();
    w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
    let cam = Camera {
        world_to_camera: w2c,
        fov_y,
        width,
        height,
        near: c::<T>(0.01),
        far: c::<T>(100.0),
    };
    cam.validate()?;
    Ok(cam)
}

/// Pose-sampling distribution: stratified azimuth, uniform elevation / fov /
/// radius, all looking at `look_at`.
///
/// The default ranges approximate the usual text-to-3D setup; every field is
/// a config key rather than a constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSamplerConfig {
    /// Number of azimuth strata covering [0°, 360°). Zero means "one stratum
    /// per camera in the batch".
    pub azimuth_strata: usize,
    /// Elevation range in degrees (angle above the horizontal plane).
    pub elevation_range: [f64; 2],
    /// Vertical field-of-view range in degrees.
    pub fov_range: [f64; 2],
    /// Camera distance range in scene units.
    pub radius_range: [f64; 2],
    /// Point every sampled camera looks at.
    pub look_at: [f64; 3],
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        PoseSamplerConfig {
            azimuth_strata: 0,
            elevation_range: [-10.0, 60.0],
            fov_range: [40.0, 70.0],
            radius_range: [3.0, 3.6],
            look_at: [0.0, 0.0, 0.0],
        }
    }
}

impl PoseSamplerConfig {
    pub fn validate(&self) -> Result<(), GsError> {
        let ordered = |r: &[f64; 2]| r[0] <= r[1];
        if !ordered(&self.elevation_range) || !ordered(&self.fov_range) || !ordered(&self.radius_range) {
            return Err(GsError::invalid("pose sampler ranges must be ordered"));
        }
        if self.fov_range[0] <= 0.0 || self.fov_range[1] >= 180.0 {
            return Err(GsError::invalid("fov range must lie inside (0, 180) degrees"));
        }
        if self.radius_range[0] <= 0.0 {
            return Err(GsError::invalid("radius range must be positive"));
        }
        Ok(())
    }
}

/// Draws a batch of cameras with one azimuth per stratum.
///
/// Stratum `i` of `S` covers `[i·360/S, (i+1)·360/S)` degrees; cameras are
/// returned in stratum order. Elevation is measured upward from the
/// horizontal plane; the world up axis is +z.
pub fn sample_poses<T: Real, R: Rng>(
    cfg: &PoseSamplerConfig,
    batch: usize,
    width: usize,
    height: usize,
    rng: &mut R,
) -> Result<Vec<Camera<T>>, GsError> {
    if batch == 0 {
        return Err(GsError::invalid("batch must be at least 1"));
    }
    cfg.validate()?;
    let strata = if cfg.azimuth_strata == 0 { batch } else { cfg.azimuth_strata };
    let center = Vector3::new(
        c::<T>(cfg.look_at[0]),
        c::<T>(cfg.look_at[1]),
        c::<T>(cfg.look_at[2]),
    );
    let uniform = |rng: &mut R, r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..r[1])
        }
    };
    let mut cams = Vec::with_capacity(batch);
    for i in 0..batch {
        let stratum = i % strata;
        let azimuth =
            (stratum as f64 + rng.random_range(0.0..1.0)) * 360.0 / strata as f64;
        let elevation = uniform(rng, cfg.elevation_range);
        let fov = uniform(rng, cfg.fov_range);
        let radius = uniform(rng, cfg.radius_range);
        let (az, el) = (azimuth.to_radians(), elevation.to_radians());
        let eye = Vector3::new(
            c::<T>(radius * el.cos() * az.cos()),
            c::<T>(radius * el.cos() * az.sin()),
            c::<T>(radius * el.sin()),
        ) + center;
        let up = Vector3::new(T::zero(), T::zero(), T::one());
        cams.push(look_at_camera(eye, center, up, c::<T>(fov), width, height)?);
    }
    Ok(cams)
}
