//! Gaussian-cloud parameterization, activation rules, and geometry-prior
//! initialization from point clouds and meshes.

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::GsError;
use crate::math::{c, logit, normalize_quat, rotation_from_unit_quat, sigmoid, Real};

/// Lower opacity clamp applied on activation.
pub const OPACITY_MIN: f64 = 0.004;
/// Upper opacity clamp applied on activation.
pub const OPACITY_MAX: f64 = 0.99;

/// Bounds of the uniform logit-space distribution used for random color
/// initialization; chosen so activated colors start in [0.1, 0.9].
pub const RANDOM_COLOR_LOGIT_LO: f64 = -2.1972245773362196;
pub const RANDOM_COLOR_LOGIT_HI: f64 = 2.1972245773362196;

/// The differentiable scene parameterization: raw (pre-activation) parameters
/// of N anisotropic Gaussians.
///
/// Raw parameters are unconstrained; rendering consumes the activated view
/// produced by [`GaussianCloud::activate`]. `snapshot_positions` holds the
/// reference positions captured when the refinement stage starts and is
/// carried through adaptive-control edits.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud<T = f32> {
    pub positions: Vec<Vector3<T>>,
    pub log_scales: Vec<Vector3<T>>,
    pub rotations: Vec<Vector4<T>>,
    pub color_params: Vec<Vector3<T>>,
    pub opacity_logits: Vec<T>,
    pub snapshot_positions: Option<Vec<Vector3<T>>>,
}

/// Activated (rendering-ready) view of a [`GaussianCloud`].
#[derive(Clone, Debug)]
pub struct ActivatedGaussians<T = f32> {
    pub positions: Vec<Vector3<T>>,
    pub scales: Vec<Vector3<T>>,
    pub rotations: Vec<Vector4<T>>,
    pub colors: Vec<Vector3<T>>,
    pub opacities: Vec<T>,
    pub covariances: Vec<Matrix3<T>>,
}

impl<T: Real> ActivatedGaussians<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Initialization constants for clouds built from points or meshes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitConfig {
    /// Initial per-axis standard deviation in scene units.
    pub fixed_scale: f64,
    /// Initial raw opacity parameter.
    pub fixed_opacity_logit: f64,
    /// Seed for random color draws.
    pub color_seed: u64,
    /// Number of Gaussians to instantiate when subsampling points or
    /// sampling a mesh surface.
    pub n_points: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            fixed_scale: 0.02,
            fixed_opacity_logit: logit(0.1f64),
            color_seed: 0,
            n_points: 4096,
        }
    }
}

/// Color source for [`init_from_points`].
#[derive(Clone, Debug)]
pub enum ColorInit<T> {
    /// Uniform random logits in `[RANDOM_COLOR_LOGIT_LO, RANDOM_COLOR_LOGIT_HI]`.
    Random,
    /// Explicit colors in (0,1), stored through the inverse activation.
    Given(Vec<Vector3<T>>),
}

/// Similarity transform mapping ingested geometry into the canonical
/// [-1,1]³ scene box: `p ↦ (p - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizeTransform<T> {
    pub center: Vector3<T>,
    pub scale: T,
}

impl<T: Real> NormalizeTransform<T> {
    pub fn identity() -> Self {
        NormalizeTransform {
            center: Vector3::zeros(),
            scale: T::one(),
        }
    }

    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        (p - self.center) / self.scale
    }

    pub fn invert(&self, p: &Vector3<T>) -> Vector3<T> {
        p * self.scale + self.center
    }
}

impl<T: Real> GaussianCloud<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks structural consistency: equal per-parameter lengths and N ≥ 1.
    pub fn validate_shape(&self) -> Result<(), GsError> {
        let n = self.positions.len();
        if n == 0 {
            return Err(GsError::empty("gaussian cloud must contain at least one gaussian"));
        }
        let ok = self.log_scales.len() == n
            && self.rotations.len() == n
            && self.color_params.len() == n
            && self.opacity_logits.len() == n
            && self.snapshot_positions.as_ref().map_or(true, |s| s.len() == n);
        if !ok {
            return Err(GsError::ShapeMismatch(format!(
                "cloud parameter arrays disagree on N={n}"
            )));
        }
        Ok(())
    }

    /// Applies the activation rules to every Gaussian.
    ///
    /// Opacities are `clamp(sigmoid(logit), 0.004, 0.99)`, colors are
    /// `sigmoid`, scales are `exp`, rotations are normalized quaternions,
    /// and covariances are `R · diag(s)² · Rᵀ`.
    pub fn activate(&self) -> Result<ActivatedGaussians<T>, GsError> {
        self.validate_shape()?;
        let n = self.len();
        let lo = c::<T>(OPACITY_MIN);
        let hi = c::<T>(OPACITY_MAX);
        let mut out = ActivatedGaussians {
            positions: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            covariances: Vec::with_capacity(n),
        };
        for i in 0..n {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.color_params[i].iter().all(|v| v.is_finite())
                && self.opacity_logits[i].is_finite();
            if !finite {
                return Err(GsError::NonFinite(format!("gaussian {i} has a non-finite parameter")));
            }
            let scale = self.log_scales[i].map(|v| v.exp());
            let q = normalize_quat(&self.rotations[i]);
            out.positions.push(self.positions[i]);
            out.scales.push(scale);
            out.rotations.push(q);
            out.colors.push(self.color_params[i].map(sigmoid));
            out.opacities.push(sigmoid(self.opacity_logits[i]).clamp(lo, hi));
            out.covariances.push(covariance_from_unit_quat(&scale, &q));
        }
        Ok(out)
    }

    /// Keeps only the Gaussians whose mask entry is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        filter_vec(&mut self.positions, keep);
        filter_vec(&mut self.log_scales, keep);
        filter_vec(&mut self.rotations, keep);
        filter_vec(&mut self.color_params, keep);
        filter_vec(&mut self.opacity_logits, keep);
        if let Some(s) = self.snapshot_positions.as_mut() {
            filter_vec(s, keep);
        }
    }

    /// Appends another cloud. If this cloud carries snapshot positions and
    /// the other does not, the appended Gaussians use their creation
    /// positions as snapshots.
    pub fn append(&mut self, mut other: GaussianCloud<T>) {
        if let Some(s) = self.snapshot_positions.as_mut() {
            match other.snapshot_positions.take() {
                Some(mut o) => s.append(&mut o),
                None => s.extend_from_slice(&other.positions),
            }
        }
        self.positions.append(&mut other.positions);
        self.log_scales.append(&mut other.log_scales);
        self.rotations.append(&mut other.rotations);
        self.color_params.append(&mut other.color_params);
        self.opacity_logits.append(&mut other.opacity_logits);
    }

    /// Converts all parameters through an `f64` intermediate.
    pub fn cast<U: Real>(&self) -> GaussianCloud<U> {
        let v3 = |v: &Vector3<T>| Vector3::new(conv::<T, U>(v[0]), conv::<T, U>(v[1]), conv::<T, U>(v[2]));
        let v4 = |v: &Vector4<T>| {
            Vector4::new(
                conv::<T, U>(v[0]),
                conv::<T, U>(v[1]),
                conv::<T, U>(v[2]),
                conv::<T, U>(v[3]),
            )
        };
        GaussianCloud {
            positions: self.positions.iter().map(v3).collect(),
            log_scales: self.log_scales.iter().map(v3).collect(),
            rotations: self.rotations.iter().map(v4).collect(),
            color_params: self.color_params.iter().map(v3).collect(),
            opacity_logits: self.opacity_logits.iter().map(|v| conv::<T, U>(*v)).collect(),
            snapshot_positions: self
                .snapshot_positions
                .as_ref()
                .map(|s| s.iter().map(v3).collect()),
        }
    }
}

fn conv<T: Real, U: Real>(v: T) -> U {
    c::<U>(v.to_f64_lossy())
}

fn filter_vec<V: Clone>(v: &mut Vec<V>, keep: &[bool]) {
    let mut i = 0;
    v.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}

/// Covariance `R(q̂) · diag(s)² · R(q̂)ᵀ` from per-axis scales and a
/// quaternion that is normalized internally.
pub fn covariance_from<T: Real>(scale: &Vector3<T>, quat: &Vector4<T>) -> Result<Matrix3<T>, GsError> {
    if quat.norm() == T::zero() {
        return Err(GsError::invalid("zero-norm quaternion has no rotation"));
    }
    Ok(covariance_from_unit_quat(scale, &normalize_quat(quat)))
}

fn covariance_from_unit_quat<T: Real>(scale: &Vector3<T>, q: &Vector4<T>) -> Matrix3<T> {
    let r = rotation_from_unit_quat(q);
    let m = r * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Builds a cloud with `positions = points`, identity rotations, fixed
/// log-scales and opacity logits, and colors drawn per [`ColorInit`].
pub fn init_from_points<T: Real>(
    points: &[Vector3<T>],
    colors: ColorInit<T>,
    cfg: &InitConfig,
    seed: u64,
) -> Result<GaussianCloud<T>, GsError> {
    if points.is_empty() {
        return Err(GsError::empty("cannot initialize a cloud from zero points"));
    }
    if !(cfg.fixed_scale > 0.0) {
        return Err(GsError::invalid("fixed_scale must be positive"));
    }
    let n = points.len();
    let log_scale = c::<T>(cfg.fixed_scale.ln());
    let color_params = match colors {
        ColorInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    Vector3::new(
                        c::<T>(rng.random_range(RANDOM_COLOR_LOGIT_LO..RANDOM_COLOR_LOGIT_HI)),
                        c::<T>(rng.random_range(RANDOM_COLOR_LOGIT_LO..RANDOM_COLOR_LOGIT_HI)),
                        c::<T>(rng.random_range(RANDOM_COLOR_LOGIT_LO..RANDOM_COLOR_LOGIT_HI)),
                    )
                })
                .collect()
        }
        ColorInit::Given(cs) => {
            if cs.len() != n {
                return Err(GsError::ShapeMismatch(format!(
                    "{} colors supplied for {} points",
                    cs.len(),
                    n
                )));
            }
            cs.iter().map(|c3| c3.map(logit)).collect()
        }
    };
    Ok(GaussianCloud {
        positions: points.to_vec(),
        log_scales: vec![Vector3::new(log_scale, log_scale, log_scale); n],
        rotations: vec![Vector4::new(T::one(), T::zero(), T::zero(), T::zero()); n],
        color_params,
        opacity_logits: vec![c::<T>(cfg.fixed_opacity_logit); n],
        snapshot_positions: None,
    })
}

/// Greedy farthest point sampling.
///
/// The first index is `start`; every following index maximizes the minimum
/// distance to the points already chosen, breaking ties toward the lowest
/// index. Matches the O(M²k) greedy oracle exactly.
pub fn farthest_point_sample<T: Real>(
    points: &[Vector3<T>],
    k: usize,
    start: usize,
) -> Result<Vec<usize>, GsError> {
    let m = points.len();
    if k == 0 || k > m {
        return Err(GsError::invalid(format!("k={k} outside 1..={m}")));
    }
    if start >= m {
        return Err(GsError::invalid(format!("start index {start} outside 0..{m}")));
    }
    let mut chosen = Vec::with_capacity(k);
    chosen.push(start);
    let mut min_d2: Vec<T> = points
        .iter()
        .map(|p| (p - points[start]).norm_squared())
        .collect();
    while chosen.len() < k {
        let mut best = 0;
        let mut best_d2 = min_d2[0];
        for (i, &d2) in min_d2.iter().enumerate().skip(1) {
            if d2 > best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        chosen.push(best);
        let p = points[best];
        if m >= 4096 {
            min_d2
                .par_iter_mut()
                .zip(points.par_iter())
                .for_each(|(d2, q)| {
                    let nd = (q - p).norm_squared();
                    if nd < *d2 {
                        *d2 = nd;
                    }
                });
        } else {
            for (d2, q) in min_d2.iter_mut().zip(points.iter()) {
                let nd = (q - p).norm_squared();
                if nd < *d2 {
                    *d2 = nd;
                }
            }
        }
    }
    Ok(chosen)
}

/// Samples `n` points uniformly over the surface of a triangle mesh via
/// area-weighted triangle selection and uniform barycentric coordinates.
pub fn sample_mesh_surface<T: Real>(
    vertices: &[Vector3<T>],
    faces: &[[usize; 3]],
    n: usize,
    seed: u64,
) -> Result<Vec<Vector3<T>>, GsError> {
    if faces.is_empty() {
        return Err(GsError::empty("mesh has no faces"));
    }
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v >= vertices.len() {
                return Err(GsError::invalid(format!(
                    "face {fi} references vertex {v} but mesh has {} vertices",
                    vertices.len()
                )));
            }
        }
    }
    let mut cumulative = Vec::with_capacity(faces.len());
    let mut total = 0.0f64;
    for f in faces {
        let a = vertices[f[0]].map(|v| v.to_f64_lossy());
        let b = vertices[f[1]].map(|v| v.to_f64_lossy());
        let cvx = vertices[f[2]].map(|v| v.to_f64_lossy());
        let area = 0.5 * (b - a).cross(&(cvx - a)).norm();
        total += area;
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(GsError::invalid("mesh has zero total surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.random_range(0.0..total);
        let fi = cumulative.partition_point(|&cum| cum <= target).min(faces.len() - 1);
        let f = faces[fi];
        let mut u: f64 = rng.random_range(0.0..1.0);
        let mut v: f64 = rng.random_range(0.0..1.0);
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let a = vertices[f[0]];
        let b = vertices[f[1]];
        let cv = vertices[f[2]];
        out.push(a + (b - a) * c::<T>(u) + (cv - a) * c::<T>(v));
    }
    Ok(out)
}

/// Rescales points in place so their bounding box fits [-1,1]³ centered at
/// the origin, returning the applied transform. A degenerate (single-point)
/// set is centered with unit scale.
pub fn normalize_points_to_unit_cube<T: Real>(points: &mut [Vector3<T>]) -> NormalizeTransform<T> {
    if points.is_empty() {
        return NormalizeTransform::identity();
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let center = (lo + hi) * c::<T>(0.5);
    let half = (hi - lo) * c::<T>(0.5);
    let mut scale = half[0].max(half[1]).max(half[2]);
    if !(scale > T::zero()) {
        scale = T::one();
    }
    let t = NormalizeTransform { center, scale };
    for p in points.iter_mut() {
        *p = t.apply(p);
    }
    t
}
