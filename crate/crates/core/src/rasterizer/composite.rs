//! Depth-sorted alpha compositing over tiles.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::buffer::{Image, Plane};
use crate::camera::Camera;
use crate::error::GsError;
use crate::gaussians::GaussianCloud;
use crate::math::{c, Real};

use super::background::BackgroundModel;
use super::project::{project, ProjectedGaussian};
use super::tiles::{bin_tiles, TileBins, TILE_SIZE};
use super::{RasterOptions, ALPHA_CLAMP};

/// Saved forward state sufficient to replay compositing for the backward
/// pass: projected Gaussians, their tile assignment, per-pixel weight sums
/// and second depth moments, and the evaluated background image.
#[derive(Clone, Debug)]
pub struct ForwardTape<T = f32> {
    pub options: RasterOptions<T>,
    pub projected: Vec<ProjectedGaussian<T>>,
    pub bins: TileBins,
    /// Per-pixel Σ w_i (compositing weight sum, also the alpha-normalization
    /// denominator).
    pub weight_sum: Plane<T>,
    /// Per-pixel Σ w_i z_i².
    pub depth_m2: Plane<T>,
    /// Background color per pixel.
    pub background: Image<T>,
    /// Number of Gaussians in the cloud the tape was built from.
    pub n_gaussians: usize,
}

/// Rendered buffers plus the forward tape.
///
/// `depth` is the composited (unnormalized) Σ w_i z_i; the alpha-normalized
/// variant is exposed by [`RenderOutput::depth_normalized`]. `zvar` is the
/// alpha-normalized variance E[z²] − E[z]². The brute-force reference
/// renderer produces `tape: None`; it is a forward-only oracle.
#[derive(Clone, Debug)]
pub struct RenderOutput<T = f32> {
    pub color: Image<T>,
    pub alpha: Plane<T>,
    pub depth: Plane<T>,
    pub zvar: Plane<T>,
    pub transmittance: Plane<T>,
    pub tape: Option<ForwardTape<T>>,
}

impl<T: Real> RenderOutput<T> {
    /// Depth divided by the compositing weight sum where any Gaussian
    /// contributed, zero elsewhere.
    pub fn depth_normalized(&self) -> Plane<T> {
        let tape = self.tape.as_ref().expect("depth_normalized requires a forward tape");
        let mut out = Plane::zeros(self.depth.width, self.depth.height);
        for i in 0..out.data.len() {
            let m0 = tape.weight_sum.data[i];
            if m0 > T::zero() {
                out.data[i] = self.depth.data[i] / m0;
            }
        }
        out
    }
}

/// Per-pixel accumulation state shared by the tiled compositor and the
/// brute-force reference.
#[derive(Clone, Copy)]
pub(crate) struct PixelAccum<T> {
    pub color: Vector3<T>,
    pub trans: T,
    pub m0: T,
    pub m1: T,
    pub m2: T,
}

impl<T: Real> PixelAccum<T> {
    fn new() -> Self {
        PixelAccum {
            color: Vector3::zeros(),
            trans: T::one(),
            m0: T::zero(),
            m1: T::zero(),
            m2: T::zero(),
        }
    }

    pub fn zvar(&self) -> T {
        if self.m0 > T::zero() {
            let mean = self.m1 / self.m0;
            self.m2 / self.m0 - mean * mean
        } else {
            T::zero()
        }
    }
}

/// One admitted splat contribution at a pixel center.
#[derive(Clone, Copy)]
pub(crate) struct SplatEval<T> {
    pub alpha: T,
    /// `exp(−q/2)` before multiplication by opacity.
    pub gexp: T,
    /// Whether the 0.99 alpha clamp was active (zero gradient branch).
    pub clamped: bool,
    pub dx: T,
    pub dy: T,
}

/// Evaluates one splat at a pixel center, applying the cutoff, the 0.99
/// alpha clamp, and the alpha skip. Returns `None` when the contribution is
/// rejected.
#[inline]
pub(crate) fn splat_eval<T: Real>(
    g: &ProjectedGaussian<T>,
    px: T,
    py: T,
    options: &RasterOptions<T>,
) -> Option<SplatEval<T>> {
    let dx = px - g.mean2d[0];
    let dy = py - g.mean2d[1];
    let q = g.conic[(0, 0)] * dx * dx
        + (g.conic[(0, 1)] + g.conic[(1, 0)]) * dx * dy
        + g.conic[(1, 1)] * dy * dy;
    if q > options.gaussian_cutoff {
        return None;
    }
    let gexp = (-q * c::<T>(0.5)).exp();
    let raw = g.opacity * gexp;
    let clamp = c::<T>(ALPHA_CLAMP);
    let clamped = raw > clamp;
    let alpha = if clamped { clamp } else { raw };
    if alpha < options.alpha_skip {
        return None;
    }
    Some(SplatEval {
        alpha,
        gexp,
        clamped,
        dx,
        dy,
    })
}

/// Composites a depth-ordered contribution sequence at one pixel center.
pub(crate) fn walk_pixel<'a, T: Real>(
    px: T,
    py: T,
    items: impl Iterator<Item = &'a ProjectedGaussian<T>>,
    options: &RasterOptions<T>,
) -> PixelAccum<T> {
    let mut acc = PixelAccum::new();
    for g in items {
        let Some(eval) = splat_eval(g, px, py, options) else {
            continue;
        };
        let alpha = eval.alpha;
        let w = alpha * acc.trans;
        acc.color += g.color * w;
        acc.m0 += w;
        acc.m1 += w * g.view_depth;
        acc.m2 += w * g.view_depth * g.view_depth;
        acc.trans *= T::one() - alpha;
        if acc.trans < options.early_termination {
            break;
        }
    }
    acc
}

/// Composites binned Gaussians into the output buffers.
///
/// Per pixel: α_i = o_i·exp(−½·δᵀ·conic·δ), clamped at 0.99, summed
/// front-to-back as C = Σ c_i·α_i·Π_{j<i}(1−α_j) + T_final·background.
/// Tiles are processed independently (in parallel) and each writes only its
/// own pixels, so results are bitwise independent of the worker count.
pub fn composite<T: Real>(
    projected: Vec<ProjectedGaussian<T>>,
    bins: TileBins,
    cam: &Camera<T>,
    background: &BackgroundModel<T>,
    options: RasterOptions<T>,
    n_gaussians: usize,
) -> RenderOutput<T> {
    let (w, h) = (cam.width, cam.height);
    let bg_img = background.eval_camera(cam);

    let tile_results: Vec<Vec<PixelAccum<T>>> = (0..bins.tile_count())
        .into_par_iter()
        .map(|tile| {
            let tx = tile % bins.tiles_x;
            let ty = tile / bins.tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let xn = (x0 + TILE_SIZE).min(w) - x0;
            let yn = (y0 + TILE_SIZE).min(h) - y0;
            let list = bins.tile_entries(tile);
            let mut out = Vec::with_capacity(xn * yn);
            for dy in 0..yn {
                let py = c::<T>((y0 + dy) as f64 + 0.5);
                for dx in 0..xn {
                    let px = c::<T>((x0 + dx) as f64 + 0.5);
                    out.push(walk_pixel(
                        px,
                        py,
                        list.iter().map(|&i| &projected[i as usize]),
                        &options,
                    ));
                }
            }
            out
        })
        .collect();

    let mut color = Image::zeros(w, h);
    let mut alpha = Plane::zeros(w, h);
    let mut depth = Plane::zeros(w, h);
    let mut zvar = Plane::zeros(w, h);
    let mut transmittance = Plane::filled(w, h, T::one());
    let mut weight_sum = Plane::zeros(w, h);
    let mut depth_m2 = Plane::zeros(w, h);

    for (tile, result) in tile_results.into_iter().enumerate() {
        let tx = tile % bins.tiles_x;
        let ty = tile / bins.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let xn = (x0 + TILE_SIZE).min(w) - x0;
        let mut it = result.into_iter();
        let yn = (y0 + TILE_SIZE).min(h) - y0;
        for dy in 0..yn {
            for dx in 0..xn {
                let acc = it.next().expect("tile result shape");
                let (x, y) = (x0 + dx, y0 + dy);
                let i = color.index(x, y);
                color.data[i] = acc.color + bg_img.data[i] * acc.trans;
                alpha.data[i] = T::one() - acc.trans;
                depth.data[i] = acc.m1;
                zvar.data[i] = acc.zvar();
                transmittance.data[i] = acc.trans;
                weight_sum.data[i] = acc.m0;
                depth_m2.data[i] = acc.m2;
            }
        }
    }

    RenderOutput {
        color,
        alpha,
        depth,
        zvar,
        transmittance,
        tape: Some(ForwardTape {
            options,
            projected,
            bins,
            weight_sum,
            depth_m2,
            background: bg_img,
            n_gaussians,
        }),
    }
}

/// Full forward pass: activate, project, bin, composite.
pub fn render<T: Real>(
    cloud: &GaussianCloud<T>,
    cam: &Camera<T>,
    background: &BackgroundModel<T>,
    options: RasterOptions<T>,
) -> Result<RenderOutput<T>, GsError> {
    cam.validate()?;
    let act = cloud.activate()?;
    let projected = project(&act, cam);
    let bins = bin_tiles(&projected, cam.width, cam.height, &options);
    Ok(composite(projected, bins, cam, background, options, cloud.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::look_at_camera;
    use crate::math::logit;
    use approx::assert_relative_eq;
    use nalgebra::{Vector3, Vector4};

    fn cam(size: usize) -> Camera<f64> {
        look_at_camera(
            Vector3::new(0.0, -3.0, 0.0),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            60.0,
            size,
            size,
        )
        .unwrap()
    }

    fn one_gaussian(opacity: f64, color: Vector3<f64>) -> GaussianCloud<f64> {
        GaussianCloud {
            positions: vec![Vector3::zeros()],
            log_scales: vec![Vector3::new(-2.0, -2.0, -2.0)],
            rotations: vec![Vector4::new(1.0, 0.0, 0.0, 0.0)],
            color_params: vec![color.map(logit)],
            opacity_logits: vec![logit(opacity)],
            snapshot_positions: None,
        }
    }

    #[test]
    fn pixel_at_projected_mean_composites_opacity_times_color() {
        // 33×33 image: the principal point (16.5, 16.5) is exactly the
        // center of pixel (16,16), so the exponent vanishes there.
        let cam = cam(33);
        let color = Vector3::new(0.75, 0.3, 0.6);
        let cloud = one_gaussian(0.8, color);
        let out = render(&cloud, &cam, &BackgroundModel::black(), RasterOptions::production()).unwrap();
        assert_relative_eq!(out.color.get(16, 16), color * 0.8, epsilon = 1e-9);
        assert_relative_eq!(out.alpha.get(16, 16), 0.8, epsilon = 1e-12);
        assert_relative_eq!(out.depth.get(16, 16), 0.8 * 3.0, epsilon = 1e-9);
        let dn = out.depth_normalized();
        assert_relative_eq!(dn.get(16, 16), 3.0, epsilon = 1e-9);
        assert!(out.zvar.get(16, 16).abs() < 1e-9);
    }

    #[test]
    fn coincident_gaussians_composite_front_to_back() {
        let cam = cam(33);
        let c1 = Vector3::new(0.9, 0.1, 0.2);
        let c2 = Vector3::new(0.2, 0.8, 0.4);
        let bg = Vector3::new(0.25, 0.5, 0.125);
        let mut cloud = one_gaussian(0.5, c1);
        cloud.append(one_gaussian(0.5, c2));
        let out = render(&cloud, &cam, &BackgroundModel::Constant(bg), RasterOptions::production()).unwrap();
        let want = c1 * 0.5 + c2 * 0.25 + bg * 0.25;
        assert_relative_eq!(out.color.get(16, 16), want, epsilon = 1e-9);
        assert_relative_eq!(out.alpha.get(16, 16), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn empty_pixel_shows_background_with_zero_alpha() {
        let cam = cam(32);
        let bg = Vector3::new(0.3, 0.6, 0.9);
        let out = composite(
            Vec::new(),
            bin_tiles::<f64>(&[], 32, 32, &RasterOptions::production()),
            &cam,
            &BackgroundModel::Constant(bg),
            RasterOptions::production(),
            0,
        );
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(out.color.get(x, y), bg);
                assert_eq!(out.alpha.get(x, y), 0.0);
                assert_eq!(out.depth.get(x, y), 0.0);
                assert_eq!(out.zvar.get(x, y), 0.0);
                assert_eq!(out.transmittance.get(x, y), 1.0);
            }
        }
    }

    #[test]
    fn alpha_plus_transmittance_is_exactly_one() {
        let cam = cam(48);
        let mut cloud = one_gaussian(0.7, Vector3::new(0.5, 0.5, 0.5));
        cloud.append(one_gaussian(0.6, Vector3::new(0.1, 0.9, 0.3)));
        cloud.positions[1] = Vector3::new(0.3, 0.2, -0.1);
        let out = render(&cloud, &cam, &BackgroundModel::black(), RasterOptions::production()).unwrap();
        let tape = out.tape.as_ref().unwrap();
        for i in 0..out.alpha.data.len() {
            assert_eq!(out.alpha.data[i], 1.0 - out.transmittance.data[i]);
            assert!(out.alpha.data[i] >= 0.0 && out.alpha.data[i] <= 1.0);
            let m0 = tape.weight_sum.data[i];
            assert!(m0 >= 0.0 && m0 <= 1.0 + 1e-12, "weight sum {m0}");
            assert!(out.zvar.data[i] >= -1e-7);
        }
    }

    #[test]
    fn storage_order_does_not_change_the_image() {
        let cam = cam(40);
        let mut cloud = one_gaussian(0.6, Vector3::new(0.8, 0.2, 0.1));
        cloud.append(one_gaussian(0.5, Vector3::new(0.1, 0.7, 0.9)));
        cloud.append(one_gaussian(0.4, Vector3::new(0.3, 0.3, 0.8)));
        cloud.positions = vec![
            Vector3::new(0.0, 0.0, 0.1),
            Vector3::new(0.1, 0.4, -0.05),
            Vector3::new(-0.15, -0.2, 0.0),
        ];
        let mut reversed = cloud.clone();
        reversed.positions.reverse();
        reversed.log_scales.reverse();
        reversed.rotations.reverse();
        reversed.color_params.reverse();
        reversed.opacity_logits.reverse();
        let bg = BackgroundModel::Constant(Vector3::new(0.1, 0.1, 0.1));
        let a = render(&cloud, &cam, &bg, RasterOptions::production()).unwrap();
        let b = render(&reversed, &cam, &bg, RasterOptions::production()).unwrap();
        assert_eq!(a.color.data, b.color.data);
        assert_eq!(a.depth.data, b.depth.data);
    }

    #[test]
    fn early_termination_stops_behind_opaque_splats() {
        let cam = cam(33);
        let mut cloud = one_gaussian(0.98, Vector3::new(0.9, 0.05, 0.05));
        for k in 1..8 {
            let mut g = one_gaussian(0.98, Vector3::new(0.05, 0.9, 0.05));
            g.positions[0] = Vector3::new(0.0, 0.4 * k as f64, 0.0);
            cloud.append(g);
        }
        let out = render(&cloud, &cam, &BackgroundModel::black(), RasterOptions::production()).unwrap();
        // After four 0.98-alpha layers transmittance is 1.6e-7 < 1e-4, so
        // the remaining layers never contribute.
        let t = out.transmittance.get(16, 16);
        assert!(t < 1e-4 && t > 0.0);
        let exact = render(&cloud, &cam, &BackgroundModel::black(), RasterOptions::exact()).unwrap();
        assert!(exact.transmittance.get(16, 16) < t);
    }
}
