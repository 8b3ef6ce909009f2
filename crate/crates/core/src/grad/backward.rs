//! Reverse-mode gradients of the rendered buffers with respect to all raw
//! cloud parameters and the background model.
//!
//! Each pixel's contribution list is traversed front-to-back (forward
//! rendering order) twice: once to total the weighted downstream
//! sensitivities, once to emit per-contribution gradients from the running
//! transmittance and the suffix of that total. Tiles produce private
//! gradient buffers that are reduced serially in canonical tile order, so
//! results are bitwise independent of the worker count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::buffer::{Image, Plane};
use crate::camera::Camera;
use crate::error::GsError;
use crate::gaussians::{GaussianCloud, OPACITY_MAX, OPACITY_MIN};
use crate::math::{c, rotation_from_unit_quat, rotation_quat_derivatives, sigmoid, Real};
use crate::rasterizer::composite_internals::{perspective_jacobian, pixel_ray, splat_eval};
use crate::rasterizer::{BackgroundMlp, BackgroundModel, RenderOutput, TILE_SIZE};

/// Upstream gradients of the rendered buffers. Only `d_color` is required.
#[derive(Clone, Debug)]
pub struct OutputGrads<T = f32> {
    pub d_color: Image<T>,
    pub d_alpha: Option<Plane<T>>,
    /// Gradient of the composited (unnormalized) depth Σ w_i z_i.
    pub d_depth: Option<Plane<T>>,
    /// Gradient of the alpha-normalized depth.
    pub d_depth_normalized: Option<Plane<T>>,
    pub d_zvar: Option<Plane<T>>,
}

impl<T: Real> OutputGrads<T> {
    pub fn color_only(d_color: Image<T>) -> Self {
        OutputGrads {
            d_color,
            d_alpha: None,
            d_depth: None,
            d_depth_normalized: None,
            d_zvar: None,
        }
    }
}

/// Gradients of the background model parameters.
#[derive(Clone, Debug)]
pub enum BackgroundGrads<T = f32> {
    /// Reported for completeness; the constant background is not optimized.
    Constant(Vector3<T>),
    Mlp(Box<BackgroundMlp<T>>),
}

impl<T: Real> BackgroundGrads<T> {
    pub fn zeros_like(model: &BackgroundModel<T>) -> Self {
        match model {
            BackgroundModel::Constant(_) => BackgroundGrads::Constant(Vector3::zeros()),
            BackgroundModel::Mlp(_) => BackgroundGrads::Mlp(Box::new(BackgroundMlp::zeros())),
        }
    }

    pub fn add(&mut self, other: &BackgroundGrads<T>) {
        match (self, other) {
            (BackgroundGrads::Constant(a), BackgroundGrads::Constant(b)) => *a += *b,
            (BackgroundGrads::Mlp(a), BackgroundGrads::Mlp(b)) => a.add_assign(b),
            _ => panic!("background gradient kinds disagree"),
        }
    }

    pub fn scale(&mut self, s: T) {
        match self {
            BackgroundGrads::Constant(a) => *a *= s,
            BackgroundGrads::Mlp(m) => m.scale(s),
        }
    }

    pub fn norm_squared(&self) -> T {
        match self {
            BackgroundGrads::Constant(_) => T::zero(),
            BackgroundGrads::Mlp(m) => m
                .to_flat()
                .iter()
                .fold(T::zero(), |acc, v| acc + *v * *v),
        }
    }
}

/// Gradients with respect to every raw parameter of a [`GaussianCloud`],
/// plus per-Gaussian screen-space positional gradient norms for adaptive
/// control. Culled Gaussians hold zeros.
#[derive(Clone, Debug)]
pub struct ParamGrads<T = f32> {
    pub d_positions: Vec<Vector3<T>>,
    pub d_log_scales: Vec<Vector3<T>>,
    pub d_rotations: Vec<Vector4<T>>,
    pub d_color_params: Vec<Vector3<T>>,
    pub d_opacity_logits: Vec<T>,
    pub d_background: BackgroundGrads<T>,
    /// ‖∂L/∂mean2d‖ per Gaussian for this camera.
    pub view_space_pos_grad_norm: Vec<T>,
    /// Whether the Gaussian was projected and overlapped the screen.
    pub visible: Vec<bool>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros(n: usize, background: &BackgroundModel<T>) -> Self {
        ParamGrads {
            d_positions: vec![Vector3::zeros(); n],
            d_log_scales: vec![Vector3::zeros(); n],
            d_rotations: vec![Vector4::zeros(); n],
            d_color_params: vec![Vector3::zeros(); n],
            d_opacity_logits: vec![T::zero(); n],
            d_background: BackgroundGrads::zeros_like(background),
            view_space_pos_grad_norm: vec![T::zero(); n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_positions.is_empty()
    }

    /// Element-wise sum; `visible` is OR-ed, the positional-gradient norm
    /// accumulates additively (per-view norms are summed by callers that
    /// average over a batch).
    pub fn add(&mut self, other: &ParamGrads<T>) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.d_positions[i] += other.d_positions[i];
            self.d_log_scales[i] += other.d_log_scales[i];
            self.d_rotations[i] += other.d_rotations[i];
            self.d_color_params[i] += other.d_color_params[i];
            self.d_opacity_logits[i] += other.d_opacity_logits[i];
            self.view_space_pos_grad_norm[i] += other.view_space_pos_grad_norm[i];
            self.visible[i] = self.visible[i] || other.visible[i];
        }
        self.d_background.add(&other.d_background);
    }

    /// Scales every gradient (not the visibility flags).
    pub fn scale(&mut self, s: T) {
        for i in 0..self.len() {
            self.d_positions[i] *= s;
            self.d_log_scales[i] *= s;
            self.d_rotations[i] *= s;
            self.d_color_params[i] *= s;
            self.d_opacity_logits[i] *= s;
            self.view_space_pos_grad_norm[i] *= s;
        }
        self.d_background.scale(s);
    }

    /// l2 norm over every parameter gradient (background included).
    pub fn global_norm(&self) -> T {
        let mut acc = self.d_background.norm_squared();
        for i in 0..self.len() {
            acc += self.d_positions[i].norm_squared();
            acc += self.d_log_scales[i].norm_squared();
            acc += self.d_rotations[i].norm_squared();
            acc += self.d_color_params[i].norm_squared();
            acc += self.d_opacity_logits[i] * self.d_opacity_logits[i];
        }
        acc.sqrt()
    }

    pub fn assert_finite(&self) -> Result<(), GsError> {
        for i in 0..self.len() {
            let ok = self.d_positions[i].iter().all(|v| v.is_finite())
                && self.d_log_scales[i].iter().all(|v| v.is_finite())
                && self.d_rotations[i].iter().all(|v| v.is_finite())
                && self.d_color_params[i].iter().all(|v| v.is_finite())
                && self.d_opacity_logits[i].is_finite();
            if !ok {
                return Err(GsError::NonFinite(format!("gradient of gaussian {i}")));
            }
        }
        Ok(())
    }
}

/// Per-Gaussian pixel-space gradient accumulator (before chaining through
/// projection and activations).
#[derive(Clone, Copy)]
struct PixelSpaceAcc<T> {
    d_conic: Matrix2<T>,
    d_mean2d: Vector2<T>,
    d_color: Vector3<T>,
    d_opacity: T,
    d_depth: T,
}

impl<T: Real> PixelSpaceAcc<T> {
    fn zero() -> Self {
        PixelSpaceAcc {
            d_conic: Matrix2::zeros(),
            d_mean2d: Vector2::zeros(),
            d_color: Vector3::zeros(),
            d_opacity: T::zero(),
            d_depth: T::zero(),
        }
    }

    fn add(&mut self, o: &PixelSpaceAcc<T>) {
        self.d_conic += o.d_conic;
        self.d_mean2d += o.d_mean2d;
        self.d_color += o.d_color;
        self.d_opacity += o.d_opacity;
        self.d_depth += o.d_depth;
    }
}

struct TileOutput<T> {
    partials: Vec<PixelSpaceAcc<T>>,
    bg: BackgroundGrads<T>,
}

/// Computes gradients of the rendered buffers with respect to all raw cloud
/// parameters and the background.
///
/// `output` must carry the forward tape produced by [`crate::rasterizer::render`]
/// for this exact cloud, camera, and background.
pub fn backward<T: Real>(
    grads: &OutputGrads<T>,
    output: &RenderOutput<T>,
    cloud: &GaussianCloud<T>,
    cam: &Camera<T>,
    background: &BackgroundModel<T>,
) -> Result<ParamGrads<T>, GsError> {
    let tape = output
        .tape
        .as_ref()
        .ok_or_else(|| GsError::invalid("render output carries no forward tape"))?;
    if tape.n_gaussians != cloud.len() {
        return Err(GsError::ShapeMismatch(format!(
            "tape was built for {} gaussians, cloud has {}",
            tape.n_gaussians,
            cloud.len()
        )));
    }
    if grads.d_color.width != cam.width || grads.d_color.height != cam.height {
        return Err(GsError::ShapeMismatch("d_color does not match camera size".into()));
    }
    if tape.background.width != cam.width || tape.background.height != cam.height {
        return Err(GsError::ShapeMismatch("tape does not match camera size".into()));
    }

    let act = cloud.activate()?;
    let bins = &tape.bins;
    let options = tape.options;
    let projected = &tape.projected;
    let half = c::<T>(0.5);
    let two = c::<T>(2.0);

    // Phase 1: per-tile pixel-space gradients in private buffers.
    let tile_outputs: Vec<TileOutput<T>> = (0..bins.tile_count())
        .into_par_iter()
        .map(|tile| {
            let tx = tile % bins.tiles_x;
            let ty = tile / bins.tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let xn = (x0 + TILE_SIZE).min(cam.width) - x0;
            let yn = (y0 + TILE_SIZE).min(cam.height) - y0;
            let list = bins.tile_entries(tile);
            let mut partials = vec![PixelSpaceAcc::zero(); list.len()];
            let mut bg = BackgroundGrads::zeros_like(background);

            for dy in 0..yn {
                let y = y0 + dy;
                let py = c::<T>(y as f64 + 0.5);
                for dx in 0..xn {
                    let x = x0 + dx;
                    let px = c::<T>(x as f64 + 0.5);
                    let pix = grads.d_color.index(x, y);

                    let u_c = grads.d_color.data[pix];
                    let u_alpha = grads.d_alpha.as_ref().map_or(T::zero(), |p| p.data[pix]);
                    let u_depth = grads.d_depth.as_ref().map_or(T::zero(), |p| p.data[pix]);
                    let u_dn = grads
                        .d_depth_normalized
                        .as_ref()
                        .map_or(T::zero(), |p| p.data[pix]);
                    let u_zvar = grads.d_zvar.as_ref().map_or(T::zero(), |p| p.data[pix]);

                    let m0 = tape.weight_sum.data[pix];
                    let m1 = output.depth.data[pix];
                    let m2 = tape.depth_m2.data[pix];
                    let t_final = output.transmittance.data[pix];
                    let bg_color = tape.background.data[pix];

                    // Moment-space upstreams from the normalized outputs.
                    let (u_m0, u_m1, u_m2) = if m0 > T::zero() {
                        let inv = T::one() / m0;
                        let inv2 = inv * inv;
                        let u_m1 = u_depth + u_dn * inv - u_zvar * two * m1 * inv2;
                        let u_m2 = u_zvar * inv;
                        let u_m0 = -u_dn * m1 * inv2
                            + u_zvar * (two * m1 * m1 * inv2 * inv - m2 * inv2);
                        (u_m0, u_m1, u_m2)
                    } else {
                        (T::zero(), u_depth, T::zero())
                    };
                    let u_t_final = u_c.dot(&bg_color) - u_alpha;

                    // Background weights see u_c through the T_final term.
                    let u_bg = u_c * t_final;
                    match (&mut bg, background) {
                        (BackgroundGrads::Constant(g), _) => *g += u_bg,
                        (BackgroundGrads::Mlp(g), BackgroundModel::Mlp(mlp)) => {
                            mlp.accumulate_grad(&pixel_ray(cam, x, y), &u_bg, g);
                        }
                        _ => unreachable!("zeros_like matches the model kind"),
                    }

                    let has_splat_grad = u_c != Vector3::zeros()
                        || u_alpha != T::zero()
                        || u_m0 != T::zero()
                        || u_m1 != T::zero()
                        || u_m2 != T::zero();
                    if list.is_empty() || !has_splat_grad {
                        continue;
                    }

                    // Pass A: total Σ_j w_j b_j over admitted contributions.
                    let mut b_total = T::zero();
                    {
                        let mut trans = T::one();
                        for &pi in list {
                            let g = &projected[pi as usize];
                            let Some(ev) = splat_eval(g, px, py, &options) else {
                                continue;
                            };
                            let w = ev.alpha * trans;
                            let z = g.view_depth;
                            let b = u_c.dot(&g.color) + u_m0 + u_m1 * z + u_m2 * z * z;
                            b_total += w * b;
                            trans *= T::one() - ev.alpha;
                            if trans < options.early_termination {
                                break;
                            }
                        }
                    }

                    // Pass B: forward-order gradient emission.
                    let mut trans = T::one();
                    let mut b_prefix = T::zero();
                    for (k, &pi) in list.iter().enumerate() {
                        let g = &projected[pi as usize];
                        let Some(ev) = splat_eval(g, px, py, &options) else {
                            continue;
                        };
                        let alpha = ev.alpha;
                        let w = alpha * trans;
                        let z = g.view_depth;
                        let b = u_c.dot(&g.color) + u_m0 + u_m1 * z + u_m2 * z * z;
                        b_prefix += w * b;
                        let suffix = b_total - b_prefix;
                        let inv_rest = T::one() / (T::one() - alpha);
                        let d_alpha =
                            b * trans - suffix * inv_rest - u_t_final * t_final * inv_rest;

                        let acc = &mut partials[k];
                        acc.d_color += u_c * w;
                        acc.d_depth += w * (u_m1 + two * z * u_m2);
                        if !ev.clamped {
                            acc.d_opacity += d_alpha * ev.gexp;
                            let d_q = -half * d_alpha * g.opacity * ev.gexp;
                            let (dx_, dy_) = (ev.dx, ev.dy);
                            acc.d_conic[(0, 0)] += d_q * dx_ * dx_;
                            acc.d_conic[(0, 1)] += d_q * dx_ * dy_;
                            acc.d_conic[(1, 0)] += d_q * dx_ * dy_;
                            acc.d_conic[(1, 1)] += d_q * dy_ * dy_;
                            // δ = pixel − mean2d, so the mean sees −∂q/∂δ.
                            let cd = g.conic * Vector2::new(dx_, dy_);
                            acc.d_mean2d -= cd * (two * d_q);
                        }

                        trans *= T::one() - alpha;
                        if trans < options.early_termination {
                            break;
                        }
                    }
                }
            }
            TileOutput { partials, bg }
        })
        .collect();

    // Phase 2: serial reduction in canonical tile order.
    let mut pixel_acc = vec![PixelSpaceAcc::zero(); projected.len()];
    let mut background_grads = BackgroundGrads::zeros_like(background);
    for (tile, out) in tile_outputs.into_iter().enumerate() {
        let list = bins.tile_entries(tile);
        for (k, &pi) in list.iter().enumerate() {
            pixel_acc[pi as usize].add(&out.partials[k]);
        }
        background_grads.add(&out.bg);
    }

    // Phase 3: chain through conic → projection → covariance → activations.
    let rot = cam.rotation();
    let focal = cam.focal();
    let lo = c::<T>(OPACITY_MIN);
    let hi = c::<T>(OPACITY_MAX);
    let per_gaussian: Vec<(u32, RawGrads<T>)> = projected
        .par_iter()
        .zip(pixel_acc.par_iter())
        .map(|(g, acc)| {
            let src = g.source_index as usize;
            let mut raw = RawGrads::zero();

            // Conic → dilated 2D covariance (inverse rule, symmetric forms).
            let d_cov2d = -(g.conic * acc.d_conic * g.conic);

            // 2D covariance → view covariance and Jacobian.
            let v = g.view_pos;
            let j = perspective_jacobian(focal, &v);
            let cov_view = rot * act.covariances[src] * rot.transpose();
            let d_j = (d_cov2d + d_cov2d.transpose()) * j * cov_view;
            let d_cov_view = j.transpose() * d_cov2d * j;

            // View position gradient: projection of the mean, Jacobian
            // entries, and the composited depth.
            let mut d_v = j.transpose() * acc.d_mean2d;
            let depth = g.view_depth;
            let inv_d = T::one() / depth;
            let inv_d2 = inv_d * inv_d;
            let inv_d3 = inv_d2 * inv_d;
            d_v[0] += d_j[(0, 2)] * focal * inv_d2;
            d_v[1] += -d_j[(1, 2)] * focal * inv_d2;
            d_v[2] += d_j[(0, 0)] * focal * inv_d2
                + d_j[(0, 2)] * two * focal * v[0] * inv_d3
                - d_j[(1, 1)] * focal * inv_d2
                - d_j[(1, 2)] * two * focal * v[1] * inv_d3;
            d_v[2] -= acc.d_depth;

            raw.d_position = rot.transpose() * d_v;

            // World covariance → log-scales and quaternion.
            let d_cov_world = rot.transpose() * d_cov_view * rot;
            let s = act.scales[src];
            let q_unit = act.rotations[src];
            let r = rotation_from_unit_quat(&q_unit);
            let m = r * Matrix3::from_diagonal(&s);
            let d_m = (d_cov_world + d_cov_world.transpose()) * m;
            let d_r = d_m * Matrix3::from_diagonal(&s);
            for k in 0..3 {
                let ds_k = r.column(k).dot(&d_m.column(k));
                raw.d_log_scale[k] = ds_k * s[k];
            }
            let dr_dq = rotation_quat_derivatives(&q_unit);
            let mut d_q_unit = Vector4::zeros();
            for k in 0..4 {
                d_q_unit[k] = d_r.component_mul(&dr_dq[k]).sum();
            }
            let q_raw = cloud.rotations[src];
            let norm = q_raw.norm();
            raw.d_rotation = (d_q_unit - q_unit * q_unit.dot(&d_q_unit)) / norm;

            // Appearance activations.
            let col = act.colors[src];
            raw.d_color_param = Vector3::new(
                acc.d_color[0] * col[0] * (T::one() - col[0]),
                acc.d_color[1] * col[1] * (T::one() - col[1]),
                acc.d_color[2] * col[2] * (T::one() - col[2]),
            );
            let s_op = sigmoid(cloud.opacity_logits[src]);
            raw.d_opacity_logit = if s_op > lo && s_op < hi {
                acc.d_opacity * s_op * (T::one() - s_op)
            } else {
                T::zero()
            };
            raw.pos_grad_norm = acc.d_mean2d.norm();
            (g.source_index, raw)
        })
        .collect();

    let mut out = ParamGrads::zeros(cloud.len(), background);
    out.d_background = background_grads;
    for (pi, (src, raw)) in per_gaussian.into_iter().enumerate() {
        let s = src as usize;
        out.d_positions[s] = raw.d_position;
        out.d_log_scales[s] = raw.d_log_scale;
        out.d_rotations[s] = raw.d_rotation;
        out.d_color_params[s] = raw.d_color_param;
        out.d_opacity_logits[s] = raw.d_opacity_logit;
        out.view_space_pos_grad_norm[s] = raw.pos_grad_norm;
        out.visible[s] = bins.touched[pi];
    }
    Ok(out)
}

struct RawGrads<T> {
    d_position: Vector3<T>,
    d_log_scale: Vector3<T>,
    d_rotation: Vector4<T>,
    d_color_param: Vector3<T>,
    d_opacity_logit: T,
    pos_grad_norm: T,
}

impl<T: Real> RawGrads<T> {
    fn zero() -> Self {
        RawGrads {
            d_position: Vector3::zeros(),
            d_log_scale: Vector3::zeros(),
            d_rotation: Vector4::zeros(),
            d_color_param: Vector3::zeros(),
            d_opacity_logit: T::zero(),
            pos_grad_norm: T::zero(),
        }
    }
}
