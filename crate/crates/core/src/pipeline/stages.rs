//! The two optimization stages as pure gradient assemblers. A step renders
//! the batch, injects score-distillation pixel gradients through the
//! rasterizer backward pass, and (per stage) adds the point-distillation or
//! regularizer terms; applying the update is the caller's job.

use nalgebra::Vector3;
use rand::Rng;

use crate::buffer::Image;
use crate::camera::Camera;
use crate::error::GsError;
use crate::gaussians::{normalize_points_to_unit_cube, GaussianCloud, OPACITY_MAX, OPACITY_MIN};
use crate::grad::{backward, OutputGrads, ParamGrads};
use crate::guidance::{
    draw_noise_image, draw_noise_points, sds_image_grad, sds_point_grad, Condition,
    ImageScoreProvider, NoiseSchedule, PointScoreProvider,
};
use crate::math::{c, sigmoid, Real};
use crate::rasterizer::{render, BackgroundModel, RasterOptions};

use super::config::{LossWeights, MeanMode, StageKind};
use super::StepMetrics;

fn zero_metrics(stage: StageKind, n: usize) -> StepMetrics {
    StepMetrics {
        iteration: 0,
        stage,
        n_gaussians: n,
        sds_image_norm: 0.0,
        sds_point_norm: 0.0,
        mean_loss: 0.0,
        opacity_loss: 0.0,
        grad_norm: 0.0,
        seconds: 0.0,
    }
}

/// Renders each camera, injects the λ_SDS-weighted image-distillation pixel
/// gradient through the backward pass, and averages over the batch. Returns
/// the averaged gradients and the batch-averaged norm of the injected field.
fn image_sds_pass<R: Rng>(
    cloud: &GaussianCloud<f32>,
    background: &BackgroundModel<f32>,
    provider: Option<&dyn ImageScoreProvider<f32>>,
    lambda_sds: f64,
    cams: &[Camera<f32>],
    schedule: &NoiseSchedule,
    prompt: &str,
    rng: &mut R,
) -> Result<(ParamGrads<f32>, f64), GsError> {
    let mut total = ParamGrads::zeros(cloud.len(), background);
    if provider.is_none() || lambda_sds == 0.0 {
        return Ok((total, 0.0));
    }
    let mut sq_norm = 0.0f64;
    for cam in cams {
        let out = render(cloud, cam, background, RasterOptions::production())?;
        let t = schedule.sample_t(rng);
        let eps = draw_noise_image::<f32, _>(cam.width, cam.height, rng);
        let condition = Condition::TextWithView { prompt: prompt.to_string(), camera: cam.clone() };
        let mut d_color = sds_image_grad(provider, &out.color, t, &eps, schedule, &condition)?;
        let lam = lambda_sds as f32;
        for px in d_color.data.iter_mut() {
            *px *= lam;
            sq_norm += px.norm_squared() as f64;
        }
        let g = backward(&OutputGrads::color_only(d_color), &out, cloud, cam, background)?;
        total.add(&g);
    }
    let inv = 1.0 / cams.len() as f64;
    total.scale(inv as f32);
    Ok((total, sq_norm.sqrt() * inv))
}

/// Geometry-stage gradients: per-camera image distillation plus one
/// point-distillation draw on the bounding-box-normalized positions, whose
/// gradient lands directly on `d_positions` (scaled back through the
/// normalization, bypassing the renderer).
#[allow(clippy::too_many_arguments)]
pub fn geometry_step<R: Rng>(
    cloud: &GaussianCloud<f32>,
    background: &BackgroundModel<f32>,
    image_provider: Option<&dyn ImageScoreProvider<f32>>,
    point_provider: Option<&dyn PointScoreProvider<f32>>,
    weights: &LossWeights,
    cams: &[Camera<f32>],
    schedule: &NoiseSchedule,
    prompt: &str,
    rng: &mut R,
) -> Result<(ParamGrads<f32>, StepMetrics), GsError> {
    if cams.is_empty() {
        return Err(GsError::empty("geometry step needs at least one camera"));
    }
    weights.validate()?;
    let (mut grads, sds_image_norm) = image_sds_pass(
        cloud,
        background,
        image_provider,
        weights.lambda_sds,
        cams,
        schedule,
        prompt,
        rng,
    )?;

    let mut sds_point_norm = 0.0f64;
    if weights.lambda_3d > 0.0 && point_provider.is_some() {
        let mut pts = cloud.positions.clone();
        let transform = normalize_points_to_unit_cube(&mut pts);
        let t = schedule.sample_t(rng);
        let eps = draw_noise_points::<f32, _>(pts.len(), rng);
        let condition =
            if prompt.is_empty() { Condition::Empty } else { Condition::Text(prompt.to_string()) };
        let g = sds_point_grad(point_provider, &pts, t, &eps, schedule, &condition)?;
        // p_norm = (p − center)/scale, so the world-space gradient is 1/scale
        // times the normalized-space one.
        let lam = weights.lambda_3d as f32 / transform.scale;
        for i in 0..pts.len() {
            let add = g[i] * lam;
            grads.d_positions[i] += add;
            sds_point_norm += add.norm_squared() as f64;
        }
        sds_point_norm = sds_point_norm.sqrt();
    }

    let mut metrics = zero_metrics(StageKind::Geometry, cloud.len());
    metrics.sds_image_norm = sds_image_norm;
    metrics.sds_point_norm = sds_point_norm;
    metrics.grad_norm = grads.global_norm() as f64;
    Ok((grads, metrics))
}

/// `λ·Σ‖p_i − ref_i‖` and its position gradient; `reference = None` anchors
/// to the origin. The gradient at an exact anchor point is zero.
pub fn mean_anchor_grads<T: Real>(
    positions: &[Vector3<T>],
    reference: Option<&[Vector3<T>]>,
    lambda: f64,
) -> (T, Vec<Vector3<T>>) {
    let lam = c::<T>(lambda);
    let mut loss = T::zero();
    let mut grads = vec![Vector3::zeros(); positions.len()];
    for (i, p) in positions.iter().enumerate() {
        let delta = match reference {
            Some(r) => p - r[i],
            None => *p,
        };
        let norm = delta.norm();
        loss += lam * norm;
        if norm > T::zero() {
            grads[i] = delta * (lam / norm);
        }
    }
    (loss, grads)
}

/// `λ·Σ sg(‖p_i‖)·o_i` and its opacity-logit gradient. The distance factor
/// is a stop-gradient weight: the term never contributes to position
/// gradients. The chain through the opacity activation is zero where the
/// sigmoid sits in the clamped bands, matching the renderer's backward pass.
pub fn opacity_distance_grads<T: Real>(
    cloud: &GaussianCloud<T>,
    lambda: f64,
) -> (T, Vec<T>) {
    let lam = c::<T>(lambda);
    let lo = c::<T>(OPACITY_MIN);
    let hi = c::<T>(OPACITY_MAX);
    let mut loss = T::zero();
    let mut d_logits = vec![T::zero(); cloud.len()];
    for i in 0..cloud.len() {
        let w = cloud.positions[i].norm();
        let s = sigmoid(cloud.opacity_logits[i]);
        let o = s.max(lo).min(hi);
        loss += lam * w * o;
        if s > lo && s < hi {
            d_logits[i] = lam * w * s * (T::one() - s);
        }
    }
    (loss, d_logits)
}

/// Refinement-stage gradients: image distillation plus the position-anchor
/// and distance-weighted opacity regularizers. `mean_mode = Deviation`
/// anchors positions to the snapshot taken when refinement started and
/// therefore requires one; `Literal` anchors to the origin.
#[allow(clippy::too_many_arguments)]
pub fn refine_step<R: Rng>(
    cloud: &GaussianCloud<f32>,
    background: &BackgroundModel<f32>,
    image_provider: Option<&dyn ImageScoreProvider<f32>>,
    weights: &LossWeights,
    cams: &[Camera<f32>],
    schedule: &NoiseSchedule,
    prompt: &str,
    mean_mode: MeanMode,
    rng: &mut R,
) -> Result<(ParamGrads<f32>, StepMetrics), GsError> {
    if cams.is_empty() {
        return Err(GsError::empty("refine step needs at least one camera"));
    }
    weights.validate()?;
    let reference: Option<&[Vector3<f32>]> = match mean_mode {
        MeanMode::Deviation => Some(
            cloud
                .snapshot_positions
                .as_deref()
                .ok_or_else(|| GsError::invalid("deviation mode requires snapshot positions"))?,
        ),
        MeanMode::Literal => None,
    };

    let (mut grads, sds_image_norm) = image_sds_pass(
        cloud,
        background,
        image_provider,
        weights.lambda_sds,
        cams,
        schedule,
        prompt,
        rng,
    )?;

    let (mean_loss, d_pos) = mean_anchor_grads(&cloud.positions, reference, weights.lambda_mean);
    for i in 0..cloud.len() {
        grads.d_positions[i] += d_pos[i];
    }
    let (opacity_loss, d_logits) = opacity_distance_grads(cloud, weights.lambda_opacity);
    for i in 0..cloud.len() {
        grads.d_opacity_logits[i] += d_logits[i];
    }

    let mut metrics = zero_metrics(StageKind::Refine, cloud.len());
    metrics.sds_image_norm = sds_image_norm;
    metrics.mean_loss = mean_loss as f64;
    metrics.opacity_loss = opacity_loss as f64;
    metrics.grad_norm = grads.global_norm() as f64;
    Ok((grads, metrics))
}

/// Image score provider that renders a fixed target scene from the
/// conditioning camera and treats that render as the clean image — a
/// per-view exact denoiser that drives end-to-end runs without a hosted
/// diffusion model.
pub struct SceneImageOracle {
    pub cloud: GaussianCloud<f32>,
    pub background: BackgroundModel<f32>,
    pub schedule: NoiseSchedule,
}

impl ImageScoreProvider<f32> for SceneImageOracle {
    fn predict_noise(
        &self,
        x_t: &Image<f32>,
        t: usize,
        condition: &Condition<f32>,
    ) -> Result<Image<f32>, GsError> {
        let Condition::TextWithView { camera, .. } = condition else {
            return Err(GsError::Provider(
                "scene oracle requires a camera in the condition".to_string(),
            ));
        };
        if camera.width != x_t.width || camera.height != x_t.height {
            return Err(GsError::ShapeMismatch(format!(
                "noisy image is {}x{} but the conditioning camera renders {}x{}",
                x_t.width, x_t.height, camera.width, camera.height
            )));
        }
        let target = render(&self.cloud, camera, &self.background, RasterOptions::production())?;
        let ab = self.schedule.alpha_bar(t) as f32;
        let sqrt_ab = ab.sqrt();
        let inv = 1.0 / (1.0 - ab).sqrt();
        let mut eps = Image::zeros(x_t.width, x_t.height);
        for (e, (x, s)) in eps.data.iter_mut().zip(x_t.data.iter().zip(target.color.data.iter())) {
            *e = (x - s * sqrt_ab) * inv;
        }
        Ok(eps)
    }
}
