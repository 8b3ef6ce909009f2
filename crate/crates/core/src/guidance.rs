//! Score-distillation guidance: DDPM noise schedules, forward noising, and
//! SDS gradient assembly for rendered images and point sets.
//!
//! The gradient of the distillation loss never differentiates through the
//! score network. For images, [`sds_image_grad`] produces a per-pixel field
//! `w(t)·(ε̂ − ε)` that the caller feeds into the rasterizer backward pass as
//! the upstream color gradient; for point sets, [`sds_point_grad`] produces a
//! per-point field added directly to the position gradients.
//!
//! Score providers are pluggable. The [`DiracImageOracle`] and
//! [`DiracPointOracle`] are exact denoisers of a point-mass data distribution
//! concentrated on a known target, which makes every SDS identity checkable
//! in closed form without a hosted diffusion model. [`ExternalImageScore`]
//! and [`ExternalPointScore`] forward requests to a local socket so a real
//! backend can be attached later.

use std::io::{Read as _, Write as _};
use std::net::TcpStream;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::buffer::Image;
use crate::camera::Camera;
use crate::error::GsError;
use crate::math::{c, Real};

/// Default timestep sampling window as fractions of the schedule length.
pub const DEFAULT_T_WINDOW: [f64; 2] = [0.02, 0.98];

/// A linear-beta DDPM schedule.
///
/// Timesteps are 1-based: `t ∈ [1, len]`, with `ᾱ_t = Π_{s≤t}(1 − β_s)`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Timestep sampling window as fractions `[lo, hi]` of the length.
    pub t_range_frac: [f64; 2],
}

/// Builds a linear-beta schedule with cumulative-product `ᾱ`.
pub fn ddpm_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, GsError> {
    if steps == 0 {
        return Err(GsError::invalid("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(GsError::invalid(format!(
            "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut betas = Vec::with_capacity(steps);
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0f64;
    for i in 0..steps {
        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
        let beta = beta_min + (beta_max - beta_min) * frac;
        prod *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        betas,
        alpha_bars,
        t_range_frac: DEFAULT_T_WINDOW,
    })
}

impl NoiseSchedule {
    /// The standard image-diffusion schedule: 1000 steps, β ∈ [1e-4, 2e-2].
    pub fn standard() -> Self {
        ddpm_schedule(1000, 1e-4, 2e-2).expect("valid default range")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<(), GsError> {
        if t == 0 || t > self.len() {
            return Err(GsError::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// SDS weighting `w(t) = 1 − ᾱ_t`.
    pub fn sds_weight(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar(t)
    }

    /// Inclusive timestep window spanned by `t_range_frac`.
    pub fn t_window(&self) -> (usize, usize) {
        let n = self.len() as f64;
        let lo = ((self.t_range_frac[0] * n).ceil() as usize).max(1);
        let hi = ((self.t_range_frac[1] * n).floor() as usize).min(self.len());
        (lo, hi.max(lo))
    }

    /// Uniform draw from the timestep window.
    pub fn sample_t<R: Rng>(&self, rng: &mut R) -> usize {
        let (lo, hi) = self.t_window();
        rng.random_range(lo..=hi)
    }

    /// The timestep whose `ᾱ` is closest to the given value.
    pub fn t_for_alpha_bar(&self, target: f64) -> usize {
        let mut best = 1;
        let mut best_d = f64::INFINITY;
        for t in 1..=self.len() {
            let d = (self.alpha_bar(t) - target).abs();
            if d < best_d {
                best_d = d;
                best = t;
            }
        }
        best
    }
}

/// Conditioning token passed through to score providers. Analytic oracles
/// ignore it; external backends may use the prompt and camera.
#[derive(Clone, Debug)]
pub enum Condition<T: Real = f32> {
    Empty,
    Text(String),
    TextWithView { prompt: String, camera: Camera<T> },
}

/// Predicts the noise component of a noisy rendered image.
pub trait ImageScoreProvider<T: Real = f32> {
    fn predict_noise(
        &self,
        x_t: &Image<T>,
        t: usize,
        condition: &Condition<T>,
    ) -> Result<Image<T>, GsError>;
}

/// Predicts the noise component of a noisy point set.
pub trait PointScoreProvider<T: Real = f32> {
    fn predict_noise(
        &self,
        p_t: &[Vector3<T>],
        t: usize,
        condition: &Condition<T>,
    ) -> Result<Vec<Vector3<T>>, GsError>;
}

/// Exact denoiser of a point-mass image distribution at `target`:
/// `ε̂ = (x_t − √ᾱ_t·x*) / √(1−ᾱ_t)`.
#[derive(Clone, Debug)]
pub struct DiracImageOracle<T: Real = f32> {
    pub target: Image<T>,
    pub schedule: NoiseSchedule,
}

impl<T: Real> ImageScoreProvider<T> for DiracImageOracle<T> {
    fn predict_noise(
        &self,
        x_t: &Image<T>,
        t: usize,
        _condition: &Condition<T>,
    ) -> Result<Image<T>, GsError> {
        self.schedule.check_t(t)?;
        if x_t.width != self.target.width || x_t.height != self.target.height {
            return Err(GsError::ShapeMismatch(format!(
                "oracle target is {}x{}, got {}x{}",
                self.target.width, self.target.height, x_t.width, x_t.height
            )));
        }
        let ab = self.schedule.alpha_bar(t);
        let root_ab = c::<T>(ab.sqrt());
        let inv_root = c::<T>(1.0 / (1.0 - ab).sqrt());
        let mut out = Image::zeros(x_t.width, x_t.height);
        for i in 0..out.data.len() {
            out.data[i] = (x_t.data[i] - self.target.data[i] * root_ab) * inv_root;
        }
        Ok(out)
    }
}

/// Exact denoiser of a point-mass distribution over index-aligned positions.
#[derive(Clone, Debug)]
pub struct DiracPointOracle<T: Real = f32> {
    pub target: Vec<Vector3<T>>,
    pub schedule: NoiseSchedule,
}

impl<T: Real> PointScoreProvider<T> for DiracPointOracle<T> {
    fn predict_noise(
        &self,
        p_t: &[Vector3<T>],
        t: usize,
        _condition: &Condition<T>,
    ) -> Result<Vec<Vector3<T>>, GsError> {
        self.schedule.check_t(t)?;
        if p_t.len() != self.target.len() {
            return Err(GsError::ShapeMismatch(format!(
                "oracle target has {} points, got {}",
                self.target.len(),
                p_t.len()
            )));
        }
        let ab = self.schedule.alpha_bar(t);
        let root_ab = c::<T>(ab.sqrt());
        let inv_root = c::<T>(1.0 / (1.0 - ab).sqrt());
        Ok(p_t
            .iter()
            .zip(&self.target)
            .map(|(p, q)| (p - q * root_ab) * inv_root)
            .collect())
    }
}

/// Standard-normal noise image.
pub fn draw_noise_image<T: Real, R: Rng>(width: usize, height: usize, rng: &mut R) -> Image<T> {
    let mut img = Image::zeros(width, height);
    for px in img.data.iter_mut() {
        *px = Vector3::new(
            c::<T>(rng.sample(StandardNormal)),
            c::<T>(rng.sample(StandardNormal)),
            c::<T>(rng.sample(StandardNormal)),
        );
    }
    img
}

/// Standard-normal noise for a point set.
pub fn draw_noise_points<T: Real, R: Rng>(n: usize, rng: &mut R) -> Vec<Vector3<T>> {
    (0..n)
        .map(|_| {
            Vector3::new(
                c::<T>(rng.sample(StandardNormal)),
                c::<T>(rng.sample(StandardNormal)),
                c::<T>(rng.sample(StandardNormal)),
            )
        })
        .collect()
}

/// Forward noising `x_t = √ᾱ_t·x + √(1−ᾱ_t)·ε`.
pub fn add_noise<T: Real>(
    x: &Image<T>,
    t: usize,
    eps: &Image<T>,
    schedule: &NoiseSchedule,
) -> Result<Image<T>, GsError> {
    schedule.check_t(t)?;
    if x.width != eps.width || x.height != eps.height {
        return Err(GsError::ShapeMismatch(format!(
            "image is {}x{}, noise is {}x{}",
            x.width, x.height, eps.width, eps.height
        )));
    }
    let ab = schedule.alpha_bar(t);
    let a = c::<T>(ab.sqrt());
    let b = c::<T>((1.0 - ab).sqrt());
    let mut out = Image::zeros(x.width, x.height);
    for i in 0..out.data.len() {
        out.data[i] = x.data[i] * a + eps.data[i] * b;
    }
    Ok(out)
}

/// Forward noising for point sets.
pub fn add_noise_points<T: Real>(
    p: &[Vector3<T>],
    t: usize,
    eps: &[Vector3<T>],
    schedule: &NoiseSchedule,
) -> Result<Vec<Vector3<T>>, GsError> {
    schedule.check_t(t)?;
    if p.len() != eps.len() {
        return Err(GsError::ShapeMismatch(format!(
            "{} points but {} noise rows",
            p.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let a = c::<T>(ab.sqrt());
    let b = c::<T>((1.0 - ab).sqrt());
    Ok(p.iter().zip(eps).map(|(x, e)| x * a + e * b).collect())
}

/// Assembles the image SDS gradient field `w(t)·(ε̂ − ε)` with
/// `w(t) = 1 − ᾱ_t`.
///
/// `provider = None` is the null provider (`ε̂ ≡ ε`): the gradient is
/// identically zero.
pub fn sds_image_grad<T: Real>(
    provider: Option<&dyn ImageScoreProvider<T>>,
    rendered: &Image<T>,
    t: usize,
    eps: &Image<T>,
    schedule: &NoiseSchedule,
    condition: &Condition<T>,
) -> Result<Image<T>, GsError> {
    let Some(provider) = provider else {
        schedule.check_t(t)?;
        return Ok(Image::zeros(rendered.width, rendered.height));
    };
    let x_t = add_noise(rendered, t, eps, schedule)?;
    let eps_hat = provider.predict_noise(&x_t, t, condition)?;
    if eps_hat.width != rendered.width || eps_hat.height != rendered.height {
        return Err(GsError::Provider(format!(
            "score shape {}x{} does not match input {}x{}",
            eps_hat.width, eps_hat.height, rendered.width, rendered.height
        )));
    }
    let w = c::<T>(schedule.sds_weight(t));
    let mut grad = Image::zeros(rendered.width, rendered.height);
    for i in 0..grad.data.len() {
        let g = (eps_hat.data[i] - eps.data[i]) * w;
        if !(g.x.is_finite() && g.y.is_finite() && g.z.is_finite()) {
            return Err(GsError::Provider("non-finite score output".into()));
        }
        grad.data[i] = g;
    }
    Ok(grad)
}

/// Assembles the point SDS gradient `w(t)·(ε̂_P − ε_P)`, applied directly to
/// position gradients by the caller (no chain through the renderer).
///
/// Positions are expected in the normalized `[-1,1]³` frame.
pub fn sds_point_grad<T: Real>(
    provider: Option<&dyn PointScoreProvider<T>>,
    positions: &[Vector3<T>],
    t: usize,
    eps: &[Vector3<T>],
    schedule: &NoiseSchedule,
    condition: &Condition<T>,
) -> Result<Vec<Vector3<T>>, GsError> {
    let Some(provider) = provider else {
        schedule.check_t(t)?;
        return Ok(vec![Vector3::zeros(); positions.len()]);
    };
    let p_t = add_noise_points(positions, t, eps, schedule)?;
    let eps_hat = provider.predict_noise(&p_t, t, condition)?;
    if eps_hat.len() != positions.len() {
        return Err(GsError::Provider(format!(
            "score returned {} rows for {} points",
            eps_hat.len(),
            positions.len()
        )));
    }
    let w = c::<T>(schedule.sds_weight(t));
    let mut grad = Vec::with_capacity(positions.len());
    for (h, e) in eps_hat.iter().zip(eps) {
        let g = (h - e) * w;
        if !(g.x.is_finite() && g.y.is_finite() && g.z.is_finite()) {
            return Err(GsError::Provider("non-finite score output".into()));
        }
        grad.push(g);
    }
    Ok(grad)
}

const EXTERNAL_KIND_IMAGE: u8 = 0;
const EXTERNAL_KIND_POINTS: u8 = 1;

/// One request/response round trip on the external score protocol.
///
/// Request: `[u32 len][u8 kind][u32 t][u32 ndim][u32 dims…][f32 payload]`,
/// response: `[u32 len][f32 payload]`, everything little-endian, `len`
/// counting the bytes that follow it. The response payload must match the
/// request payload length.
fn external_round_trip(
    addr: &str,
    kind: u8,
    t: usize,
    dims: &[u32],
    payload: &[f32],
) -> Result<Vec<f32>, GsError> {
    let mut stream = TcpStream::connect(addr)
        .map_err(|e| GsError::Provider(format!("connect {addr}: {e}")))?;
    let body_len = 1 + 4 + 4 + 4 * dims.len() + 4 * payload.len();
    let mut msg = Vec::with_capacity(4 + body_len);
    msg.extend_from_slice(&(body_len as u32).to_le_bytes());
    msg.push(kind);
    msg.extend_from_slice(&(t as u32).to_le_bytes());
    msg.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        msg.extend_from_slice(&d.to_le_bytes());
    }
    for &v in payload {
        msg.extend_from_slice(&v.to_le_bytes());
    }
    stream
        .write_all(&msg)
        .map_err(|e| GsError::Provider(format!("send: {e}")))?;

    let mut len_buf = [0u8; 4];
    stream
        .read_exact(&mut len_buf)
        .map_err(|e| GsError::Provider(format!("recv header: {e}")))?;
    let resp_len = u32::from_le_bytes(len_buf) as usize;
    if resp_len != 4 * payload.len() {
        return Err(GsError::Provider(format!(
            "response length {resp_len} != expected {}",
            4 * payload.len()
        )));
    }
    let mut resp = vec![0u8; resp_len];
    stream
        .read_exact(&mut resp)
        .map_err(|e| GsError::Provider(format!("recv body: {e}")))?;
    Ok(resp
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Image score provider backed by a local socket server.
#[derive(Clone, Debug)]
pub struct ExternalImageScore {
    pub addr: String,
}

impl<T: Real> ImageScoreProvider<T> for ExternalImageScore {
    fn predict_noise(
        &self,
        x_t: &Image<T>,
        t: usize,
        _condition: &Condition<T>,
    ) -> Result<Image<T>, GsError> {
        let mut payload = Vec::with_capacity(x_t.data.len() * 3);
        for px in &x_t.data {
            payload.push(px.x.to_f64().unwrap_or(f64::NAN) as f32);
            payload.push(px.y.to_f64().unwrap_or(f64::NAN) as f32);
            payload.push(px.z.to_f64().unwrap_or(f64::NAN) as f32);
        }
        let dims = [x_t.height as u32, x_t.width as u32, 3];
        let resp = external_round_trip(&self.addr, EXTERNAL_KIND_IMAGE, t, &dims, &payload)?;
        let mut out = Image::zeros(x_t.width, x_t.height);
        for (i, chunk) in resp.chunks_exact(3).enumerate() {
            out.data[i] = Vector3::new(
                c::<T>(chunk[0] as f64),
                c::<T>(chunk[1] as f64),
                c::<T>(chunk[2] as f64),
            );
        }
        Ok(out)
    }
}

/// Point score provider backed by a local socket server.
#[derive(Clone, Debug)]
pub struct ExternalPointScore {
    pub addr: String,
}

impl<T: Real> PointScoreProvider<T> for ExternalPointScore {
    fn predict_noise(
        &self,
        p_t: &[Vector3<T>],
        t: usize,
        _condition: &Condition<T>,
    ) -> Result<Vec<Vector3<T>>, GsError> {
        let mut payload = Vec::with_capacity(p_t.len() * 3);
        for p in p_t {
            payload.push(p.x.to_f64().unwrap_or(f64::NAN) as f32);
            payload.push(p.y.to_f64().unwrap_or(f64::NAN) as f32);
            payload.push(p.z.to_f64().unwrap_or(f64::NAN) as f32);
        }
        let dims = [p_t.len() as u32, 3];
        let resp = external_round_trip(&self.addr, EXTERNAL_KIND_POINTS, t, &dims, &payload)?;
        Ok(resp
            .chunks_exact(3)
            .map(|ch| {
                Vector3::new(
                    c::<T>(ch[0] as f64),
                    c::<T>(ch[1] as f64),
                    c::<T>(ch[2] as f64),
                )
            })
            .collect())
    }
}
