//! Per-pixel background models: a learnable ray-direction MLP and a
//! constant-color fallback.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::buffer::Image;
use crate::camera::Camera;
use crate::math::{c, sigmoid, sigmoid_derivative_from_output, Real};

const HIDDEN: usize = 16;

/// Number of scalar parameters in [`BackgroundMlp`].
pub const MLP_PARAM_COUNT: usize = HIDDEN * 3 + HIDDEN + HIDDEN * HIDDEN + HIDDEN + 3 * HIDDEN + 3;

/// Two-hidden-layer perceptron (width 16, tanh activations, sigmoid output)
/// mapping a unit ray direction to an RGB color in (0,1)³.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundMlp<T = f32> {
    pub w1: SMatrix<T, HIDDEN, 3>,
    pub b1: SVector<T, HIDDEN>,
    pub w2: SMatrix<T, HIDDEN, HIDDEN>,
    pub b2: SVector<T, HIDDEN>,
    pub w3: SMatrix<T, 3, HIDDEN>,
    pub b3: SVector<T, 3>,
}

impl<T: Real> BackgroundMlp<T> {
    pub fn zeros() -> Self {
        BackgroundMlp {
            w1: SMatrix::zeros(),
            b1: SVector::zeros(),
            w2: SMatrix::zeros(),
            b2: SVector::zeros(),
            w3: SMatrix::zeros(),
            b3: SVector::zeros(),
        }
    }

    /// Uniform Glorot initialization of the weights; biases start at zero,
    /// so the initial background is mid-gray everywhere.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Self::zeros();
        let mut fill = |data: &mut [T], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in data {
                *v = c::<T>(rng.random_range(-bound..bound));
            }
        };
        fill(mlp.w1.as_mut_slice(), 3, HIDDEN);
        fill(mlp.w2.as_mut_slice(), HIDDEN, HIDDEN);
        fill(mlp.w3.as_mut_slice(), HIDDEN, 3);
        mlp
    }

    pub fn eval(&self, dir: &Vector3<T>) -> Vector3<T> {
        let h1 = (self.w1 * dir + self.b1).map(|v| v.tanh());
        let h2 = (self.w2 * h1 + self.b2).map(|v| v.tanh());
        (self.w3 * h2 + self.b3).map(sigmoid)
    }

    /// Accumulates `∂L/∂weights` for one evaluation into `grads`, given the
    /// upstream gradient of the output color.
    pub fn accumulate_grad(&self, dir: &Vector3<T>, upstream: &Vector3<T>, grads: &mut BackgroundMlp<T>) {
        let h1 = (self.w1 * dir + self.b1).map(|v| v.tanh());
        let h2 = (self.w2 * h1 + self.b2).map(|v| v.tanh());
        let out = (self.w3 * h2 + self.b3).map(sigmoid);
        let da3 = SVector::<T, 3>::from_fn(|i, _| upstream[i] * sigmoid_derivative_from_output(out[i]));
        grads.b3 += da3;
        grads.w3 += da3 * h2.transpose();
        let dh2 = self.w3.transpose() * da3;
        let da2 = dh2.zip_map(&h2, |g, h| g * (T::one() - h * h));
        grads.b2 += da2;
        grads.w2 += da2 * h1.transpose();
        let dh1 = self.w2.transpose() * da2;
        let da1 = dh1.zip_map(&h1, |g, h| g * (T::one() - h * h));
        grads.b1 += da1;
        grads.w1 += da1 * dir.transpose();
    }

    /// Parameters flattened in a fixed layout (w1, b1, w2, b2, w3, b3, each
    /// column-major).
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(MLP_PARAM_COUNT);
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(self.b1.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(self.b2.as_slice());
        out.extend_from_slice(self.w3.as_slice());
        out.extend_from_slice(self.b3.as_slice());
        out
    }

    pub fn from_flat(flat: &[T]) -> Option<Self> {
        if flat.len() != MLP_PARAM_COUNT {
            return None;
        }
        let mut mlp = Self::zeros();
        let mut pos = 0;
        for dst in [
            mlp.w1.as_mut_slice(),
            mlp.b1.as_mut_slice(),
            mlp.w2.as_mut_slice(),
            mlp.b2.as_mut_slice(),
            mlp.w3.as_mut_slice(),
            mlp.b3.as_mut_slice(),
        ] {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        }
        Some(mlp)
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w1 += other.w1;
        self.b1 += other.b1;
        self.w2 += other.w2;
        self.b2 += other.b2;
        self.w3 += other.w3;
        self.b3 += other.b3;
    }

    pub fn scale(&mut self, s: T) {
        self.w1 *= s;
        self.b1 *= s;
        self.w2 *= s;
        self.b2 *= s;
        self.w3 *= s;
        self.b3 *= s;
    }

    pub fn cast<U: Real>(&self) -> BackgroundMlp<U> {
        BackgroundMlp::from_flat(
            &self
                .to_flat()
                .iter()
                .map(|v| c::<U>(v.to_f64_lossy()))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }
}

/// Background model used during compositing: every pixel's residual
/// transmittance is filled with this model's color for the pixel's ray.
#[derive(Clone, Debug, PartialEq)]
pub enum BackgroundModel<T = f32> {
    /// Fixed color; not optimized.
    Constant(Vector3<T>),
    /// Learnable direction-conditioned MLP.
    Mlp(BackgroundMlp<T>),
}

static NON_UNIT_WARNED: AtomicBool = AtomicBool::new(false);

impl<T: Real> BackgroundModel<T> {
    pub fn black() -> Self {
        BackgroundModel::Constant(Vector3::zeros())
    }

    /// Evaluates the model for one ray direction, normalizing non-unit
    /// directions defensively (warning once per process).
    pub fn eval(&self, dir: &Vector3<T>) -> Vector3<T> {
        match self {
            BackgroundModel::Constant(color) => *color,
            BackgroundModel::Mlp(mlp) => {
                let n = dir.norm();
                if (n.to_f64_lossy() - 1.0).abs() > 1e-4 {
                    if !NON_UNIT_WARNED.swap(true, Ordering::Relaxed) {
                        log::warn!("background ray direction was not unit-norm; normalizing");
                    }
                    if n > T::zero() {
                        return mlp.eval(&(dir / n));
                    }
                }
                mlp.eval(dir)
            }
        }
    }

    /// Evaluates the model over every pixel of a camera.
    pub fn eval_camera(&self, cam: &Camera<T>) -> Image<T> {
        match self {
            BackgroundModel::Constant(color) => Image::filled(cam.width, cam.height, *color),
            BackgroundModel::Mlp(_) => {
                let mut img = Image::zeros(cam.width, cam.height);
                let width = cam.width;
                img.data
                    .par_chunks_mut(width.max(1))
                    .enumerate()
                    .for_each(|(y, row)| {
                        for (x, px) in row.iter_mut().enumerate() {
                            *px = self.eval(&pixel_ray(cam, x, y));
                        }
                    });
                img
            }
        }
    }

    pub fn cast<U: Real>(&self) -> BackgroundModel<U> {
        match self {
            BackgroundModel::Constant(color) => BackgroundModel::Constant(Vector3::new(
                c::<U>(color[0].to_f64_lossy()),
                c::<U>(color[1].to_f64_lossy()),
                c::<U>(color[2].to_f64_lossy()),
            )),
            BackgroundModel::Mlp(mlp) => BackgroundModel::Mlp(mlp.cast()),
        }
    }
}

/// Unit world-space ray direction through the center of pixel `(x, y)`.
pub(crate) fn pixel_ray<T: Real>(cam: &Camera<T>, x: usize, y: usize) -> Vector3<T> {
    let f = cam.focal();
    let (cx, cy) = cam.principal_point();
    let px = c::<T>(x as f64 + 0.5);
    let py = c::<T>(y as f64 + 0.5);
    let dir_view = Vector3::new((px - cx) / f, (cy - py) / f, -T::one());
    (cam.rotation().transpose() * dir_view).normalize()
}

/// Unit ray directions for every pixel of `cam`, row-major.
pub fn ray_directions<T: Real>(cam: &Camera<T>) -> Vec<Vector3<T>> {
    let mut dirs = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            dirs.push(pixel_ray(cam, x, y));
        }
    }
    dirs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::look_at_camera;
    use approx::assert_relative_eq;

    fn cam() -> Camera<f64> {
        look_at_camera(
            Vector3::new(0.0, -3.0, 0.5),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            55.0,
            24,
            20,
        )
        .unwrap()
    }

    #[test]
    fn constant_background_fills_every_pixel() {
        let bg = BackgroundModel::Constant(Vector3::new(0.2, 0.4, 0.6));
        let img = bg.eval_camera(&cam());
        assert!(img.data.iter().all(|p| *p == Vector3::new(0.2, 0.4, 0.6)));
    }

    #[test]
    fn zero_weight_mlp_outputs_sigmoid_of_bias() {
        let mut mlp = BackgroundMlp::<f64>::zeros();
        mlp.b3 = SVector::from_column_slice(&[0.3, -0.7, 0.0]);
        let bg = BackgroundModel::Mlp(mlp);
        let img = bg.eval_camera(&cam());
        let want = Vector3::new(sigmoid(0.3), sigmoid(-0.7), 0.5);
        for p in &img.data {
            assert_relative_eq!(p, &want, epsilon = 1e-12);
        }
    }

    #[test]
    fn ray_directions_are_unit_and_point_toward_target() {
        let cam = cam();
        let dirs = ray_directions(&cam);
        assert_eq!(dirs.len(), 24 * 20);
        for d in &dirs {
            assert_relative_eq!(d.norm(), 1.0, epsilon = 1e-12);
        }
        let center = pixel_ray(&cam, 12, 10);
        let toward = (Vector3::zeros() - cam.eye()).normalize();
        assert!(center.dot(&toward) > 0.99);
    }

    #[test]
    fn mlp_weight_gradients_match_finite_differences() {
        let mlp = BackgroundMlp::<f64>::init(3);
        let dir = Vector3::new(0.3, -0.5, 0.81).normalize();
        let upstream = Vector3::new(1.0, -0.5, 0.25);
        let mut grads = BackgroundMlp::zeros();
        mlp.accumulate_grad(&dir, &upstream, &mut grads);
        let flat = mlp.to_flat();
        let analytic = grads.to_flat();
        let eps = 1e-6;
        for k in (0..MLP_PARAM_COUNT).step_by(17) {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[k] += eps;
            minus[k] -= eps;
            let lp = BackgroundMlp::from_flat(&plus).unwrap().eval(&dir).dot(&upstream);
            let lm = BackgroundMlp::from_flat(&minus).unwrap().eval(&dir).dot(&upstream);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = analytic[k].abs().max(fd.abs()).max(1e-8);
            assert!(
                ((analytic[k] - fd) / denom).abs() < 1e-4,
                "param {k}: analytic {} vs fd {fd}",
                analytic[k]
            );
        }
    }

    #[test]
    fn flat_round_trip_preserves_parameters() {
        let mlp = BackgroundMlp::<f32>::init(11);
        let back = BackgroundMlp::from_flat(&mlp.to_flat()).unwrap();
        assert_eq!(mlp, back);
        assert_eq!(mlp.to_flat().len(), MLP_PARAM_COUNT);
    }
}
