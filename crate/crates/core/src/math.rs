//! Scalar abstraction and small math helpers shared across the crate.

use nalgebra::{Matrix3, RealField, Vector4};
use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type the rendering and gradient code is generic over.
///
/// `f32` is the production type; `f64` is used by the finite-difference
/// verification path, which needs the extra precision for central
/// differences to resolve the analytic gradients.
pub trait Real:
    RealField + Copy + Default + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    fn to_f32_lossy(self) -> f32 {
        self.to_f32().expect("scalar conversion to f32")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar conversion to f64")
    }
}

impl<T> Real for T where
    T: RealField + Copy + Default + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
}

/// Converts an `f64` constant into the active scalar type.
#[inline]
pub fn c<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("scalar conversion from f64")
}

/// Logistic function `1 / (1 + exp(-x))`.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Inverse of [`sigmoid`]; requires `p` in the open interval `(0, 1)`.
#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// Derivative of the logistic function expressed via its output value.
#[inline]
pub fn sigmoid_derivative_from_output<T: Real>(s: T) -> T {
    s * (T::one() - s)
}

/// Rotation matrix of a unit quaternion stored as `(w, x, y, z)`.
pub fn rotation_from_unit_quat<T: Real>(q: &Vector4<T>) -> Matrix3<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = c::<T>(2.0);
    Matrix3::new(
        T::one() - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        T::one() - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        T::one() - two * (x * x + y * y),
    )
}

/// Partial derivatives of [`rotation_from_unit_quat`] with respect to each
/// unit-quaternion component, in `(w, x, y, z)` order.
pub fn rotation_quat_derivatives<T: Real>(q: &Vector4<T>) -> [Matrix3<T>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let zero = T::zero();
    let two = c::<T>(2.0);
    let four = c::<T>(4.0);
    [
        Matrix3::new(
            zero,
            -two * z,
            two * y,
            two * z,
            zero,
            -two * x,
            -two * y,
            two * x,
            zero,
        ),
        Matrix3::new(
            zero,
            two * y,
            two * z,
            two * y,
            -four * x,
            -two * w,
            two * z,
            two * w,
            -four * x,
        ),
        Matrix3::new(
            -four * y,
            two * x,
            two * w,
            two * x,
            zero,
            two * z,
            -two * w,
            two * z,
            -four * y,
        ),
        Matrix3::new(
            -four * z,
            -two * w,
            two * x,
            two * w,
            -four * z,
            two * y,
            two * x,
            two * y,
            zero,
        ),
    ]
}

/// Normalizes a quaternion; returns the identity rotation for a zero input.
pub fn normalize_quat<T: Real>(q: &Vector4<T>) -> Vector4<T> {
    let n = q.norm();
    if n > T::zero() {
        q / n
    } else {
        Vector4::new(T::one(), T::zero(), T::zero(), T::zero())
    }
}
