//! Row-major image buffers used for render outputs and gradients.

use nalgebra::Vector3;

use crate::math::Real;

/// Three-channel row-major image buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector3<T>>,
}

impl<T: Real> Image<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![Vector3::zeros(); width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: Vector3<T>) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<T> {
        self.data[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: Vector3<T>) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Largest absolute channel difference against another image of the same
    /// shape.
    pub fn max_abs_diff(&self, other: &Image<T>) -> T {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        let mut worst = T::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            for k in 0..3 {
                let d = (a[k] - b[k]).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    /// Converts every channel through an `f64` intermediate.
    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| {
                    Vector3::new(
                        crate::math::c(v[0].to_f64_lossy()),
                        crate::math::c(v[1].to_f64_lossy()),
                        crate::math::c(v[2].to_f64_lossy()),
                    )
                })
                .collect(),
        }
    }
}

/// Single-channel row-major buffer (alpha, depth, transmittance, variance).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Real> Plane<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            data: vec![T::zero(); width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn max_abs_diff(&self, other: &Plane<T>) -> T {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        let mut worst = T::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (*a - *b).abs();
            if d > worst {
                worst = d;
            }
        }
        worst
    }

    pub fn cast<U: Real>(&self) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| crate::math::c(v.to_f64_lossy()))
                .collect(),
        }
    }
}
