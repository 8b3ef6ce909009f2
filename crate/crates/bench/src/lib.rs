//! Shared scene builders for the criterion benchmarks.

use nalgebra::Vector3;

use gsgen_core::camera::look_at_camera;
use gsgen_core::gaussians::init_from_points;
use gsgen_core::pipeline::three_blob_points;
use gsgen_core::{Camera, ColorInit, GaussianCloud, InitConfig};

/// Deterministic n-Gaussian scene spread over the blob layout.
pub fn bench_cloud(n: usize) -> GaussianCloud<f32> {
    let (points, colors) = three_blob_points(n, 42);
    init_from_points(
        &points,
        ColorInit::Given(colors),
        &InitConfig { fixed_scale: 0.03, n_points: n, ..InitConfig::default() },
        42,
    )
    .expect("bench scene")
}

/// Front-facing camera at the given square resolution.
pub fn bench_camera(resolution: usize) -> Camera<f32> {
    look_at_camera(
        Vector3::new(1.6, -1.4, 0.9),
        Vector3::zeros(),
        Vector3::z(),
        50.0,
        resolution,
        resolution,
    )
    .expect("bench camera")
}
