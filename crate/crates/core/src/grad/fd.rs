//! Finite-difference verification of the analytic backward pass.

use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::buffer::Image;
use crate::camera::Camera;
use crate::gaussians::GaussianCloud;
use crate::math::{c, Real};
use crate::rasterizer::{render, BackgroundMlp, BackgroundModel, RasterOptions, RenderOutput};

use super::backward::{backward, BackgroundGrads, OutputGrads};

/// Which reference the production gradients are compared against.
///
/// `Double` checks analytic f64 gradients against central finite differences
/// in f64. `Single` checks the f32 production path against the analytic f64
/// path — finite differences in f32 are too noisy to resolve a 1e-3
/// tolerance directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdPrecision {
    Single,
    Double,
}

/// Harness configuration.
#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    pub precision: FdPrecision,
    /// Evenly-strided subsample size per parameter group (None = all).
    pub max_params_per_group: Option<usize>,
    /// Pass/fail threshold on the per-group max relative error.
    pub tolerance: f64,
    /// Denominator floor for relative errors.
    pub rel_floor: f64,
}

impl FdConfig {
    pub fn double(step: f64) -> Self {
        FdConfig {
            step,
            precision: FdPrecision::Double,
            max_params_per_group: None,
            tolerance: 1e-3,
            rel_floor: 1e-5,
        }
    }

    pub fn single() -> Self {
        FdConfig {
            step: 0.0,
            precision: FdPrecision::Single,
            max_params_per_group: None,
            tolerance: 1e-3,
            rel_floor: 1e-4,
        }
    }
}

/// Deterministic quadratic loss over the rendered buffers:
/// `0.5·Σ w_buf·(buffer − target)²` with a seeded random color target and
/// zero targets for the scalar buffers.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticLoss {
    pub color_weight: f64,
    pub alpha_weight: f64,
    pub depth_weight: f64,
    pub depth_normalized_weight: f64,
    pub zvar_weight: f64,
    pub target_seed: u64,
}

impl QuadraticLoss {
    /// Color-only loss against a random target.
    pub fn color(target_seed: u64) -> Self {
        QuadraticLoss {
            color_weight: 1.0,
            alpha_weight: 0.0,
            depth_weight: 0.0,
            depth_normalized_weight: 0.0,
            zvar_weight: 0.0,
            target_seed,
        }
    }

    /// Exercises every differentiable output buffer.
    pub fn all_buffers(target_seed: u64) -> Self {
        QuadraticLoss {
            color_weight: 1.0,
            alpha_weight: 0.3,
            depth_weight: 0.1,
            depth_normalized_weight: 0.05,
            zvar_weight: 0.1,
            target_seed,
        }
    }

    pub fn zero() -> Self {
        QuadraticLoss {
            color_weight: 0.0,
            alpha_weight: 0.0,
            depth_weight: 0.0,
            depth_normalized_weight: 0.0,
            zvar_weight: 0.0,
            target_seed: 0,
        }
    }

    fn target_color<T: Real>(&self, width: usize, height: usize) -> Image<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.target_seed);
        let mut img = Image::zeros(width, height);
        for px in img.data.iter_mut() {
            *px = Vector3::new(
                c::<T>(rng.random_range(0.0..1.0)),
                c::<T>(rng.random_range(0.0..1.0)),
                c::<T>(rng.random_range(0.0..1.0)),
            );
        }
        img
    }

    pub fn loss<T: Real>(&self, out: &RenderOutput<T>) -> T {
        let half = c::<T>(0.5);
        let mut acc = T::zero();
        if self.color_weight != 0.0 {
            let target = self.target_color::<T>(out.color.width, out.color.height);
            let mut sum = T::zero();
            for (a, b) in out.color.data.iter().zip(&target.data) {
                sum += (a - b).norm_squared();
            }
            acc += c::<T>(self.color_weight) * half * sum;
        }
        fn quad<T: Real>(weight: f64, data: &[T]) -> T {
            if weight == 0.0 {
                return T::zero();
            }
            let s = data.iter().fold(T::zero(), |s, v| s + *v * *v);
            c::<T>(weight) * c::<T>(0.5) * s
        }
        acc += quad(self.alpha_weight, &out.alpha.data);
        acc += quad(self.depth_weight, &out.depth.data);
        if self.depth_normalized_weight != 0.0 {
            let dn = out.depth_normalized();
            acc += quad(self.depth_normalized_weight, &dn.data);
        }
        acc += quad(self.zvar_weight, &out.zvar.data);
        acc
    }

    pub fn output_grads<T: Real>(&self, out: &RenderOutput<T>) -> OutputGrads<T> {
        let target = self.target_color::<T>(out.color.width, out.color.height);
        let mut d_color = Image::zeros(out.color.width, out.color.height);
        if self.color_weight != 0.0 {
            let w = c::<T>(self.color_weight);
            for i in 0..d_color.data.len() {
                d_color.data[i] = (out.color.data[i] - target.data[i]) * w;
            }
        }
        let scaled = |weight: f64, plane: &crate::buffer::Plane<T>| {
            if weight == 0.0 {
                return None;
            }
            let mut p = plane.clone();
            let w = c::<T>(weight);
            for v in p.data.iter_mut() {
                *v *= w;
            }
            Some(p)
        };
        OutputGrads {
            d_color,
            d_alpha: scaled(self.alpha_weight, &out.alpha),
            d_depth: scaled(self.depth_weight, &out.depth),
            d_depth_normalized: if self.depth_normalized_weight != 0.0 {
                scaled(self.depth_normalized_weight, &out.depth_normalized())
            } else {
                None
            },
            d_zvar: scaled(self.zvar_weight, &out.zvar),
        }
    }
}

/// Per-group comparison statistics.
#[derive(Clone, Debug)]
pub struct FdGroupReport {
    pub group: &'static str,
    pub params_checked: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub max_abs_diff: f64,
    /// Flat index of the worst parameter within the group.
    pub worst_index: usize,
}

/// Full harness report.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub precision: FdPrecision,
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<FdGroupReport>,
}

impl FdReport {
    pub fn worst_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.worst_rel() < self.tolerance
    }
}

impl fmt::Display for FdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reference = match self.precision {
            FdPrecision::Double => format!("central differences, step {:.1e}", self.step),
            FdPrecision::Single => "double-precision analytic reference".to_string(),
        };
        writeln!(f, "gradient check ({reference})")?;
        writeln!(
            f,
            "{:<16} {:>8} {:>12} {:>12} {:>12}  result",
            "group", "params", "max rel", "mean rel", "max abs"
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<16} {:>8} {:>12.3e} {:>12.3e} {:>12.3e}  {}",
                g.group,
                g.params_checked,
                g.max_rel,
                g.mean_rel,
                g.max_abs_diff,
                if g.max_rel < self.tolerance { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "worst {:.3e} vs tolerance {:.1e}: {}",
            self.worst_rel(),
            self.tolerance,
            if self.passes() { "ok" } else { "FAIL" }
        )
    }
}

const GROUPS: [&str; 6] = [
    "positions",
    "log_scales",
    "rotations",
    "color_params",
    "opacity_logits",
    "background",
];

fn flatten_param_grads(
    grads: &super::backward::ParamGrads<f64>,
) -> Vec<Vec<f64>> {
    let n = grads.len();
    let mut out = vec![Vec::new(); 6];
    for i in 0..n {
        out[0].extend(grads.d_positions[i].iter());
        out[1].extend(grads.d_log_scales[i].iter());
        out[2].extend(grads.d_rotations[i].iter());
        out[3].extend(grads.d_color_params[i].iter());
        out[4].push(grads.d_opacity_logits[i]);
    }
    out[5] = match &grads.d_background {
        BackgroundGrads::Constant(v) => v.iter().copied().collect(),
        BackgroundGrads::Mlp(m) => m.to_flat(),
    };
    out
}

fn get_param(cloud: &GaussianCloud<f64>, background: &BackgroundModel<f64>, group: usize, k: usize) -> f64 {
    match group {
        0 => cloud.positions[k / 3][k % 3],
        1 => cloud.log_scales[k / 3][k % 3],
        2 => cloud.rotations[k / 4][k % 4],
        3 => cloud.color_params[k / 3][k % 3],
        4 => cloud.opacity_logits[k],
        _ => match background {
            BackgroundModel::Constant(v) => v[k],
            BackgroundModel::Mlp(m) => m.to_flat()[k],
        },
    }
}

fn set_param(cloud: &mut GaussianCloud<f64>, background: &mut BackgroundModel<f64>, group: usize, k: usize, v: f64) {
    match group {
        0 => cloud.positions[k / 3][k % 3] = v,
        1 => cloud.log_scales[k / 3][k % 3] = v,
        2 => cloud.rotations[k / 4][k % 4] = v,
        3 => cloud.color_params[k / 3][k % 3] = v,
        4 => cloud.opacity_logits[k] = v,
        _ => match background {
            BackgroundModel::Constant(col) => col[k] = v,
            BackgroundModel::Mlp(m) => {
                let mut flat = m.to_flat();
                flat[k] = v;
                *m = BackgroundMlp::from_flat(&flat).unwrap();
            }
        },
    }
}

fn group_len(n: usize, background: &BackgroundModel<f64>, group: usize) -> usize {
    match group {
        0 | 1 | 3 => n * 3,
        2 => n * 4,
        4 => n,
        _ => match background {
            BackgroundModel::Constant(_) => 3,
            BackgroundModel::Mlp(_) => crate::rasterizer::MLP_PARAM_COUNT,
        },
    }
}

/// Flat per-group parameter indexing, shared with gradient tests elsewhere
/// in the crate.
#[cfg(test)]
pub(crate) mod param_access {
    use super::*;

    pub(crate) fn group_len(n: usize, background: &BackgroundModel<f64>, group: usize) -> usize {
        super::group_len(n, background, group)
    }

    pub(crate) fn get_param(
        cloud: &GaussianCloud<f64>,
        background: &BackgroundModel<f64>,
        group: usize,
        k: usize,
    ) -> f64 {
        super::get_param(cloud, background, group, k)
    }

    pub(crate) fn set_param(
        cloud: &mut GaussianCloud<f64>,
        background: &mut BackgroundModel<f64>,
        group: usize,
        k: usize,
        v: f64,
    ) {
        super::set_param(cloud, background, group, k, v)
    }

    pub(crate) fn get_grad(grads: &super::super::backward::ParamGrads<f64>, group: usize, k: usize) -> f64 {
        match group {
            0 => grads.d_positions[k / 3][k % 3],
            1 => grads.d_log_scales[k / 3][k % 3],
            2 => grads.d_rotations[k / 4][k % 4],
            3 => grads.d_color_params[k / 3][k % 3],
            4 => grads.d_opacity_logits[k],
            _ => match &grads.d_background {
                BackgroundGrads::Constant(v) => v[k],
                BackgroundGrads::Mlp(m) => m.to_flat()[k],
            },
        }
    }
}

fn sample_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len && m > 0 => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares analytic gradients of `loss` against the configured reference.
///
/// All rendering runs with thresholds disabled ([`RasterOptions::exact`]) so
/// the loss surface is smooth at the working point.
pub fn finite_difference_check(
    cloud: &GaussianCloud<f64>,
    cam: &Camera<f64>,
    background: &BackgroundModel<f64>,
    loss: &QuadraticLoss,
    cfg: &FdConfig,
) -> FdReport {
    let options = RasterOptions::<f64>::exact();
    let out = render(cloud, cam, background, options).expect("forward render");
    let ograds = loss.output_grads(&out);
    let analytic = backward(&ograds, &out, cloud, cam, background).expect("backward");
    let analytic_flat = flatten_param_grads(&analytic);

    let reference_flat: Vec<Vec<f64>> = match cfg.precision {
        FdPrecision::Double => {
            let mut work_cloud = cloud.clone();
            let mut work_bg = background.clone();
            let mut reference = vec![Vec::new(); 6];
            for group in 0..6 {
                let len = group_len(cloud.len(), background, group);
                let mut fd = vec![f64::NAN; len];
                for k in sample_indices(len, cfg.max_params_per_group) {
                    let orig = get_param(&work_cloud, &work_bg, group, k);
                    set_param(&mut work_cloud, &mut work_bg, group, k, orig + cfg.step);
                    let lp = loss.loss(
                        &render(&work_cloud, cam, &work_bg, options).expect("fd render"),
                    );
                    set_param(&mut work_cloud, &mut work_bg, group, k, orig - cfg.step);
                    let lm = loss.loss(
                        &render(&work_cloud, cam, &work_bg, options).expect("fd render"),
                    );
                    set_param(&mut work_cloud, &mut work_bg, group, k, orig);
                    fd[k] = (lp - lm) / (2.0 * cfg.step);
                }
                reference[group] = fd;
            }
            reference
        }
        FdPrecision::Single => {
            let cloud32: GaussianCloud<f32> = cloud.cast();
            let cam32 = cam.cast::<f32>();
            let bg32 = background.cast::<f32>();
            let out32 = render(&cloud32, &cam32, &bg32, RasterOptions::<f32>::exact())
                .expect("forward render");
            let ograds32 = loss.output_grads(&out32);
            let analytic32 =
                backward(&ograds32, &out32, &cloud32, &cam32, &bg32).expect("backward");
            flatten_param_grads(&analytic32.cast_f64())
        }
    };

    // In single-precision mode the f64 analytic gradients are the reference
    // and the f32 production gradients are under test.
    let (tested, reference) = match cfg.precision {
        FdPrecision::Double => (&analytic_flat, &reference_flat),
        FdPrecision::Single => (&reference_flat, &analytic_flat),
    };

    let mut groups = Vec::with_capacity(6);
    for g in 0..6 {
        let mut max_rel = 0.0f64;
        let mut sum_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut worst = 0usize;
        let mut count = 0usize;
        for (k, (&a, &b)) in tested[g].iter().zip(reference[g].iter()).enumerate() {
            if b.is_nan() {
                continue;
            }
            let diff = (a - b).abs();
            let rel = diff / a.abs().max(b.abs()).max(cfg.rel_floor);
            if rel > max_rel {
                max_rel = rel;
                worst = k;
            }
            max_abs = max_abs.max(diff);
            sum_rel += rel;
            count += 1;
        }
        groups.push(FdGroupReport {
            group: GROUPS[g],
            params_checked: count,
            max_rel,
            mean_rel: if count > 0 { sum_rel / count as f64 } else { 0.0 },
            max_abs_diff: max_abs,
            worst_index: worst,
        });
    }
    FdReport {
        precision: cfg.precision,
        step: cfg.step,
        tolerance: cfg.tolerance,
        groups,
    }
}

impl super::backward::ParamGrads<f32> {
    /// Widens every gradient to f64 (used when comparing the production
    /// path against the double-precision reference).
    pub fn cast_f64(&self) -> super::backward::ParamGrads<f64> {
        super::backward::ParamGrads {
            d_positions: self.d_positions.iter().map(|v| v.map(|x| x as f64)).collect(),
            d_log_scales: self.d_log_scales.iter().map(|v| v.map(|x| x as f64)).collect(),
            d_rotations: self.d_rotations.iter().map(|v| v.map(|x| x as f64)).collect(),
            d_color_params: self.d_color_params.iter().map(|v| v.map(|x| x as f64)).collect(),
            d_opacity_logits: self.d_opacity_logits.iter().map(|&x| x as f64).collect(),
            d_background: match &self.d_background {
                BackgroundGrads::Constant(v) => BackgroundGrads::Constant(v.map(|x| x as f64)),
                BackgroundGrads::Mlp(m) => BackgroundGrads::Mlp(Box::new(m.cast())),
            },
            view_space_pos_grad_norm: self
                .view_space_pos_grad_norm
                .iter()
                .map(|&x| x as f64)
                .collect(),
            visible: self.visible.clone(),
        }
    }
}

/// Well-conditioned random double-precision scene for gradient tests.
#[cfg(test)]
pub(crate) fn random_scene(seed: u64, n: usize) -> GaussianCloud<f64> {
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud {
        positions: Vec::new(),
        log_scales: Vec::new(),
        rotations: Vec::new(),
        color_params: Vec::new(),
        opacity_logits: Vec::new(),
        snapshot_positions: None,
    };
    for _ in 0..n {
        cloud.positions.push(Vector3::new(
            rng.random_range(-0.7..0.7),
            rng.random_range(-0.7..0.7),
            rng.random_range(-0.7..0.7),
        ));
        cloud.log_scales.push(Vector3::new(
            rng.random_range(-3.0..-1.6),
            rng.random_range(-3.0..-1.6),
            rng.random_range(-3.0..-1.6),
        ));
        cloud.rotations.push(Vector4::new(
            rng.random_range(0.3..1.0),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
        ));
        cloud.color_params.push(Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ));
        cloud.opacity_logits.push(rng.random_range(-1.0..1.8));
    }
    cloud
}
