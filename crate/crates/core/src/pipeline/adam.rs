//! Adam optimizer over the raw Gaussian parameters and the background MLP,
//! with one learning rate per parameter group. Moments are stored in f32 so
//! checkpoints capture the optimizer state bit-exactly; each scalar update
//! rounds its moments to f32 *before* computing the step, which makes a
//! resumed run arithmetically identical to an uninterrupted one.

use nalgebra::{Vector3, Vector4};

use crate::error::GsError;
use crate::gaussians::GaussianCloud;
use crate::grad::{BackgroundGrads, ParamGrads};
use crate::rasterizer::{BackgroundMlp, BackgroundModel, MLP_PARAM_COUNT};

use super::config::LearningRates;

/// First/second moment storage mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MomentBank {
    pub positions: Vec<Vector3<f32>>,
    pub log_scales: Vec<Vector3<f32>>,
    pub rotations: Vec<Vector4<f32>>,
    pub color_params: Vec<Vector3<f32>>,
    pub opacity_logits: Vec<f32>,
    pub background: Vec<f32>,
}

impl MomentBank {
    fn zeros(n: usize, background_len: usize) -> Self {
        MomentBank {
            positions: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            color_params: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            background: vec![0.0; background_len],
        }
    }

    fn len(&self) -> usize {
        self.positions.len()
    }

    fn extend_zeros(&mut self, n_new: usize) {
        let n = self.len() + n_new;
        self.positions.resize(n, Vector3::zeros());
        self.log_scales.resize(n, Vector3::zeros());
        self.rotations.resize(n, Vector4::zeros());
        self.color_params.resize(n, Vector3::zeros());
        self.opacity_logits.resize(n, 0.0);
    }

    fn retain_indices(&mut self, kept: &[usize]) {
        self.positions = kept.iter().map(|&i| self.positions[i]).collect();
        self.log_scales = kept.iter().map(|&i| self.log_scales[i]).collect();
        self.rotations = kept.iter().map(|&i| self.rotations[i]).collect();
        self.color_params = kept.iter().map(|&i| self.color_params[i]).collect();
        self.opacity_logits = kept.iter().map(|&i| self.opacity_logits[i]).collect();
    }
}

/// Adam with per-group learning rates. `eps` is added after the square root.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub(crate) m: MomentBank,
    pub(crate) v: MomentBank,
}

fn background_param_len(background: &BackgroundModel<f32>) -> usize {
    match background {
        BackgroundModel::Constant(_) => 0,
        BackgroundModel::Mlp(_) => MLP_PARAM_COUNT,
    }
}

impl Adam {
    pub fn new(n: usize, background: &BackgroundModel<f32>) -> Self {
        let bg_len = background_param_len(background);
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step_count: 0,
            m: MomentBank::zeros(n, bg_len),
            v: MomentBank::zeros(n, bg_len),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds zeroed moment slots for Gaussians appended by split or
    /// compactness insertions; surviving slots keep their history.
    pub fn extend_zeros(&mut self, n_new: usize) {
        self.m.extend_zeros(n_new);
        self.v.extend_zeros(n_new);
    }

    /// Drops moment slots for pruned Gaussians, preserving the rest by index.
    pub fn retain_indices(&mut self, kept: &[usize]) {
        self.m.retain_indices(kept);
        self.v.retain_indices(kept);
    }

    /// Applies one update. Gradients must match the cloud's current size.
    pub fn step(
        &mut self,
        cloud: &mut GaussianCloud<f32>,
        background: &mut BackgroundModel<f32>,
        grads: &ParamGrads<f32>,
        lr: &LearningRates,
        position_lr_scale: f64,
    ) -> Result<(), GsError> {
        let n = cloud.len();
        if grads.len() != n || self.len() != n {
            return Err(GsError::ShapeMismatch(format!(
                "optimizer tracks {} gaussians, cloud has {}, gradients have {}",
                self.len(),
                n,
                grads.len()
            )));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let ctx = UpdateCtx { beta1: self.beta1, beta2: self.beta2, eps: self.eps, bc1, bc2 };

        let lr_pos = lr.positions * position_lr_scale;
        for i in 0..n {
            for a in 0..3 {
                ctx.update(
                    &mut cloud.positions[i][a],
                    &mut self.m.positions[i][a],
                    &mut self.v.positions[i][a],
                    grads.d_positions[i][a] as f64,
                    lr_pos,
                );
                ctx.update(
                    &mut cloud.log_scales[i][a],
                    &mut self.m.log_scales[i][a],
                    &mut self.v.log_scales[i][a],
                    grads.d_log_scales[i][a] as f64,
                    lr.scales,
                );
                ctx.update(
                    &mut cloud.color_params[i][a],
                    &mut self.m.color_params[i][a],
                    &mut self.v.color_params[i][a],
                    grads.d_color_params[i][a] as f64,
                    lr.colors,
                );
            }
            for a in 0..4 {
                ctx.update(
                    &mut cloud.rotations[i][a],
                    &mut self.m.rotations[i][a],
                    &mut self.v.rotations[i][a],
                    grads.d_rotations[i][a] as f64,
                    lr.rotations,
                );
            }
            ctx.update(
                &mut cloud.opacity_logits[i],
                &mut self.m.opacity_logits[i],
                &mut self.v.opacity_logits[i],
                grads.d_opacity_logits[i] as f64,
                lr.opacities,
            );
        }

        if let (BackgroundModel::Mlp(mlp), BackgroundGrads::Mlp(g)) = (&mut *background, &grads.d_background) {
            let mut flat = mlp.to_flat();
            let g_flat = g.to_flat();
            for k in 0..MLP_PARAM_COUNT {
                ctx.update(
                    &mut flat[k],
                    &mut self.m.background[k],
                    &mut self.v.background[k],
                    g_flat[k] as f64,
                    lr.background,
                );
            }
            *mlp = BackgroundMlp::from_flat(&flat).expect("flat length preserved");
        }
        Ok(())
    }
}

struct UpdateCtx {
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

impl UpdateCtx {
    #[inline]
    fn update(&self, p: &mut f32, m: &mut f32, v: &mut f32, g: f64, lr: f64) {
        *m = (self.beta1 * *m as f64 + (1.0 - self.beta1) * g) as f32;
        *v = (self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g) as f32;
        let m_hat = *m as f64 / self.bc1;
        let v_hat = *v as f64 / self.bc2;
        *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
    }
}
