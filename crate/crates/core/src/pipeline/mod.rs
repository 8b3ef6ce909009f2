//! Optimization pipeline: Adam over the raw Gaussian parameters, the
//! geometry and refinement stages with scheduled adaptive density control,
//! deterministic training orchestration with bit-exact checkpoints, and the
//! photometric fitting oracle used to validate the whole loop end to end.

mod adam;
mod checkpoint;
mod config;
mod fit;
mod stages;
mod train;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use config::{
    BackgroundConfig, BackgroundKind, CheckpointPolicy, GuidanceConfig, LearningRates,
    LossWeights, MeanMode, ProviderKind, StageConfig, StageKind, TrainConfig,
};
pub use fit::{
    mse, psnr, reconstruction_fit, render_turntable, three_blob_cloud, three_blob_points,
    turntable_camera, FitConfig, FitResult, TurntableConfig,
};
pub use stages::{
    geometry_step, mean_anchor_grads, opacity_distance_grads, refine_step, SceneImageOracle,
};
pub use train::{train, train_with_providers, TrainResult};

use crate::adaptive::Insertion;

/// Per-step diagnostics. The loss terms are reported as their scalar values
/// where one exists (regularizers) and as the L2 norm of the injected
/// gradient field for the score-distillation terms, which have no scalar
/// loss.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    /// Global 1-based iteration, spanning both stages.
    pub iteration: u64,
    pub stage: StageKind,
    pub n_gaussians: usize,
    pub sds_image_norm: f64,
    pub sds_point_norm: f64,
    pub mean_loss: f64,
    pub opacity_loss: f64,
    /// Norm of the assembled parameter gradient.
    pub grad_norm: f64,
    pub seconds: f64,
}

impl StepMetrics {
    /// Composite magnitude used for the non-finite abort check and log line.
    pub fn loss(&self) -> f64 {
        self.sds_image_norm + self.sds_point_norm + self.mean_loss + self.opacity_loss
    }

    pub fn log_line(&self) -> String {
        format!(
            "step iter={} stage={} n={} loss={:.6e} sds_image={:.3e} sds_point={:.3e} mean={:.3e} opacity={:.3e} grad={:.3e} sec={:.3}",
            self.iteration,
            self.stage,
            self.n_gaussians,
            self.loss(),
            self.sds_image_norm,
            self.sds_point_norm,
            self.mean_loss,
            self.opacity_loss,
            self.grad_norm,
            self.seconds
        )
    }
}

/// One adaptive-control action, recorded with enough detail that its
/// invariants can be re-verified from the log alone.
#[derive(Clone, Debug)]
pub enum AdaptiveEvent {
    Split {
        iteration: u64,
        n_before: usize,
        n_after: usize,
        /// Indices whose averaged view-space gradient exceeded the threshold.
        split_indices: Vec<usize>,
    },
    Compactness {
        iteration: u64,
        n_before: usize,
        n_after: usize,
        insertions: Vec<Insertion<f32>>,
    },
    Prune {
        iteration: u64,
        n_before: usize,
        n_after: usize,
        kept: Vec<usize>,
        /// Smallest activated opacity among the survivors.
        min_opacity_after: f32,
    },
}

impl AdaptiveEvent {
    pub fn iteration(&self) -> u64 {
        match self {
            AdaptiveEvent::Split { iteration, .. }
            | AdaptiveEvent::Compactness { iteration, .. }
            | AdaptiveEvent::Prune { iteration, .. } => *iteration,
        }
    }

    pub fn log_line(&self) -> String {
        match self {
            AdaptiveEvent::Split { iteration, n_before, n_after, split_indices } => format!(
                "event iter={iteration} kind=split n_before={n_before} n_after={n_after} over_threshold={}",
                split_indices.len()
            ),
            AdaptiveEvent::Compactness { iteration, n_before, n_after, insertions } => format!(
                "event iter={iteration} kind=compactness n_before={n_before} n_after={n_after} inserted={}",
                insertions.len()
            ),
            AdaptiveEvent::Prune { iteration, n_before, n_after, min_opacity_after, .. } => format!(
                "event iter={iteration} kind=prune n_before={n_before} n_after={n_after} min_opacity={min_opacity_after:.4}"
            ),
        }
    }
}

/// Streaming hook for training progress; all methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) {}
    fn on_event(&mut self, _event: &AdaptiveEvent) {}
    fn on_checkpoint(&mut self, _path: &std::path::Path, _iteration: u64) {}
}

/// Complete in-memory record of a run, sufficient to replay and re-verify
/// the adaptive-control invariants.
#[derive(Clone, Debug, Default)]
pub struct TrainLogs {
    pub steps: Vec<StepMetrics>,
    pub events: Vec<AdaptiveEvent>,
}
