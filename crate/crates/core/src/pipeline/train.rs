//! Training orchestration. One thread owns all mutable state; every random
//! draw comes from a counter-based stream keyed by (stage seed, purpose,
//! global iteration), so runs are pure functions of (config, init, seed)
//! regardless of worker count, and a resumed run replays the exact draws an
//! uninterrupted one would have made.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptive::{
    densify_compactness, prune, split_by_gradient, view_screen_radii, GradAccumulator,
};
use crate::camera::sample_poses;
use crate::error::GsError;
use crate::gaussians::GaussianCloud;
use crate::guidance::{ExternalImageScore, ExternalPointScore, ImageScoreProvider, PointScoreProvider};

use super::checkpoint::Checkpoint;
use super::config::{ProviderKind, StageConfig, TrainConfig};
use super::stages::{geometry_step, refine_step};
use super::{Adam, AdaptiveEvent, TrainLogs, TrainObserver};

const PURPOSE_CAMERA: u64 = 1;
const PURPOSE_NOISE: u64 = 2;
pub(crate) const PURPOSE_SPLIT: u64 = 3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for one (seed, purpose, iteration) triple.
pub(crate) fn stream_rng(seed: u64, purpose: u64, iter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(purpose ^ splitmix64(iter))))
}

/// Final state plus the full step/event record of the run.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub logs: TrainLogs,
}

/// Runs both stages with providers selected by the config (`null` or
/// `external`).
pub fn train(
    cfg: &TrainConfig,
    init: &GaussianCloud<f32>,
    resume: Option<Checkpoint>,
    observer: Option<&mut dyn TrainObserver>,
) -> Result<TrainResult, GsError> {
    let image_ext;
    let image: Option<&dyn ImageScoreProvider<f32>> = match cfg.guidance.image {
        ProviderKind::Null => None,
        ProviderKind::External => {
            image_ext = ExternalImageScore { addr: cfg.guidance.address.clone() };
            Some(&image_ext)
        }
    };
    let point_ext;
    let point: Option<&dyn PointScoreProvider<f32>> = match cfg.guidance.point {
        ProviderKind::Null => None,
        ProviderKind::External => {
            point_ext = ExternalPointScore { addr: cfg.guidance.address.clone() };
            Some(&point_ext)
        }
    };
    train_with_providers(cfg, init, image, point, resume, observer)
}

/// [`train`] with explicit score providers, for driving runs from oracle
/// implementations.
pub fn train_with_providers(
    cfg: &TrainConfig,
    init: &GaussianCloud<f32>,
    image_provider: Option<&dyn ImageScoreProvider<f32>>,
    point_provider: Option<&dyn PointScoreProvider<f32>>,
    resume: Option<Checkpoint>,
    mut observer: Option<&mut dyn TrainObserver>,
) -> Result<TrainResult, GsError> {
    cfg.validate()?;
    let schedule = cfg.guidance.schedule()?;
    let g_iters = cfg.geometry.iterations as u64;
    let total = g_iters + cfg.refine.iterations as u64;
    let config_hash = cfg.hash();

    let (mut cloud, mut background, mut adam, mut accumulator, start, mut geometry_done, mut refine_done) =
        match resume {
            Some(ck) => {
                if ck.config_hash != config_hash {
                    return Err(GsError::Checkpoint(
                        "checkpoint was written by a different config".to_string(),
                    ));
                }
                (
                    ck.cloud,
                    ck.background,
                    ck.adam,
                    ck.accumulator,
                    ck.iteration,
                    ck.geometry_done,
                    ck.refine_done,
                )
            }
            None => {
                init.validate_shape()?;
                if init.len() == 0 {
                    return Err(GsError::empty("cannot train an empty cloud"));
                }
                let background = cfg.background.build();
                let adam = Adam::new(init.len(), &background);
                let accumulator = GradAccumulator::new(init.len());
                (init.clone(), background, adam, accumulator, 0, g_iters == 0, total == 0)
            }
        };
    if start >= g_iters && !geometry_done {
        return Err(GsError::Checkpoint(
            "refinement requires a geometry stage that completed or was explicitly skipped"
                .to_string(),
        ));
    }

    let mut logs = TrainLogs::default();
    let mut iteration = start;
    for iter in (start + 1)..=total {
        let in_geometry = iter <= g_iters;
        let sc: &StageConfig = if in_geometry { &cfg.geometry } else { &cfg.refine };

        if !in_geometry && iter == g_iters + 1 {
            cloud.snapshot_positions = Some(cloud.positions.clone());
            accumulator.reset(cloud.len());
        }

        let started = Instant::now();
        let mut cam_rng = stream_rng(sc.seed, PURPOSE_CAMERA, iter);
        let cams = sample_poses::<f32, _>(
            &cfg.poses,
            sc.batch,
            sc.resolution,
            sc.resolution,
            &mut cam_rng,
        )?;
        let mut noise_rng = stream_rng(sc.seed, PURPOSE_NOISE, iter);
        let (grads, mut metrics) = if in_geometry {
            geometry_step(
                &cloud,
                &background,
                image_provider,
                point_provider,
                &sc.weights,
                &cams,
                &schedule,
                &cfg.prompt,
                &mut noise_rng,
            )?
        } else {
            refine_step(
                &cloud,
                &background,
                image_provider,
                &sc.weights,
                &cams,
                &schedule,
                &cfg.prompt,
                sc.mean_mode,
                &mut noise_rng,
            )?
        };
        if !metrics.loss().is_finite() || grads.assert_finite().is_err() {
            return Err(GsError::NonFinite(format!(
                "aborting at iteration {iter}: non-finite loss or gradients (last checkpoint kept)"
            )));
        }
        if !in_geometry {
            accumulator.accumulate(&grads)?;
        }
        adam.step(&mut cloud, &mut background, &grads, &sc.lr, sc.position_lr_scale)?;

        // Skip density control on the terminal iteration: Gaussians created
        // there would land in the final state without a single training step.
        if !in_geometry && iter < total {
            if let Some(densify) = &sc.densify {
                let refine_iter = iter - g_iters;
                let due = |interval: usize| interval > 0 && refine_iter % interval as u64 == 0;
                if due(densify.split_interval) {
                    let mut rng = stream_rng(sc.seed, PURPOSE_SPLIT, iter);
                    let outcome =
                        split_by_gradient(&mut cloud, &mut accumulator, densify, &mut rng)?;
                    adam.extend_zeros(outcome.n_after - outcome.n_before);
                    let event = AdaptiveEvent::Split {
                        iteration: iter,
                        n_before: outcome.n_before,
                        n_after: outcome.n_after,
                        split_indices: outcome.split_indices,
                    };
                    record_event(event, &mut logs, &mut observer);
                }
                if due(densify.compact_interval) {
                    let outcome = densify_compactness(&mut cloud, densify)?;
                    adam.extend_zeros(outcome.n_after - outcome.n_before);
                    accumulator.extend_zeros(outcome.n_after - outcome.n_before);
                    let event = AdaptiveEvent::Compactness {
                        iteration: iter,
                        n_before: outcome.n_before,
                        n_after: outcome.n_after,
                        insertions: outcome.insertions,
                    };
                    record_event(event, &mut logs, &mut observer);
                }
                if due(densify.prune_interval) {
                    let radii =
                        view_screen_radii(&cloud, cams.last().expect("batch is nonempty"))?;
                    let outcome = prune(&mut cloud, densify, Some(&radii))?;
                    adam.retain_indices(&outcome.kept);
                    accumulator.retain_indices(&outcome.kept);
                    let min_opacity_after = cloud
                        .activate()?
                        .opacities
                        .iter()
                        .copied()
                        .fold(f32::INFINITY, f32::min);
                    let event = AdaptiveEvent::Prune {
                        iteration: iter,
                        n_before: outcome.n_before,
                        n_after: outcome.n_after,
                        kept: outcome.kept,
                        min_opacity_after,
                    };
                    record_event(event, &mut logs, &mut observer);
                }
            }
        }

        iteration = iter;
        if iter == g_iters {
            geometry_done = true;
        }
        if iter == total {
            refine_done = true;
        }

        metrics.iteration = iter;
        metrics.n_gaussians = cloud.len();
        metrics.seconds = started.elapsed().as_secs_f64();
        log::info!("{}", metrics.log_line());
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_step(&metrics);
        }
        logs.steps.push(metrics);

        if let Some(dir) = &cfg.checkpoint.dir {
            let due = cfg.checkpoint.interval > 0
                && iter % cfg.checkpoint.interval as u64 == 0;
            if due || iter == total {
                let ck = snapshot_state(
                    cfg,
                    iteration,
                    config_hash,
                    geometry_done,
                    refine_done,
                    &cloud,
                    &background,
                    &adam,
                    &accumulator,
                );
                let path = PathBuf::from(dir).join(format!("checkpoint_{iter:06}.ckpt"));
                ck.save(&path)?;
                if let Some(obs) = observer.as_deref_mut() {
                    obs.on_checkpoint(&path, iter);
                }
            }
        }
    }

    let checkpoint = snapshot_state(
        cfg,
        iteration,
        config_hash,
        geometry_done,
        refine_done,
        &cloud,
        &background,
        &adam,
        &accumulator,
    );
    Ok(TrainResult { checkpoint, logs })
}

#[allow(clippy::too_many_arguments)]
fn snapshot_state(
    cfg: &TrainConfig,
    iteration: u64,
    config_hash: u64,
    geometry_done: bool,
    refine_done: bool,
    cloud: &GaussianCloud<f32>,
    background: &crate::rasterizer::BackgroundModel<f32>,
    adam: &Adam,
    accumulator: &GradAccumulator<f32>,
) -> Checkpoint {
    Checkpoint {
        iteration,
        geometry_seed: cfg.geometry.seed,
        refine_seed: cfg.refine.seed,
        config_hash,
        geometry_done,
        refine_done,
        cloud: cloud.clone(),
        background: background.clone(),
        adam: adam.clone(),
        accumulator: accumulator.clone(),
    }
}

fn record_event(
    event: AdaptiveEvent,
    logs: &mut TrainLogs,
    observer: &mut Option<&mut dyn TrainObserver>,
) {
    log::info!("{}", event.log_line());
    if let Some(obs) = observer.as_deref_mut() {
        obs.on_event(&event);
    }
    logs.events.push(event);
}
