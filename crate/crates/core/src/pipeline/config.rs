//! Training configuration: stage schedules, loss weights, learning rates,
//! guidance providers, and the checkpoint policy. Everything round-trips
//! through TOML with dotted sections mirroring the structs, so a config file
//! can override any single key (e.g. `refine.lambda_opacity = 100.0`).

use serde::{Deserialize, Serialize};

use crate::adaptive::DensifyConfig;
use crate::camera::PoseSamplerConfig;
use crate::error::GsError;
use crate::guidance::{ddpm_schedule, NoiseSchedule, DEFAULT_T_WINDOW};
use crate::rasterizer::{BackgroundMlp, BackgroundModel};

/// The two optimization stages, in the order they run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    #[default]
    Geometry,
    Refine,
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageKind::Geometry => write!(f, "geometry"),
            StageKind::Refine => write!(f, "refine"),
        }
    }
}

/// Reference point for the position regularizer in the refinement stage:
/// `deviation` penalizes drift from the snapshot taken when refinement
/// starts, `literal` penalizes distance from the origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanMode {
    Deviation,
    Literal,
}

/// Loss term weights. The geometry stage uses `lambda_sds` and `lambda_3d`;
/// refinement uses `lambda_sds`, `lambda_mean`, and `lambda_opacity`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sds: f64,
    pub lambda_3d: f64,
    pub lambda_mean: f64,
    pub lambda_opacity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sds: 0.1,
            lambda_3d: 0.01,
            lambda_mean: 1.0,
            lambda_opacity: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), GsError> {
        for (name, v) in [
            ("lambda_sds", self.lambda_sds),
            ("lambda_3d", self.lambda_3d),
            ("lambda_mean", self.lambda_mean),
            ("lambda_opacity", self.lambda_opacity),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(GsError::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-parameter-group Adam learning rates. The position rate is further
/// multiplied by [`StageConfig::position_lr_scale`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub positions: f64,
    pub colors: f64,
    pub opacities: f64,
    pub scales: f64,
    pub rotations: f64,
    pub background: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            positions: 1e-3,
            colors: 1e-2,
            opacities: 5e-2,
            scales: 5e-3,
            rotations: 1e-3,
            background: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<(), GsError> {
        for (name, v) in [
            ("positions", self.positions),
            ("colors", self.colors),
            ("opacities", self.opacities),
            ("scales", self.scales),
            ("rotations", self.rotations),
            ("background", self.background),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(GsError::invalid(format!(
                    "learning rate {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-stage schedule and hyperparameters. `iterations = 0` skips the stage
/// explicitly; a stage that runs requires `batch >= 1` and a positive
/// resolution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageConfig {
    /// Which stage this schedule drives; set from the section name when a
    /// config file is parsed, never from a key inside the section.
    #[serde(skip)]
    pub stage: StageKind,
    pub iterations: usize,
    /// Cameras rendered per optimization step.
    pub batch: usize,
    /// Square render resolution in pixels.
    pub resolution: usize,
    /// Seed for this stage's camera/noise/split streams.
    pub seed: u64,
    #[serde(flatten)]
    pub weights: LossWeights,
    /// Only consulted by the refinement stage.
    pub mean_mode: MeanMode,
    pub lr: LearningRates,
    /// Damping factor on the position learning rate (user-guided generation
    /// wants positions to move slowly once geometry is roughed in).
    pub position_lr_scale: f64,
    /// Adaptive density control; only honored during refinement.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub densify: Option<DensifyConfig>,
}

impl StageConfig {
    pub fn geometry() -> Self {
        StageConfig {
            stage: StageKind::Geometry,
            iterations: 500,
            batch: 4,
            resolution: 128,
            seed: 0,
            weights: LossWeights::default(),
            mean_mode: MeanMode::Deviation,
            lr: LearningRates::default(),
            position_lr_scale: 1.0,
            densify: None,
        }
    }

    pub fn refine() -> Self {
        StageConfig {
            stage: StageKind::Refine,
            iterations: 1000,
            densify: Some(DensifyConfig::default()),
            ..StageConfig::geometry()
        }
    }

    pub fn validate(&self) -> Result<(), GsError> {
        if self.iterations > 0 {
            if self.batch == 0 {
                return Err(GsError::invalid("batch must be at least 1"));
            }
            if self.resolution == 0 {
                return Err(GsError::invalid("resolution must be positive"));
            }
        }
        if !(self.position_lr_scale > 0.0) || !self.position_lr_scale.is_finite() {
            return Err(GsError::invalid("position_lr_scale must be positive"));
        }
        self.weights.validate()?;
        self.lr.validate()?;
        if let Some(d) = &self.densify {
            d.validate()?;
        }
        Ok(())
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::geometry()
    }
}

/// Which score network backs a guidance channel. `null` yields zero guidance
/// gradients; `external` speaks the length-prefixed TCP protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Null,
    External,
}

/// Noise schedule and provider selection for score distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub image: ProviderKind,
    pub point: ProviderKind,
    /// Address of the external score service, shared by both channels.
    pub address: String,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Timestep window as fractions of the schedule length.
    pub t_window: [f64; 2],
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            image: ProviderKind::Null,
            point: ProviderKind::Null,
            address: "127.0.0.1:7331".to_string(),
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
            t_window: DEFAULT_T_WINDOW,
        }
    }
}

impl GuidanceConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule, GsError> {
        let [lo, hi] = self.t_window;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(GsError::invalid(format!(
                "t_window must satisfy 0 <= lo < hi <= 1, got [{lo}, {hi}]"
            )));
        }
        let mut schedule = ddpm_schedule(self.steps, self.beta_min, self.beta_max)?;
        schedule.t_range_frac = self.t_window;
        Ok(schedule)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Constant,
    Mlp,
}

/// Background model selection. The constant color is fixed; the MLP is
/// optimized jointly with the Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundConfig {
    pub kind: BackgroundKind,
    /// RGB in [0,1]; only used by `kind = "constant"`.
    pub color: [f64; 3],
    /// Weight-init seed; only used by `kind = "mlp"`.
    pub seed: u64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            kind: BackgroundKind::Mlp,
            color: [0.0; 3],
            seed: 0,
        }
    }
}

impl BackgroundConfig {
    pub fn build(&self) -> BackgroundModel<f32> {
        match self.kind {
            BackgroundKind::Constant => BackgroundModel::Constant(nalgebra::Vector3::new(
                self.color[0] as f32,
                self.color[1] as f32,
                self.color[2] as f32,
            )),
            BackgroundKind::Mlp => BackgroundModel::Mlp(BackgroundMlp::init(self.seed)),
        }
    }

    pub fn validate(&self) -> Result<(), GsError> {
        for v in self.color {
            if !(0.0..=1.0).contains(&v) {
                return Err(GsError::invalid("background color channels must lie in [0,1]"));
            }
        }
        Ok(())
    }
}

/// When and where checkpoints get written. `interval = 0` writes only the
/// final checkpoint; `dir = None` disables disk output entirely.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointPolicy {
    pub interval: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

/// Complete training run description: both stages plus shared scene,
/// guidance, and artifact settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Conditioning text forwarded to score providers.
    pub prompt: String,
    pub geometry: StageConfig,
    pub refine: StageConfig,
    pub poses: PoseSamplerConfig,
    pub guidance: GuidanceConfig,
    pub background: BackgroundConfig,
    pub checkpoint: CheckpointPolicy,
}

/// Partial `[geometry]`/`[refine]` section: every key optional so missing
/// entries fall back to that stage's own defaults rather than a shared one.
#[derive(Default, Deserialize)]
#[serde(default)]
struct StagePatch {
    iterations: Option<usize>,
    batch: Option<usize>,
    resolution: Option<usize>,
    seed: Option<u64>,
    #[serde(flatten)]
    weights: WeightsPatch,
    mean_mode: Option<MeanMode>,
    lr: Option<LearningRates>,
    position_lr_scale: Option<f64>,
    densify: Option<DensifyConfig>,
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct WeightsPatch {
    lambda_sds: Option<f64>,
    lambda_3d: Option<f64>,
    lambda_mean: Option<f64>,
    lambda_opacity: Option<f64>,
}

impl StagePatch {
    fn apply(self, mut base: StageConfig) -> StageConfig {
        if let Some(v) = self.iterations {
            base.iterations = v;
        }
        if let Some(v) = self.batch {
            base.batch = v;
        }
        if let Some(v) = self.resolution {
            base.resolution = v;
        }
        if let Some(v) = self.seed {
            base.seed = v;
        }
        if let Some(v) = self.weights.lambda_sds {
            base.weights.lambda_sds = v;
        }
        if let Some(v) = self.weights.lambda_3d {
            base.weights.lambda_3d = v;
        }
        if let Some(v) = self.weights.lambda_mean {
            base.weights.lambda_mean = v;
        }
        if let Some(v) = self.weights.lambda_opacity {
            base.weights.lambda_opacity = v;
        }
        if let Some(v) = self.mean_mode {
            base.mean_mode = v;
        }
        if let Some(v) = self.lr {
            base.lr = v;
        }
        if let Some(v) = self.position_lr_scale {
            base.position_lr_scale = v;
        }
        if let Some(v) = self.densify {
            base.densify = Some(v);
        }
        base
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            prompt: String::new(),
            geometry: StageConfig::geometry(),
            refine: StageConfig::refine(),
            poses: PoseSamplerConfig::default(),
            guidance: GuidanceConfig::default(),
            background: BackgroundConfig::default(),
            checkpoint: CheckpointPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GsError> {
        if self.geometry.stage != StageKind::Geometry {
            return Err(GsError::invalid("[geometry] section must have stage = \"geometry\""));
        }
        if self.refine.stage != StageKind::Refine {
            return Err(GsError::invalid("[refine] section must have stage = \"refine\""));
        }
        self.geometry.validate()?;
        self.refine.validate()?;
        self.poses.validate()?;
        self.guidance.schedule()?;
        self.background.validate()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, GsError> {
        #[derive(Default, Deserialize)]
        #[serde(default)]
        struct Raw {
            prompt: String,
            geometry: StagePatch,
            refine: StagePatch,
            poses: PoseSamplerConfig,
            guidance: GuidanceConfig,
            background: BackgroundConfig,
            checkpoint: CheckpointPolicy,
        }
        let raw: Raw =
            toml::from_str(s).map_err(|e| GsError::invalid(format!("config parse error: {e}")))?;
        let cfg = TrainConfig {
            prompt: raw.prompt,
            geometry: raw.geometry.apply(StageConfig::geometry()),
            refine: raw.refine.apply(StageConfig::refine()),
            poses: raw.poses,
            guidance: raw.guidance,
            background: raw.background,
            checkpoint: raw.checkpoint,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GsError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// FNV-1a over the canonical TOML serialization; checkpoints embed this
    /// so a resume against a different config is rejected.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_hyperparameters() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.geometry.weights.lambda_sds, 0.1);
        assert_eq!(cfg.geometry.weights.lambda_3d, 0.01);
        assert_eq!(cfg.refine.weights.lambda_mean, 1.0);
        assert_eq!(cfg.refine.weights.lambda_opacity, 100.0);
        assert_eq!(cfg.geometry.batch, 4);
        let lr = cfg.refine.lr;
        assert_eq!(
            (lr.positions, lr.colors, lr.opacities, lr.scales, lr.rotations, lr.background),
            (1e-3, 1e-2, 5e-2, 5e-3, 1e-3, 1e-3)
        );
        assert_eq!(cfg.refine.mean_mode, MeanMode::Deviation);
        assert!(cfg.geometry.densify.is_none());
        assert!(cfg.refine.densify.is_some());
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_every_field() {
        let mut cfg = TrainConfig::default();
        cfg.prompt = "a ceramic mug".to_string();
        cfg.refine.weights.lambda_opacity = 42.5;
        cfg.geometry.seed = 7;
        cfg.checkpoint.dir = Some("out".to_string());
        cfg.checkpoint.interval = 100;
        let text = cfg.to_toml_string();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_key_overrides_land_on_the_right_field() {
        let cfg = TrainConfig::from_toml_str(
            "refine.lambda_opacity = 100.0\nrefine.mean_mode = \"literal\"\ngeometry.iterations = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.refine.weights.lambda_opacity, 100.0);
        assert_eq!(cfg.refine.mean_mode, MeanMode::Literal);
        assert_eq!(cfg.geometry.iterations, 3);
        assert_eq!(cfg.refine.iterations, 1000);
    }

    #[test]
    fn hash_is_stable_and_sensitive_to_changes() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.refine.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.geometry.weights.lambda_sds = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.refine.batch = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.guidance.t_window = [0.9, 0.1];
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.refine.stage = StageKind::Geometry;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_iteration_stages_skip_batch_validation() {
        let mut cfg = TrainConfig::default();
        cfg.geometry.iterations = 0;
        cfg.geometry.batch = 0;
        cfg.validate().unwrap();
    }
}
