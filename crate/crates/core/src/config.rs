//! Pipeline configuration loaded from TOML. Every section is optional and
//! falls back to the desk defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, LossConfig, NoiseSchedule, StepPlan, TrainHyper};
use crate::error::{Error, Result};
use crate::fusion::VoteConfig;
use crate::geometry::{CameraModel, TablePlane};
use crate::kinematics::{IkSettings, KinematicChain};
use crate::planning::PlanningConfig;
use crate::rng::RngSeed;
use crate::sim::{default_catalog, ExecutionTolerances, GeneratorConfig, NoiseModel, SceneObject};
use crate::types::Point3;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub dataset: u64,
    pub split: u64,
    pub train: u64,
    pub infer: u64,
    pub execute: u64,
}

/// Pinhole camera placed above the table and pitched toward +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub x: f64,
    pub y: f64,
    pub height_above_table: f64,
    pub pitch_deg: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        CameraSection {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 320.0,
            x: 0.0,
            y: 0.0,
            height_above_table: 0.45,
            pitch_deg: 60.0,
        }
    }
}

impl CameraSection {
    pub fn build(&self, table: &TablePlane) -> Result<CameraModel> {
        CameraModel::pitched(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Point3::new(self.x, self.y, table.height_m + self.height_above_table),
            self.pitch_deg.to_radians(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub preset: String,
    /// Replaces the preset when present.
    pub custom: Option<KinematicChain>,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            preset: "nicol-like-8dof".into(),
            custom: None,
        }
    }
}

impl ChainSection {
    pub fn build(&self) -> Result<KinematicChain> {
        let chain = match &self.custom {
            Some(c) => c.clone(),
            None => KinematicChain::preset(&self.preset)
                .ok_or_else(|| Error::Config(format!("unknown chain preset '{}'", self.preset)))?,
        };
        chain.validate()?;
        Ok(chain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub total_steps: usize,
    pub scale: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            total_steps: 1000,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    /// `desk` or `paper-shape`; `layers`/`width` override the preset.
    pub preset: String,
    pub layers: Option<usize>,
    pub width: Option<usize>,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            preset: "desk".into(),
            layers: None,
            width: None,
        }
    }
}

impl ArchSection {
    pub fn build(&self, num_classes: usize, feature_dim: usize) -> Result<DenoiserConfig> {
        let mut cfg = match self.preset.as_str() {
            "desk" => DenoiserConfig::desk(num_classes, feature_dim),
            "paper-shape" => DenoiserConfig::paper_shape(num_classes, feature_dim),
            other => return Err(Error::Config(format!("unknown architecture preset '{other}'"))),
        };
        if let Some(l) = self.layers {
            cfg.layers = l;
        }
        if let Some(w) = self.width {
            cfg.width = w;
        }
        if cfg.layers == 0 || cfg.width == 0 {
            return Err(Error::Config(
                "architecture needs at least one layer of positive width".into(),
            ));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub grad_clip: Option<f64>,
    pub train_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        TrainSection {
            lr: h.lr,
            momentum: h.momentum,
            epochs: h.epochs,
            grad_clip: h.grad_clip,
            train_fraction: 0.8,
        }
    }
}

impl TrainSection {
    pub fn hyper(&self, seed: RngSeed) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            seed: seed.0,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionSection {
    pub grasp_radius: f64,
    pub place_radius: f64,
    pub pinch_offset: f64,
    pub contact_margin: f64,
    /// Cartesian interpolation spacing (meters).
    pub cart_step: f64,
}

impl Default for ExecutionSection {
    fn default() -> Self {
        let t = ExecutionTolerances::default();
        ExecutionSection {
            grasp_radius: t.grasp_radius,
            place_radius: t.place_radius,
            pinch_offset: t.pinch_offset,
            contact_margin: t.contact_margin,
            cart_step: 0.02,
        }
    }
}

impl ExecutionSection {
    pub fn tolerances(&self) -> ExecutionTolerances {
        ExecutionTolerances {
            grasp_radius: self.grasp_radius,
            place_radius: self.place_radius,
            pinch_offset: self.pinch_offset,
            contact_margin: self.contact_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Grounded point counts as correct within this distance of the truth.
    pub position_tol_m: f64,
    /// `direct` or a step count.
    pub infer_steps: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            position_tol_m: 0.05,
            infer_steps: "100".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seeds: Seeds,
    pub camera: CameraSection,
    pub table: TablePlane,
    pub chain: ChainSection,
    pub vote: VoteConfig,
    pub noise: NoiseModel,
    pub generator: GeneratorSection,
    pub loss: LossConfig,
    pub schedule: ScheduleSection,
    pub arch: ArchSection,
    pub train: TrainSection,
    pub ik: IkSettings,
    pub planning: PlanningConfig,
    pub execution: ExecutionSection,
    pub eval: EvalSection,
    pub objects: Vec<SceneObject>,
}

/// Generator settings other than the noise model, which has its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub frame_count: usize,
    pub fps: f64,
    pub feature_dim: usize,
    pub feature_seed: u64,
    pub timing_outlier_prob: f64,
    pub min_separation_m: f64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        GeneratorSection {
            frame_count: g.frame_count,
            fps: g.fps,
            feature_dim: g.feature_dim,
            feature_seed: g.feature_seed,
            timing_outlier_prob: g.timing_outlier_prob,
            min_separation_m: g.min_separation_m,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seeds: Seeds::default(),
            camera: CameraSection::default(),
            table: TablePlane::desk_default(),
            chain: ChainSection::default(),
            vote: VoteConfig::default(),
            noise: NoiseModel::default(),
            generator: GeneratorSection::default(),
            loss: LossConfig::default(),
            schedule: ScheduleSection::default(),
            arch: ArchSection::default(),
            train: TrainSection::default(),
            ik: IkSettings::default(),
            planning: PlanningConfig::default(),
            execution: ExecutionSection::default(),
            eval: EvalSection::default(),
            objects: default_catalog(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.table.validate()?;
        self.camera()?;
        self.chain()?;
        self.vote.validate()?;
        self.noise.validate()?;
        self.loss.validate()?;
        self.ik.validate()?;
        self.denoiser()?;
        self.infer_steps()?;
        self.schedule()?;
        let h = &self.train;
        if !(h.lr > 0.0) || !(0.0..1.0).contains(&h.momentum) || h.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config(
                "train needs lr > 0, momentum in [0, 1) and a positive grad_clip".into(),
            ));
        }
        if !(self.train.train_fraction > 0.0 && self.train.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        let g = &self.generator;
        if g.frame_count < 50 || !(g.fps > 0.0) || g.feature_dim == 0 {
            return Err(Error::Config(
                "generator needs >= 50 frames, fps > 0 and feature_dim > 0".into(),
            ));
        }
        let x = &self.execution;
        if !(x.cart_step > 0.0) || !(x.grasp_radius > 0.0) || !(x.place_radius > 0.0) {
            return Err(Error::Config("execution radii and cart_step must be positive".into()));
        }
        if !(self.planning.d_min >= 0.0) || !(self.planning.hover >= 0.0) || !(self.eval.position_tol_m > 0.0) {
            return Err(Error::Config("planning distances must be non-negative".into()));
        }
        if self.objects.is_empty() || !self.objects.iter().any(|o| o.graspable) {
            return Err(Error::Config(
                "object catalog needs at least one graspable object".into(),
            ));
        }
        for o in &self.objects {
            if !(o.footprint_radius > 0.0 && o.height > 0.0) {
                return Err(Error::Config(format!(
                    "object {} needs positive radius and height",
                    o.object_id
                )));
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraModel> {
        self.camera.build(&self.table)
    }

    pub fn chain(&self) -> Result<KinematicChain> {
        self.chain.build()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.schedule.total_steps, self.schedule.scale)
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        self.arch
            .build(crate::types::DEFAULT_NUM_CLASSES, self.generator.feature_dim)
    }

    pub fn infer_steps(&self) -> Result<StepPlan> {
        StepPlan::parse(&self.eval.infer_steps)
    }

    pub fn generator(&self) -> GeneratorConfig {
        let g = &self.generator;
        GeneratorConfig {
            noise: self.noise.clone(),
            frame_count: g.frame_count,
            fps: g.fps,
            feature_dim: g.feature_dim,
            feature_seed: g.feature_seed,
            timing_outlier_prob: g.timing_outlier_prob,
            min_separation_m: g.min_separation_m,
            ..GeneratorConfig::default()
        }
    }

    pub fn seed(&self, which: fn(&Seeds) -> u64) -> RngSeed {
        RngSeed(which(&self.seeds))
    }
}
