//! Two-stage editing: embedding optimisation and finetuning of the three
//! denoisers, then density editing under guided score distillation, then
//! colour editing with the density frozen.

mod edit;
mod priors;
mod stages;

pub use edit::{
    edit_with_guidance, finetune_priors, fit_embeddings, mve_from_entries, prepare_guidance, run_full_edit, Checkpoint, EditRun, EditTask,
    OriginalEmbeddings, PreparedGuidance, ORIGINAL_VIEWS,
};
pub use priors::{train_priors, PriorConfig, PriorModels};
pub use stages::{initial_scene, run_geometry_stage, run_texture_stage, DepthGuidance, GeometryGuidance, TextureGuidance};

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::guidance::{SpsSchedule, RECOMMENDED_FUSION};
use crate::mve::Convention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    /// Start the edit from the original density.
    #[default]
    FromOriginal,
    /// Start from a soft ellipsoid, ignoring the original geometry.
    EllipsoidBlob,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::FromOriginal => "from-original",
            InitMode::EllipsoidBlob => "ellipsoid-blob",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "from-original" => Ok(InitMode::FromOriginal),
            "ellipsoid-blob" => Ok(InitMode::EllipsoidBlob),
            _ => Err(Error::argument("init mode", alloc::format!("{s:?}"))),
        }
    }
}

/// How the original object is represented in embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingMode {
    /// Four azimuth-interpolated embeddings.
    #[default]
    MultiView,
    /// One embedding shared by every view.
    Single,
    /// No embedding optimisation: the original is described by the target
    /// embedding itself.
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig {
    pub fusion_rate: f64,
    pub guidance_scale: f64,
    pub lambda_t_scale: f64,
    pub lambda_d_scale: f64,
    pub geometry_steps: usize,
    pub texture_steps: usize,
    pub phase1_steps: usize,
    pub phase3_steps: usize,
    pub aux_guidance_weight: f64,
    pub grid_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub init_mode: InitMode,
    pub embedding_mode: EmbeddingMode,
    pub convention: Convention,
    pub mve_steps: usize,
    pub mve_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Condition dropout while finetuning, so the unconditional prediction
    /// also adapts to the original object.
    pub finetune_uncond_prob: f64,
    pub finetune_weighting: crate::diffusion::LossWeighting,
    pub geometry_lr: f64,
    pub texture_lr: f64,
    /// Adam moment decay rates for the geometry and texture stages.
    pub adam_betas: (f64, f64),
    /// Rendered views averaged per optimisation step.
    pub views_per_step: usize,
    /// Timestep range as fractions of the schedule length.
    pub t_range: (f64, f64),
    /// Weight of the distillation residual per timestep.
    pub omega: TimeWeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeWeight {
    #[default]
    Unit,
    /// `1 - alpha_bar(t)`.
    NoiseVariance,
}

impl TimeWeight {
    pub fn at(self, schedule: &crate::diffusion::NoiseSchedule, t: usize) -> Result<f64> {
        match self {
            TimeWeight::Unit => Ok(1.0),
            TimeWeight::NoiseVariance => Ok(1.0 - schedule.alpha_bar(t)?),
        }
    }
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            fusion_rate: 0.6,
            guidance_scale: 10.0,
            lambda_t_scale: 0.4,
            lambda_d_scale: 0.2,
            geometry_steps: 300,
            texture_steps: 200,
            phase1_steps: 100,
            phase3_steps: 100,
            aux_guidance_weight: 0.125,
            grid_size: 16,
            image_size: 16,
            seed: 0,
            init_mode: InitMode::FromOriginal,
            embedding_mode: EmbeddingMode::MultiView,
            convention: Convention::Standard,
            mve_steps: 200,
            mve_lr: 2e-3,
            finetune_steps: 300,
            finetune_lr: 1e-4,
            finetune_uncond_prob: 0.5,
            finetune_weighting: crate::diffusion::LossWeighting::MinSnr(5.0),
            geometry_lr: 0.002,
            texture_lr: 0.02,
            adam_betas: (0.9, 0.99),
            views_per_step: 4,
            t_range: (0.02, 0.98),
            omega: TimeWeight::Unit,
        }
    }
}

impl EditConfig {
    /// Checks the domain of every field; returns warnings for values that
    /// are legal but outside their recommended range.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if !(0.0..=1.0).contains(&self.fusion_rate) {
            return Err(Error::argument("fusion_rate", alloc::format!("{} is outside [0, 1]", self.fusion_rate)));
        }
        let (lo, hi) = RECOMMENDED_FUSION;
        if self.fusion_rate < lo || self.fusion_rate > hi {
            warnings.push(alloc::format!("fusion_rate {} is outside the recommended [{lo}, {hi}]", self.fusion_rate));
        }
        for (what, v) in [
            ("aux_guidance_weight", self.aux_guidance_weight),
            ("lambda_t_scale", self.lambda_t_scale),
            ("lambda_d_scale", self.lambda_d_scale),
            ("guidance_scale", self.guidance_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::argument(what, alloc::format!("{v} must be finite and non-negative")));
            }
        }
        for (what, v) in [
            ("geometry_lr", self.geometry_lr),
            ("texture_lr", self.texture_lr),
            ("mve_lr", self.mve_lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::argument(what, alloc::format!("{v} must be positive")));
            }
        }
        if self.grid_size < 2 || self.image_size == 0 || self.views_per_step == 0 {
            return Err(Error::argument(
                "sizes",
                alloc::format!(
                    "grid {}, image {}, views per step {}",
                    self.grid_size, self.image_size, self.views_per_step
                ),
            ));
        }
        let (a, b) = self.t_range;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::argument("t_range", alloc::format!("({a}, {b})")));
        }
        self.geometry_schedule()?;
        self.texture_schedule()?;
        Ok(warnings)
    }

    pub fn geometry_schedule(&self) -> Result<SpsSchedule> {
        let mut s = SpsSchedule::new(self.geometry_steps, self.phase1_steps, self.phase3_steps)?;
        s.lambda_t_scale = self.lambda_t_scale;
        s.lambda_d_scale = self.lambda_d_scale;
        s.guidance_scale = self.guidance_scale;
        Ok(s)
    }

    /// Texture editing has no target-enhancement phase.
    pub fn texture_schedule(&self) -> Result<SpsSchedule> {
        let phase3 = self.phase3_steps.min(self.texture_steps);
        let mut s = SpsSchedule::new(self.texture_steps, 0, phase3)?;
        s.lambda_t_scale = self.lambda_t_scale;
        s.lambda_d_scale = self.lambda_d_scale;
        s.guidance_scale = self.guidance_scale;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mve,
    DepthEmbedding,
    TextureMve,
    Finetune,
    DepthFinetune,
    TextureFinetune,
    Geometry,
    Texture,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Mve => "mve",
            Stage::DepthEmbedding => "depth_embedding",
            Stage::TextureMve => "texture_mve",
            Stage::Finetune => "finetune",
            Stage::DepthFinetune => "depth_finetune",
            Stage::TextureFinetune => "texture_finetune",
            Stage::Geometry => "geometry",
            Stage::Texture => "texture",
        }
    }
}

/// One optimisation step; `phase` is 0 outside the guided stages and
/// `lambda` is the enhancement weight averaged over the step's views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub phase: u8,
    pub loss: f64,
    pub lambda: f64,
    pub grad_norm: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_without_warnings() {
        assert!(EditConfig::default().validate().unwrap().is_empty());
    }

    #[test]
    fn fusion_rate_domain() {
        let mut c = EditConfig { fusion_rate: 0.2, ..EditConfig::default() };
        assert_eq!(c.validate().unwrap().len(), 1);
        c.fusion_rate = 1.2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn negative_aux_weight_rejected() {
        let c = EditConfig { aux_guidance_weight: -0.1, ..EditConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedules_follow_config() {
        let c = EditConfig::default();
        assert_eq!(c.geometry_schedule().unwrap(), SpsSchedule::geometry());
        assert_eq!(c.texture_schedule().unwrap(), SpsSchedule::texture());
        let short = EditConfig { texture_steps: 0, ..c };
        assert_eq!(short.texture_schedule().unwrap().total_steps, 0);
    }

    #[test]
    fn init_mode_names_round_trip() {
        for m in [InitMode::FromOriginal, InitMode::EllipsoidBlob] {
            assert_eq!(InitMode::parse(m.name()).unwrap(), m);
        }
        assert!(InitMode::parse("blob").is_err());
    }
}
