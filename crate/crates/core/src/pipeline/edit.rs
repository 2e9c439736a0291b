use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{EditConfig, EmbeddingMode, PriorModels, Stage, StepRecord};
use super::stages::{run_geometry_stage, run_texture_stage, DepthGuidance, GeometryGuidance, TextureGuidance};
use crate::corpus::{describe, render_views, ConceptVocabulary, Paint, Primitive, ViewRender};
use crate::diffusion::{finetune, Conditioning, Denoiser, NoiseSchedule, TrainConfig, TrainLog, ViewImage};
use crate::error::{Error, Result};
use crate::guidance::fuse;
use crate::metrics::Occupancy;
use crate::mve::{optimize_embeddings, optimize_single, EmbeddingOptConfig, MultiViewEmbedding, SingleEmbedding};
use crate::numerics::TensorValue;
use crate::scene::{View, VoxelScene};

/// Views of the original object used for embedding fitting and finetuning.
pub const ORIGINAL_VIEWS: usize = 8;

/// A synthetic edit with a known target shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTask {
    pub name: &'static str,
    pub original: Primitive,
    pub paint: Paint,
    pub target: Primitive,
    pub target_paint: Paint,
}

impl EditTask {
    pub const NAMES: [&'static str; 2] = ["cube-to-sphere", "recolor"];

    /// Red cube into a green sphere; sizes scale with the grid.
    pub fn cube_to_sphere(n: usize) -> Self {
        let s = n as f64 / 16.0;
        Self {
            name: "cube-to-sphere",
            original: Primitive::cube(4.5 * s),
            paint: Paint::Red,
            target: Primitive::sphere(5.5 * s),
            target_paint: Paint::Green,
        }
    }

    /// Red cube into a green cube.
    pub fn recolor(n: usize) -> Self {
        let cube = Primitive::cube(4.5 * n as f64 / 16.0);
        Self { name: "recolor", original: cube, paint: Paint::Red, target: cube, target_paint: Paint::Green }
    }

    pub fn by_name(name: &str, n: usize) -> Result<Self> {
        match name {
            "cube-to-sphere" => Ok(Self::cube_to_sphere(n)),
            "recolor" => Ok(Self::recolor(n)),
            _ => Err(Error::argument("task", format!("unknown task {name:?}"))),
        }
    }

    pub fn original_scene(&self, n: usize) -> VoxelScene {
        self.original.to_scene(n, self.paint.rgb())
    }

    pub fn original_tags(&self, n: usize) -> Vec<&'static str> {
        let mut t = describe(&self.original, n);
        t.push(self.paint.tag());
        t
    }

    pub fn target_tags(&self, n: usize) -> Vec<&'static str> {
        let mut t = describe(&self.target, n);
        t.push(self.target_paint.tag());
        t
    }

    pub fn target_occupancy(&self, n: usize) -> Occupancy {
        Occupancy::new(n, self.target.occupancy(n)).expect("occupancy of an n-grid")
    }
}

/// Named tensors saved after one pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: &'static str,
    pub entries: Vec<(String, TensorValue)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&TensorValue> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Finetuned denoisers and the optimised embeddings of the original object.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGuidance {
    pub models: PriorModels,
    pub mve: MultiViewEmbedding,
    pub depth_embedding: Vec<f64>,
    pub texture_mve: MultiViewEmbedding,
}

impl PreparedGuidance {
    pub fn embedding_entries(&self) -> Vec<(String, TensorValue)> {
        OriginalEmbeddings {
            mve: self.mve.clone(),
            depth_embedding: self.depth_embedding.clone(),
            texture_mve: self.texture_mve.clone(),
        }
        .entries()
    }

    pub fn geometry<'a>(&'a self, target: &'a [f64]) -> GeometryGuidance<'a> {
        GeometryGuidance {
            denoiser: &self.models.intensity,
            target,
            original: &self.mve,
            depth: Some(DepthGuidance { denoiser: &self.models.depth, original: &self.depth_embedding }),
        }
    }

    pub fn texture<'a>(&'a self, target: &'a [f64]) -> TextureGuidance<'a> {
        TextureGuidance { denoiser: &self.models.color, target, original: &self.texture_mve }
    }
}

fn mve_entries(prefix: &str, m: &MultiViewEmbedding) -> Vec<(String, TensorValue)> {
    m.bases().iter().enumerate().map(|(i, b)| (format!("{prefix}.base.{i}"), TensorValue::from_vec(b.clone()))).collect()
}

/// Rebuilds a multi-view embedding saved under `<prefix>.base.{0..3}`.
pub fn mve_from_entries(prefix: &str, get: impl Fn(&str) -> Option<TensorValue>) -> Result<MultiViewEmbedding> {
    let mut bases: [Vec<f64>; 4] = Default::default();
    for (i, b) in bases.iter_mut().enumerate() {
        let name = format!("{prefix}.base.{i}");
        *b = get(&name).ok_or_else(|| Error::argument("checkpoint", format!("missing {name}")))?.into_data();
    }
    MultiViewEmbedding::from_bases(bases)
}

fn push_log(log: &mut Vec<StepRecord>, stage: Stage, t: &TrainLog) {
    for (step, (&loss, &grad_norm)) in t.losses.iter().zip(&t.grad_norms).enumerate() {
        log.push(StepRecord { step, stage, phase: 0, loss, lambda: 0.0, grad_norm });
    }
}

fn fit_original(
    den: &Denoiser,
    views: &[ViewImage<'_>],
    target: &[f64],
    noise: &NoiseSchedule,
    config: &EditConfig,
    seed: u64,
    stage: Stage,
    log: &mut Vec<StepRecord>,
) -> Result<MultiViewEmbedding> {
    let opt = EmbeddingOptConfig { steps: config.mve_steps, lr: config.mve_lr, lr_final: config.mve_lr, batch: 4, seed };
    let mut m = match config.embedding_mode {
        EmbeddingMode::MultiView => {
            let mut m = MultiViewEmbedding::cloned_from(target);
            push_log(log, stage, &optimize_embeddings(&mut m, den, views, noise, &opt)?);
            m
        }
        EmbeddingMode::Single => {
            let mut e = SingleEmbedding::new(target.to_vec());
            push_log(log, stage, &optimize_single(&mut e, den, views, noise, &opt)?);
            e.as_multiview()
        }
        EmbeddingMode::Target => MultiViewEmbedding::cloned_from(target),
    };
    m.convention = config.convention;
    Ok(m)
}

fn tune(
    den: &mut Denoiser,
    views: &[ViewImage<'_>],
    cond: &dyn Conditioning,
    noise: &NoiseSchedule,
    config: &EditConfig,
    seed: u64,
    stage: Stage,
    log: &mut Vec<StepRecord>,
) -> Result<()> {
    let cfg = TrainConfig { steps: config.finetune_steps, lr: config.finetune_lr, batch: 4, seed, uncond_prob: config.finetune_uncond_prob, weighting: config.finetune_weighting };
    push_log(log, stage, &finetune(den, views, cond, noise, &cfg)?);
    Ok(())
}

/// Optimised embeddings of the original object for the three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginalEmbeddings {
    pub mve: MultiViewEmbedding,
    pub depth_embedding: Vec<f64>,
    pub texture_mve: MultiViewEmbedding,
}

impl OriginalEmbeddings {
    pub fn entries(&self) -> Vec<(String, TensorValue)> {
        let mut out = mve_entries("mve", &self.mve);
        out.push(("depth_embedding".to_string(), TensorValue::from_vec(self.depth_embedding.clone())));
        out.extend(mve_entries("texture_mve", &self.texture_mve));
        out
    }

    pub fn from_entries(get: impl Fn(&str) -> Option<TensorValue>) -> Result<Self> {
        let depth_embedding =
            get("depth_embedding").ok_or_else(|| Error::argument("checkpoint", "missing depth_embedding"))?.into_data();
        Ok(Self { mve: mve_from_entries("mve", &get)?, depth_embedding, texture_mve: mve_from_entries("texture_mve", &get)? })
    }
}

struct OriginalRenders(Vec<ViewRender>);

impl OriginalRenders {
    fn new(original: &VoxelScene, image_size: usize) -> Self {
        Self(render_views(original, &View::ring(ORIGINAL_VIEWS, image_size)))
    }

    fn pick(&self, f: fn(&ViewRender) -> &TensorValue) -> Vec<ViewImage<'_>> {
        self.0.iter().map(|r| ViewImage { azimuth: r.azimuth, image: f(r).data() }).collect()
    }
}

/// Fits embeddings of the original object for all three channels, starting
/// from the target embedding.
pub fn fit_embeddings(
    original: &VoxelScene,
    target: &[f64],
    priors: &PriorModels,
    noise: &NoiseSchedule,
    config: &EditConfig,
    log: &mut Vec<StepRecord>,
) -> Result<OriginalEmbeddings> {
    let renders = OriginalRenders::new(original, config.image_size);
    let seed = config.seed;
    let stage = |e: Error| e.in_stage("mve");
    let mve = fit_original(&priors.intensity, &renders.pick(|r| &r.intensity), target, noise, config, seed ^ 0x1, Stage::Mve, log)
        .map_err(stage)?;
    let mut depth_e = SingleEmbedding::new(target.to_vec());
    if config.embedding_mode != EmbeddingMode::Target {
        let opt = EmbeddingOptConfig { steps: config.mve_steps, lr: config.mve_lr, lr_final: config.mve_lr, batch: 4, seed: seed ^ 0x2 };
        let depth = renders.pick(|r| &r.depth);
        push_log(log, Stage::DepthEmbedding, &optimize_single(&mut depth_e, &priors.depth, &depth, noise, &opt).map_err(stage)?);
    }
    let texture_mve =
        fit_original(&priors.color, &renders.pick(|r| &r.color), target, noise, config, seed ^ 0x3, Stage::TextureMve, log)
            .map_err(stage)?;
    Ok(OriginalEmbeddings { mve, depth_embedding: depth_e.value, texture_mve })
}

/// Finetunes a copy of each prior on the original's renders under the
/// fitted embeddings, which stay fixed.
pub fn finetune_priors(
    original: &VoxelScene,
    embeddings: &OriginalEmbeddings,
    priors: &PriorModels,
    noise: &NoiseSchedule,
    config: &EditConfig,
    log: &mut Vec<StepRecord>,
) -> Result<PriorModels> {
    let renders = OriginalRenders::new(original, config.image_size);
    let seed = config.seed;
    let mut models = priors.clone();
    let depth_e = SingleEmbedding::new(embeddings.depth_embedding.clone());
    let stage = |e: Error| e.in_stage("finetune");
    tune(&mut models.intensity, &renders.pick(|r| &r.intensity), &embeddings.mve, noise, config, seed ^ 0x4, Stage::Finetune, log)
        .map_err(stage)?;
    tune(&mut models.depth, &renders.pick(|r| &r.depth), &depth_e, noise, config, seed ^ 0x5, Stage::DepthFinetune, log)
        .map_err(stage)?;
    tune(&mut models.color, &renders.pick(|r| &r.color), &embeddings.texture_mve, noise, config, seed ^ 0x6, Stage::TextureFinetune, log)
        .map_err(stage)?;
    Ok(models)
}

/// [`fit_embeddings`] followed by [`finetune_priors`].
pub fn prepare_guidance(
    original: &VoxelScene,
    target: &[f64],
    priors: &PriorModels,
    noise: &NoiseSchedule,
    config: &EditConfig,
    log: &mut Vec<StepRecord>,
) -> Result<PreparedGuidance> {
    let e = fit_embeddings(original, target, priors, noise, config, log)?;
    let models = finetune_priors(original, &e, priors, noise, config, log)?;
    Ok(PreparedGuidance { models, mve: e.mve, depth_embedding: e.depth_embedding, texture_mve: e.texture_mve })
}

/// Everything a full edit produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRun {
    pub original: VoxelScene,
    pub target_tags: Vec<String>,
    pub checkpoints: Vec<Checkpoint>,
    pub edited: VoxelScene,
    pub log: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

fn scene_entries(scene: &VoxelScene) -> Vec<(String, TensorValue)> {
    alloc::vec![
        ("scene.density".to_string(), scene.density().clone()),
        ("scene.color".to_string(), scene.color().clone()),
    ]
}

/// Embedding fitting, finetuning, fusion, geometry stage and texture stage,
/// with a checkpoint after each.
pub fn run_full_edit(
    original: &VoxelScene,
    target_tags: &[&str],
    vocab: &ConceptVocabulary,
    priors: &PriorModels,
    noise: &NoiseSchedule,
    config: &EditConfig,
) -> Result<EditRun> {
    check_inputs(original, priors, config)?;
    let target = vocab.encode(target_tags)?;
    let mut log = Vec::new();
    let prepared = prepare_guidance(original, &target, priors, noise, config, &mut log)?;
    edit_with_guidance(original, target_tags, vocab, &prepared, noise, config, log)
}

fn check_inputs(original: &VoxelScene, priors: &PriorModels, config: &EditConfig) -> Result<Vec<String>> {
    let warnings = config.validate()?;
    if original.n() != config.grid_size || priors.image_len() != config.image_size * config.image_size {
        return Err(Error::argument("config", "grid or image size does not match the inputs"));
    }
    Ok(warnings)
}

/// The part of [`run_full_edit`] after [`prepare_guidance`], so several
/// fusion rates can share one preparation. `log` holds the preparation
/// records and is extended with the editing steps.
pub fn edit_with_guidance(
    original: &VoxelScene,
    target_tags: &[&str],
    vocab: &ConceptVocabulary,
    prepared: &PreparedGuidance,
    noise: &NoiseSchedule,
    config: &EditConfig,
    mut log: Vec<StepRecord>,
) -> Result<EditRun> {
    let warnings = check_inputs(original, &prepared.models, config)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let target = vocab.encode(target_tags)?;
    let mut checkpoints = Vec::new();
    checkpoints.push(Checkpoint { stage: "mve", entries: prepared.embedding_entries() });
    checkpoints.push(Checkpoint { stage: "finetune", entries: prepared.models.entries() });

    let r = config.fusion_rate;
    let fused = prepared.mve.map_bases(|b| fuse(&target, b, r))?;
    let mut entries = mve_entries("fused", &fused);
    entries.push(("fused_depth".to_string(), TensorValue::from_vec(fuse(&target, &prepared.depth_embedding, r)?)));
    entries.extend(mve_entries("texture_fused", &prepared.texture_mve.map_bases(|b| fuse(&target, b, r))?));
    checkpoints.push(Checkpoint { stage: "fuse", entries });

    let shaped = run_geometry_stage(original, &prepared.geometry(&target), noise, config, &mut log)
        .map_err(|e| e.in_stage("geometry"))?;
    checkpoints.push(Checkpoint { stage: "geometry", entries: scene_entries(&shaped) });

    let edited = run_texture_stage(&shaped, &prepared.texture(&target), noise, config, &mut log)
        .map_err(|e| e.in_stage("texture"))?;
    checkpoints.push(Checkpoint { stage: "texture", entries: scene_entries(&edited) });

    Ok(EditRun {
        original: original.clone(),
        target_tags: target_tags.iter().map(|t| t.to_string()).collect(),
        checkpoints,
        edited,
        log,
        warnings,
    })
}
