use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use spsedit_core::corpus::{generate_corpus, ConceptVocabulary, CorpusSpec};
use spsedit_core::diffusion::NoiseSchedule;
use spsedit_core::metrics::{evaluate, EditIntent, ProbeEmbedder, EVAL_VIEWS};
use spsedit_core::numerics::TensorValue;
use spsedit_core::pipeline::{
    edit_with_guidance, finetune_priors, fit_embeddings, prepare_guidance, train_priors, EditConfig, EditRun, EditTask,
    EmbeddingMode, OriginalEmbeddings, PriorConfig, PriorModels, StepRecord,
};
use spsedit_core::scene::{render_color, render_depth, render_intensity, View, VoxelScene};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::report::{write_lines, MetricLine, StepLine, SweepLine};
use crate::{config, image};

#[derive(Debug, Parser)]
#[command(name = "spsedit", version, about = "Text-driven voxel editing with projection-guided score distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the captioned primitive corpus.
    GenCorpus(GenCorpusArgs),
    /// Train the intensity, depth and colour denoisers on a corpus.
    TrainPrior(TrainPriorArgs),
    /// Fit embeddings of the original object.
    OptimizeMve(OptimizeMveArgs),
    /// Finetune the priors on the original object under fitted embeddings.
    Finetune(FinetuneArgs),
    /// Run a full edit and evaluate it.
    Edit(EditArgs),
    /// Evaluate a scene checkpoint against a task.
    Eval(EvalArgs),
    /// Render one view of a scene checkpoint.
    Render(RenderArgs),
    /// Run one edit per fusion rate and write a combined report.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 384)]
    pub count: usize,
    #[arg(long, default_value_t = 16)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    /// `corpus.spse` written by gen-corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Inputs shared by every subcommand that edits.
#[derive(Debug, Args)]
pub struct TaskArgs {
    /// `priors.spse` written by train-prior.
    #[arg(long)]
    pub priors: PathBuf,
    #[arg(long, default_value = "cube-to-sphere", value_parser = EditTask::NAMES)]
    pub task: String,
    /// Run configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Describe the original by the target embedding instead of fitting one.
    #[arg(long, conflicts_with = "single_embedding")]
    pub no_mve: bool,
    /// Fit one embedding shared by all views instead of four.
    #[arg(long)]
    pub single_embedding: bool,
    #[arg(long)]
    pub no_target_enhance: bool,
    #[arg(long)]
    pub no_detail_enhance: bool,
}

#[derive(Debug, Args)]
pub struct OptimizeMveArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// `mve.spse` written by optimize-mve.
    #[arg(long)]
    pub mve: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Overrides the configuration's fusion rate.
    #[arg(long)]
    pub fusion_rate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint holding `scene.density` and `scene.color`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "cube-to-sphere", value_parser = EditTask::NAMES)]
    pub task: String,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = EVAL_VIEWS)]
    pub views: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderChannel {
    Intensity,
    Depth,
    Color,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Azimuth in degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub view: f64,
    #[arg(long, value_enum, default_value_t = RenderChannel::Intensity)]
    pub channel: RenderChannel,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    /// Output image; PGM for intensity and depth, PPM for colour.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Comma-separated fusion rates, one run each.
    #[arg(long, value_delimiter = ',', required = true)]
    pub fusion_rates: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&a),
        Command::TrainPrior(a) => train_prior(&a),
        Command::OptimizeMve(a) => optimize_mve(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Edit(a) => edit(&a),
        Command::Eval(a) => eval(&a),
        Command::Render(a) => render(&a),
        Command::Sweep(a) => sweep(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let spec = CorpusSpec { grid_size: a.grid_size, image_size: a.image_size, n_views: a.views, count: a.count, seed: a.seed };
    let corpus = generate_corpus(&spec)?;
    let vocab = ConceptVocabulary::default();
    let mut c = Container::default();
    c.push("corpus.spec", spec_tensor(&spec));
    for e in &corpus {
        let hot = vocab.tags().iter().map(|t| f64::from(u8::from(e.tags.contains(&t.as_str())))).collect();
        c.push(format!("corpus.{}.density", e.index), e.scene.density().clone());
        c.push(format!("corpus.{}.color", e.index), e.scene.color().clone());
        c.push(format!("corpus.{}.tags", e.index), TensorValue::from_vec(hot));
    }
    create_dir(&a.out)?;
    c.save(&a.out.join("corpus.spse"))?;
    #[derive(serde::Serialize)]
    struct Line<'a> {
        index: usize,
        tags: &'a [&'static str],
    }
    write_lines(&a.out.join("corpus.jsonl"), corpus.iter().map(|e| Line { index: e.index, tags: &e.tags }))?;
    println!("wrote {} objects to {}", corpus.len(), a.out.display());
    Ok(())
}

fn spec_tensor(s: &CorpusSpec) -> TensorValue {
    TensorValue::from_vec(vec![s.grid_size as f64, s.image_size as f64, s.n_views as f64, s.count as f64, s.seed as f64])
}

/// Regenerates the corpus recorded in `path` and checks it against the
/// stored scenes.
fn load_corpus(path: &Path) -> Result<(CorpusSpec, Vec<spsedit_core::corpus::CorpusEntry>)> {
    let c = Container::load(path)?;
    let fmt = |source| Error::Format { path: path.to_path_buf(), source };
    let s = c.require("corpus.spec").map_err(fmt)?.data();
    if s.len() != 5 {
        return Err(Error::Usage(format!("{}: corpus.spec must hold 5 values", path.display())));
    }
    let spec = CorpusSpec {
        grid_size: s[0] as usize,
        image_size: s[1] as usize,
        n_views: s[2] as usize,
        count: s[3] as usize,
        seed: s[4] as u64,
    };
    let corpus = generate_corpus(&spec)?;
    for e in &corpus {
        let stored = c.require(&format!("corpus.{}.density", e.index)).map_err(fmt)?;
        if stored != e.scene.density() {
            return Err(Error::Usage(format!("{}: object {} does not match its spec", path.display(), e.index)));
        }
    }
    Ok((spec, corpus))
}

fn train_prior(a: &TrainPriorArgs) -> Result<()> {
    let (_, corpus) = load_corpus(&a.corpus)?;
    let cfg = PriorConfig { steps: a.steps, seed: a.seed, ..PriorConfig::default() };
    let (models, logs) = train_priors(&corpus, &ConceptVocabulary::default(), &NoiseSchedule::default(), &cfg)?;
    create_dir(&a.out)?;
    Container::new(models.entries()).save(&a.out.join("priors.spse"))?;
    #[derive(serde::Serialize)]
    struct Line {
        model: &'static str,
        step: usize,
        loss: f64,
        grad_norm: f64,
    }
    let lines = ["intensity", "depth", "color"].into_iter().zip(&logs).flat_map(|(model, log)| {
        log.losses.iter().zip(&log.grad_norms).enumerate().map(move |(step, (&loss, &grad_norm))| Line {
            model,
            step,
            loss,
            grad_norm,
        })
    });
    write_lines(&a.out.join("train_log.jsonl"), lines)?;
    for (name, log) in ["intensity", "depth", "color"].iter().zip(&logs) {
        println!("{name}: final loss {:.4}", log.losses.last().copied().unwrap_or(f64::NAN));
    }
    Ok(())
}

/// Everything an editing subcommand needs before it starts optimising.
struct Setup {
    config: EditConfig,
    task: EditTask,
    original: VoxelScene,
    vocab: ConceptVocabulary,
    priors: PriorModels,
    noise: NoiseSchedule,
}

impl Setup {
    fn new(a: &TaskArgs) -> Result<Self> {
        let mut config = match &a.config {
            Some(p) => config::load(p)?,
            None => EditConfig::default(),
        };
        if let Some(seed) = a.seed {
            config.seed = seed;
        }
        if a.no_mve {
            config.embedding_mode = EmbeddingMode::Target;
        }
        if a.single_embedding {
            config.embedding_mode = EmbeddingMode::Single;
        }
        if a.no_target_enhance {
            config.lambda_t_scale = 0.0;
        }
        if a.no_detail_enhance {
            config.lambda_d_scale = 0.0;
        }
        let priors = PriorModels::from_entries(Container::load(&a.priors)?.entries())?;
        let task = EditTask::by_name(&a.task, config.grid_size)?;
        let original = task.original_scene(config.grid_size);
        Ok(Self { config, task, original, vocab: ConceptVocabulary::default(), priors, noise: NoiseSchedule::default() })
    }

    fn target(&self) -> Result<Vec<f64>> {
        Ok(self.vocab.encode(&self.task.target_tags(self.config.grid_size))?)
    }
}

fn optimize_mve(a: &OptimizeMveArgs) -> Result<()> {
    let s = Setup::new(&a.task)?;
    s.config.validate()?;
    let mut log = Vec::new();
    let e = fit_embeddings(&s.original, &s.target()?, &s.priors, &s.noise, &s.config, &mut log)?;
    create_dir(&a.out)?;
    Container::new(e.entries()).save(&a.out.join("mve.spse"))?;
    write_step_log(&a.out.join("log.jsonl"), &log)
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let s = Setup::new(&a.task)?;
    s.config.validate()?;
    let stored = Container::load(&a.mve)?;
    let e = OriginalEmbeddings::from_entries(|n| stored.get(n).cloned())?;
    let mut log = Vec::new();
    let models = finetune_priors(&s.original, &e, &s.priors, &s.noise, &s.config, &mut log)?;
    create_dir(&a.out)?;
    Container::new(models.entries()).save(&a.out.join("finetuned.spse"))?;
    write_step_log(&a.out.join("log.jsonl"), &log)
}

fn write_step_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    write_lines(path, log.iter().map(StepLine::from))
}

fn scene_container(scene: &VoxelScene) -> Container {
    let mut c = Container::default();
    c.push("scene.density", scene.density().clone());
    c.push("scene.color", scene.color().clone());
    c
}

fn load_scene(path: &Path) -> Result<VoxelScene> {
    let c = Container::load(path)?;
    let fmt = |source| Error::Format { path: path.to_path_buf(), source };
    let density = c.require("scene.density").map_err(fmt)?.clone();
    let color = c.require("scene.color").map_err(fmt)?.clone();
    Ok(VoxelScene::from_parts(density, color)?)
}

fn metrics(
    original: &VoxelScene,
    edited: &VoxelScene,
    task: &EditTask,
    image_size: usize,
    views: usize,
    seed: u64,
) -> Result<Vec<spsedit_core::metrics::MetricRecord>> {
    let n = original.n();
    let vocab = ConceptVocabulary::default();
    let original_text = vocab.encode(&task.original_tags(n))?;
    let target_text = vocab.encode(&task.target_tags(n))?;
    let shape = task.target_occupancy(n);
    let intent = EditIntent { original_text: &original_text, target_text: &target_text, target_shape: Some(&shape) };
    let probe = ProbeEmbedder::new(image_size * image_size, vocab.dim(), 0);
    Ok(evaluate(original, edited, &intent, &probe, image_size, views, seed)?)
}

/// Writes a run directory: the resolved config, every checkpoint, the
/// final scene, previews, the step log and the metrics.
fn write_run(dir: &Path, run: &EditRun, task: &EditTask, config: &EditConfig) -> Result<Vec<spsedit_core::metrics::MetricRecord>> {
    create_dir(&dir.join("checkpoints"))?;
    create_dir(&dir.join("renders"))?;
    fs::write(dir.join("config.txt"), config::render(config)).map_err(|e| Error::io(dir, e))?;
    scene_container(&run.original).save(&dir.join("original.spse"))?;
    for (i, cp) in run.checkpoints.iter().enumerate() {
        Container::new(cp.entries.clone()).save(&dir.join("checkpoints").join(format!("{i}_{}.spse", cp.stage)))?;
    }
    scene_container(&run.edited).save(&dir.join("edited.spse"))?;
    for az in [-90.0, 0.0, 90.0, 180.0] {
        let view = View::new(az, config.image_size)?;
        image::save(&dir.join("renders").join(format!("intensity_{az}.pgm")), &render_intensity(&run.edited, &view))?;
        image::save(&dir.join("renders").join(format!("color_{az}.ppm")), &render_color(&run.edited, &view))?;
    }
    write_step_log(&dir.join("log.jsonl"), &run.log)?;
    let m = metrics(&run.original, &run.edited, task, config.image_size, EVAL_VIEWS, config.seed)?;
    write_lines(&dir.join("metrics.jsonl"), m.iter().map(MetricLine::from))?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    Ok(m)
}

fn print_metrics(m: &[spsedit_core::metrics::MetricRecord]) {
    for r in m {
        println!("{} = {:.4}", r.metric, r.value);
    }
}

fn edit(a: &EditArgs) -> Result<()> {
    let mut s = Setup::new(&a.task)?;
    if let Some(r) = a.fusion_rate {
        s.config.fusion_rate = r;
    }
    let tags = s.task.target_tags(s.config.grid_size);
    let run = spsedit_core::pipeline::run_full_edit(&s.original, &tags, &s.vocab, &s.priors, &s.noise, &s.config)?;
    create_dir(&a.out)?;
    let m = write_run(&a.out, &run, &s.task, &s.config)?;
    print_metrics(&m);
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let s = Setup::new(&a.task)?;
    for &r in &a.fusion_rates {
        EditConfig { fusion_rate: r, ..s.config.clone() }.validate()?;
    }
    let tags = s.task.target_tags(s.config.grid_size);
    let target = s.target()?;
    let mut prep_log = Vec::new();
    let prepared = prepare_guidance(&s.original, &target, &s.priors, &s.noise, &s.config, &mut prep_log)?;
    create_dir(&a.out)?;
    let mut report = Vec::new();
    for &r in &a.fusion_rates {
        let config = EditConfig { fusion_rate: r, ..s.config.clone() };
        let run = edit_with_guidance(&s.original, &tags, &s.vocab, &prepared, &s.noise, &config, prep_log.clone())?;
        let name = format!("r{r}");
        let m = write_run(&a.out.join(&name), &run, &s.task, &config)?;
        println!("{name}:");
        print_metrics(&m);
        report.push((name, r, m));
    }
    let lines = report
        .iter()
        .flat_map(|(run, r, m)| m.iter().map(move |rec| SweepLine { run, fusion_rate: *r, metric: MetricLine::from(rec) }));
    write_lines(&a.out.join("report.jsonl"), lines)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let edited = load_scene(&a.checkpoint)?;
    let task = EditTask::by_name(&a.task, edited.n())?;
    let original = task.original_scene(edited.n());
    let m = metrics(&original, &edited, &task, a.image_size, a.views, a.seed)?;
    create_dir(&a.out)?;
    write_lines(&a.out.join("metrics.jsonl"), m.iter().map(MetricLine::from))?;
    print_metrics(&m);
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let scene = load_scene(&a.checkpoint)?;
    let view = View::new(a.view, a.image_size)?;
    let img = match a.channel {
        RenderChannel::Intensity => render_intensity(&scene, &view),
        RenderChannel::Depth => render_depth(&scene, &view),
        RenderChannel::Color => render_color(&scene, &view),
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    image::save(&a.out, &img)
}
