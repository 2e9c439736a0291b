use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{ConceptVocabulary, CorpusEntry};
use crate::diffusion::{train_prior, LossWeighting, Captioned, Denoiser, DenoiserParams, NoiseSchedule, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::numerics::TensorValue;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub uncond_prob: f64,
    pub weighting: LossWeighting,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let t = TrainConfig::prior(4000, 0);
        Self { steps: t.steps, lr: t.lr, batch: t.batch, seed: t.seed, uncond_prob: t.uncond_prob, weighting: t.weighting }
    }
}

impl PriorConfig {
    fn train_config(&self, salt: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            seed: self.seed ^ salt,
            uncond_prob: self.uncond_prob,
            weighting: self.weighting,
        }
    }
}

/// Denoisers for intensity, depth and colour renders.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorModels {
    pub intensity: Denoiser,
    pub depth: Denoiser,
    pub color: Denoiser,
}

const PREFIXES: [&str; 3] = ["denoiser", "depth_denoiser", "color_denoiser"];

impl PriorModels {
    fn all(&self) -> [&Denoiser; 3] {
        [&self.intensity, &self.depth, &self.color]
    }

    /// Current and pre-finetune weights under `<model>.φ.<layer>` and
    /// `<model>.φ0.<layer>`.
    pub fn entries(&self) -> Vec<(String, TensorValue)> {
        let mut out = Vec::new();
        for (prefix, den) in PREFIXES.iter().zip(self.all()) {
            for (name, t) in den.params().named() {
                out.push((format!("{prefix}.φ.{name}"), t.clone()));
            }
            if let Some(frozen) = den.frozen() {
                for (name, t) in frozen.named() {
                    out.push((format!("{prefix}.φ0.{name}"), t.clone()));
                }
            }
        }
        out
    }

    pub fn from_entries(entries: &[(String, TensorValue)]) -> Result<Self> {
        let find = |key: String| entries.iter().find(|(n, _)| *n == key).map(|(_, t)| t);
        let mut models = Vec::with_capacity(3);
        for prefix in PREFIXES {
            let params = DenoiserParams::from_named(|n| find(format!("{prefix}.φ.{n}")))?;
            let has_frozen = entries.iter().any(|(n, _)| n.starts_with(&format!("{prefix}.φ0.")));
            let frozen = if has_frozen {
                Some(DenoiserParams::from_named(|n| find(format!("{prefix}.φ0.{n}")))?)
            } else {
                None
            };
            models.push(Denoiser::from_params(params, frozen)?);
        }
        let color = models.pop().expect("three models");
        let depth = models.pop().expect("three models");
        let intensity = models.pop().expect("three models");
        if intensity.image_len() != depth.image_len() || color.image_len() != 3 * intensity.image_len() {
            return Err(Error::shape("priors", "denoiser image sizes disagree"));
        }
        Ok(Self { intensity, depth, color })
    }

    pub fn image_len(&self) -> usize {
        self.intensity.image_len()
    }
}

/// Trains the three priors on every render of every corpus entry, each
/// captioned with the entry's tag encoding.
pub fn train_priors(
    corpus: &[CorpusEntry],
    vocab: &ConceptVocabulary,
    schedule: &NoiseSchedule,
    cfg: &PriorConfig,
) -> Result<(PriorModels, [TrainLog; 3])> {
    let first = corpus.first().ok_or_else(|| Error::argument("corpus", "no entries"))?;
    let view = first.renders.first().ok_or_else(|| Error::argument("corpus", "entries have no renders"))?;
    let len = view.intensity.len();
    let captions = corpus.iter().map(|e| vocab.encode(&e.tags)).collect::<Result<Vec<_>>>()?;
    let dataset = |pick: fn(&crate::corpus::ViewRender) -> &TensorValue| -> Vec<Captioned<'_>> {
        corpus
            .iter()
            .zip(&captions)
            .flat_map(|(e, c)| e.renders.iter().map(move |r| Captioned { image: pick(r).data(), embedding: c }))
            .collect()
    };
    let dim = vocab.dim();
    let mut intensity = Denoiser::new(len, dim, cfg.seed ^ 0x11);
    let mut depth = Denoiser::new(len, dim, cfg.seed ^ 0x22);
    let mut color = Denoiser::new(3 * len, dim, cfg.seed ^ 0x33);
    let a = train_prior(&mut intensity, &dataset(|r| &r.intensity), schedule, &cfg.train_config(0x11))?;
    let b = train_prior(&mut depth, &dataset(|r| &r.depth), schedule, &cfg.train_config(0x22))?;
    let c = train_prior(&mut color, &dataset(|r| &r.color), schedule, &cfg.train_config(0x33))?;
    Ok((PriorModels { intensity, depth, color }, [a, b, c]))
}
