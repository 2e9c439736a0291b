use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::denoiser::Denoiser;
use super::schedule::{mix, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{vecops, Adam, RngStream, Tape};

/// Per-view condition embedding (multi-view or single shared embedding).
pub trait Conditioning {
    fn embedding_at(&self, azimuth: f64) -> Vec<f64>;
}

/// A clean training image and the embedding it is captioned with.
#[derive(Debug, Clone, Copy)]
pub struct Captioned<'a> {
    pub image: &'a [f64],
    pub embedding: &'a [f64],
}

/// A clean render of the object being edited, with its view azimuth.
#[derive(Debug, Clone, Copy)]
pub struct ViewImage<'a> {
    pub azimuth: f64,
    pub image: &'a [f64],
}

/// Per-timestep weight of the squared noise error during training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LossWeighting {
    /// Plain noise-prediction error.
    #[default]
    Noise,
    /// Noise error times `min(snr, gamma) / snr`, which caps the weight of
    /// nearly clean timesteps.
    MinSnr(f64),
}

impl LossWeighting {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        match self {
            LossWeighting::Noise => Ok(1.0),
            LossWeighting::MinSnr(gamma) => {
                let ab = schedule.alpha_bar(t)?;
                let snr = ab / (1.0 - ab);
                Ok(snr.min(gamma) / snr)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Probability of replacing the condition with the zero embedding, so the
    /// same network also learns the unconditional prediction.
    pub uncond_prob: f64,
    pub weighting: LossWeighting,
}

impl TrainConfig {
    pub fn prior(steps: usize, seed: u64) -> Self {
        Self { steps, lr: 1e-3, batch: 16, seed, uncond_prob: 0.15, weighting: LossWeighting::MinSnr(5.0) }
    }

    pub fn finetune(steps: usize, seed: u64) -> Self {
        Self { steps, lr: 1e-4, batch: 4, seed, uncond_prob: 0.15, weighting: LossWeighting::MinSnr(5.0) }
    }
}

/// Per-step mean squared noise-prediction error and gradient norm.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the first and the last `fraction` of the steps.
    pub fn head_tail(&self, fraction: f64) -> (f64, f64) {
        let k = ((self.losses.len() as f64 * fraction) as usize).max(1).min(self.losses.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..k]), mean(&self.losses[self.losses.len() - k..]))
    }
}

/// One noisy training example: image index, timestep and injected noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub item: usize,
    pub t: usize,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample(rng: &mut RngStream, items: usize, image_len: usize, schedule: &NoiseSchedule) -> Self {
        let item = rng.index(items);
        let t = rng.uniform_int(1, schedule.steps() as i64).expect("non-empty schedule") as usize;
        let eps = rng.gaussian(&[image_len]).into_data();
        Self { item, t, eps }
    }

    /// A fixed evaluation set.
    pub fn fixed_set(seed: u64, count: usize, items: usize, image_len: usize, schedule: &NoiseSchedule) -> Vec<Self> {
        let mut rng = RngStream::new(seed);
        (0..count).map(|_| Self::sample(&mut rng, items, image_len, schedule)).collect()
    }
}

fn fit<'a>(
    den: &mut Denoiser,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut next: impl FnMut(&mut RngStream) -> (&'a [f64], &'a [f64], usize, Vec<f64>, bool),
) -> Result<TrainLog> {
    let mut rng = RngStream::new(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    let (len, dim) = (den.image_len(), den.embed_dim());
    for step in 0..cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch * len);
        let mut es = Vec::with_capacity(cfg.batch * dim);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut target = Vec::with_capacity(cfg.batch * len);
        let mut weights = Vec::with_capacity(cfg.batch * len);
        for _ in 0..cfg.batch {
            let (image, emb, t, eps, drop) = next(&mut rng);
            let (a, b) = schedule.coefficients(t)?;
            xs.extend(mix(image, &eps, a, b));
            if drop {
                es.extend(core::iter::repeat_n(0.0, dim));
            } else {
                es.extend_from_slice(emb);
            }
            ts.push(t);
            target.extend(eps);
            weights.extend(core::iter::repeat_n(libm::sqrt(cfg.weighting.weight(schedule, t)?), len));
        }
        let mut tape = Tape::new();
        let p = den.record_params(&mut tape, true);
        let x = tape.constant_from(&[cfg.batch, len], xs)?;
        let e = tape.constant_from(&[cfg.batch, dim], es)?;
        let pred = den.record(&mut tape, p, x, e, &ts)?;
        let loss = match cfg.weighting {
            LossWeighting::Noise => tape.mse(pred, &target)?,
            _ => {
                let target = tape.constant_from(&[cfg.batch, len], target)?;
                let w = tape.constant_from(&[cfg.batch, len], weights)?;
                let diff = tape.sub(pred, target)?;
                let weighted = tape.mul(diff, w)?;
                tape.mse(weighted, &vec![0.0; cfg.batch * len])?
            }
        };
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::Training { step, detail: format!("loss {value}") });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<&[f64]> = p.all().iter().map(|&v| grads.get(v).expect("parameter is reachable")).collect();
        log.grad_norms.push(libm::sqrt(g.iter().map(|v| vecops::dot(v, v)).sum::<f64>()));
        let mut params: Vec<&mut [f64]> = den.params_mut().tensors_mut().map(|t| t.data_mut()).collect();
        adam.step(&mut params, &g);
        log.losses.push(value);
    }
    Ok(log)
}

/// Trains the prior on captioned images and freezes the result as the
/// pre-finetune weights.
pub fn train_prior(
    den: &mut Denoiser,
    data: &[Captioned<'_>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::argument("corpus", "no training images"));
    }
    let len = den.image_len();
    let log = fit(den, schedule, cfg, |rng| {
        let d = NoiseDraw::sample(rng, data.len(), len, schedule);
        let drop = rng.uniform() < cfg.uncond_prob;
        (data[d.item].image, data[d.item].embedding, d.t, d.eps, drop)
    })?;
    den.freeze();
    Ok(log)
}

/// Fits the weights to the renders of one object under fixed per-view
/// embeddings. The frozen pre-finetune copy is left alone.
pub fn finetune(
    den: &mut Denoiser,
    views: &[ViewImage<'_>],
    cond: &dyn Conditioning,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if views.is_empty() {
        return Err(Error::argument("views", "no renders to finetune on"));
    }
    let embeddings: Vec<Vec<f64>> = views.iter().map(|v| cond.embedding_at(v.azimuth)).collect();
    let len = den.image_len();
    let embeddings = &embeddings;
    fit(den, schedule, cfg, |rng| {
        let d = NoiseDraw::sample(rng, views.len(), len, schedule);
        let drop = cfg.uncond_prob > 0.0 && rng.uniform() < cfg.uncond_prob;
        (views[d.item].image, embeddings[d.item].as_slice(), d.t, d.eps, drop)
    })
}

/// Mean squared noise-prediction error over fixed draws, each draw's image
/// conditioned by `embedding(item)`.
pub fn denoising_loss(
    den: &Denoiser,
    images: &[&[f64]],
    embedding: impl Fn(usize) -> Vec<f64>,
    schedule: &NoiseSchedule,
    draws: &[NoiseDraw],
) -> Result<f64> {
    let mut total = 0.0;
    for d in draws {
        let x_t = schedule.add_noise(images[d.item], d.t, &d.eps)?;
        let pred = den.predict(&x_t, &embedding(d.item), d.t)?;
        total += pred.iter().zip(&d.eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / pred.len() as f64;
    }
    Ok(total / draws.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl Conditioning for Fixed {
        fn embedding_at(&self, _: f64) -> Vec<f64> {
            self.0.clone()
        }
    }

    fn toy_images() -> Vec<Vec<f64>> {
        (0..4).map(|k| (0..9).map(|i| if i % 4 == k { 0.8 } else { 0.1 }).collect()).collect()
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let imgs = toy_images();
        let emb = vec![1.0, 0.0];
        let data: Vec<Captioned> = imgs.iter().map(|i| Captioned { image: i, embedding: &emb }).collect();
        let mut d = Denoiser::new(9, 2, 3);
        let before = d.clone();
        train_prior(&mut d, &data, &NoiseSchedule::default(), &TrainConfig::prior(0, 1)).unwrap();
        assert_eq!(d.params(), before.params());
        assert_eq!(d.frozen(), Some(before.params()));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let imgs = toy_images();
        let emb = vec![1.0, 0.0];
        let data: Vec<Captioned> = imgs.iter().map(|i| Captioned { image: i, embedding: &emb }).collect();
        let s = NoiseSchedule::default();
        let run = || {
            let mut d = Denoiser::new(9, 2, 3);
            let log = train_prior(&mut d, &data, &s, &TrainConfig::prior(300, 9)).unwrap();
            (d, log)
        };
        let (a, log) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        let (head, tail) = log.head_tail(0.1);
        assert!(tail < 0.8 * head, "{head} -> {tail}");
    }

    #[test]
    fn finetune_keeps_frozen_copy() {
        let imgs = toy_images();
        let emb = vec![1.0, 0.0];
        let data: Vec<Captioned> = imgs.iter().map(|i| Captioned { image: i, embedding: &emb }).collect();
        let s = NoiseSchedule::default();
        let mut d = Denoiser::new(9, 2, 3);
        train_prior(&mut d, &data, &s, &TrainConfig::prior(20, 9)).unwrap();
        let frozen = d.frozen().cloned();
        let views: Vec<ViewImage> = imgs.iter().enumerate().map(|(k, i)| ViewImage { azimuth: k as f64, image: i }).collect();
        let before = d.clone();
        finetune(&mut d, &views, &Fixed(vec![0.0, 1.0]), &s, &TrainConfig::finetune(0, 1)).unwrap();
        assert_eq!(d, before);
        finetune(&mut d, &views, &Fixed(vec![0.0, 1.0]), &s, &TrainConfig::finetune(10, 1)).unwrap();
        assert_ne!(d.params(), before.params());
        assert_eq!(d.frozen().cloned(), frozen);
    }
}
