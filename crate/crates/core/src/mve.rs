//! Multi-view embeddings: four trainable condition embeddings pinned to the
//! base azimuths 0, -90, 90 and 180 degrees, linearly interpolated in
//! between, and fitted so the frozen denoiser reconstructs the original
//! object's renders.

use alloc::format;
use alloc::vec::Vec;

use crate::diffusion::{Conditioning, Denoiser, NoiseDraw, NoiseSchedule, TrainLog, ViewImage};
use crate::error::{Error, Result};
use crate::numerics::{vecops, Adam, RngStream, Tape, Var};
use crate::scene::normalize_azimuth;

/// Base azimuths in storage order (`mve.base.0` .. `mve.base.3`).
pub const BASE_AZIMUTHS: [f64; 4] = [0.0, -90.0, 90.0, 180.0];

/// Which base receives weight `1 - s` on a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Convention {
    /// Weight 1 on the lower base at the segment start, so each base azimuth
    /// reproduces its own embedding.
    #[default]
    Standard,
    /// Coefficients swapped: weight `s` on the lower base and `1 - s` on the
    /// upper one.
    Swapped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewEmbedding {
    bases: [Vec<f64>; 4],
    pub trainable: bool,
    pub convention: Convention,
}

// Segment lower/upper base indices, ascending from -180.
const SEGMENTS: [(f64, usize, usize); 4] = [(-180.0, 3, 1), (-90.0, 1, 0), (0.0, 0, 2), (90.0, 2, 3)];

impl MultiViewEmbedding {
    /// All four bases start as clones of `e`.
    pub fn cloned_from(e: &[f64]) -> Self {
        Self {
            bases: [e.to_vec(), e.to_vec(), e.to_vec(), e.to_vec()],
            trainable: true,
            convention: Convention::Standard,
        }
    }

    pub fn from_bases(bases: [Vec<f64>; 4]) -> Result<Self> {
        let d = bases[0].len();
        if d == 0 || bases.iter().any(|b| b.len() != d) {
            return Err(Error::shape("mve", "bases differ in length"));
        }
        Ok(Self { bases, trainable: true, convention: Convention::Standard })
    }

    pub fn bases(&self) -> &[Vec<f64>; 4] {
        &self.bases
    }

    pub fn dim(&self) -> usize {
        self.bases[0].len()
    }

    /// The two bases adjacent to `azimuth` and their interpolation weights.
    pub fn weights(&self, azimuth: f64) -> [(usize, f64); 2] {
        let a = normalize_azimuth(azimuth);
        let &(start, lo, hi) = SEGMENTS.iter().rev().find(|s| a >= s.0).expect("azimuth >= -180");
        let s = (a - start) / 90.0;
        match self.convention {
            Convention::Standard => [(lo, 1.0 - s), (hi, s)],
            Convention::Swapped => [(lo, s), (hi, 1.0 - s)],
        }
    }

    pub fn interpolate(&self, azimuth: f64) -> Vec<f64> {
        let [(i, wi), (j, wj)] = self.weights(azimuth);
        self.bases[i].iter().zip(&self.bases[j]).map(|(a, b)| wi * a + wj * b).collect()
    }

    /// Records the interpolation of tape-held bases.
    pub fn record_interpolate(&self, tape: &mut Tape, bases: &[Var; 4], azimuth: f64) -> Result<Var> {
        let [(i, wi), (j, wj)] = self.weights(azimuth);
        tape.combine(&[(bases[i], wi), (bases[j], wj)])
    }

    /// Applies `f` to each base in turn.
    pub fn map_bases(&self, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let mut out = self.clone();
        for b in out.bases.iter_mut() {
            *b = f(b)?;
        }
        Ok(out)
    }
}

impl Conditioning for MultiViewEmbedding {
    fn embedding_at(&self, azimuth: f64) -> Vec<f64> {
        self.interpolate(azimuth)
    }
}

/// One embedding shared by every view.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleEmbedding {
    pub value: Vec<f64>,
    pub trainable: bool,
}

impl SingleEmbedding {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value, trainable: true }
    }

    /// A multi-view embedding whose four bases all equal this one.
    pub fn as_multiview(&self) -> MultiViewEmbedding {
        MultiViewEmbedding::cloned_from(&self.value)
    }
}

impl Conditioning for SingleEmbedding {
    fn embedding_at(&self, _: f64) -> Vec<f64> {
        self.value.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingOptConfig {
    pub steps: usize,
    pub lr: f64,
    /// Learning rate reached at the last step by cosine annealing; equal to
    /// `lr` for a constant rate.
    pub lr_final: f64,
    pub batch: usize,
    pub seed: u64,
}

impl EmbeddingOptConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self { steps, lr: 2e-3, lr_final: 2e-3, batch: 4, seed }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps < 2 {
            return self.lr;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

/// Reconstruction loss over fixed draws: mean over draws of the per-pixel
/// mean squared error between `eps_hat(x_t; e(view), t)` and `eps`.
pub fn recon_loss(
    den: &Denoiser,
    cond: &dyn Conditioning,
    views: &[ViewImage<'_>],
    schedule: &NoiseSchedule,
    draws: &[NoiseDraw],
) -> Result<f64> {
    recon_loss_with(den, cond, views, draws, |t| schedule.coefficients(t))
}

/// The shared-embedding form of [`recon_loss`].
pub fn single_embedding_loss(
    e: &SingleEmbedding,
    den: &Denoiser,
    views: &[ViewImage<'_>],
    schedule: &NoiseSchedule,
    draws: &[NoiseDraw],
) -> Result<f64> {
    recon_loss(den, e, views, schedule, draws)
}

fn recon_loss_with(
    den: &Denoiser,
    cond: &dyn Conditioning,
    views: &[ViewImage<'_>],
    draws: &[NoiseDraw],
    coefficients: impl Fn(usize) -> Result<(f64, f64)>,
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::argument("draws", "empty evaluation set"));
    }
    let mut total = 0.0;
    for d in draws {
        let v = views.get(d.item).ok_or_else(|| Error::argument("draw", format!("view {}", d.item)))?;
        let (a, b) = coefficients(d.t)?;
        let x_t: Vec<f64> = v.image.iter().zip(&d.eps).map(|(x, e)| a * x + b * e).collect();
        let pred = den.predict(&x_t, &cond.embedding_at(v.azimuth), d.t)?;
        total += pred.iter().zip(&d.eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / pred.len() as f64;
    }
    Ok(total / draws.len() as f64)
}

/// Records the batch reconstruction loss with `embed` producing each draw's
/// embedding variable; the denoiser weights enter as constants.
pub fn record_recon_loss(
    tape: &mut Tape,
    den: &Denoiser,
    views: &[ViewImage<'_>],
    schedule: &NoiseSchedule,
    draws: &[NoiseDraw],
    mut embed: impl FnMut(&mut Tape, f64) -> Result<Var>,
) -> Result<Var> {
    let len = den.image_len();
    let mut xs = Vec::with_capacity(draws.len() * len);
    let mut rows = Vec::with_capacity(draws.len());
    let mut ts = Vec::with_capacity(draws.len());
    let mut target = Vec::with_capacity(draws.len() * len);
    for d in draws {
        let v = &views[d.item];
        xs.extend(schedule.add_noise(v.image, d.t, &d.eps)?);
        rows.push(embed(tape, v.azimuth)?);
        ts.push(d.t);
        target.extend_from_slice(&d.eps);
    }
    let p = den.record_params(tape, false);
    let x = tape.constant_from(&[draws.len(), len], xs)?;
    let e = tape.stack(&rows)?;
    let pred = den.record(tape, p, x, e, &ts)?;
    tape.mse(pred, &target)
}

fn check_views(views: &[ViewImage<'_>], den: &Denoiser) -> Result<()> {
    if views.is_empty() {
        return Err(Error::argument("views", "no renders of the original object"));
    }
    if views.iter().any(|v| v.image.len() != den.image_len()) {
        return Err(Error::shape("views", "render size does not match the denoiser"));
    }
    Ok(())
}

/// Fits the four bases to the renders; the denoiser stays frozen.
pub fn optimize_embeddings(
    mve: &mut MultiViewEmbedding,
    den: &Denoiser,
    views: &[ViewImage<'_>],
    schedule: &NoiseSchedule,
    cfg: &EmbeddingOptConfig,
) -> Result<TrainLog> {
    check_views(views, den)?;
    if !mve.trainable {
        return Err(Error::argument("mve", "embedding is frozen"));
    }
    let mut rng = RngStream::new(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let draws: Vec<NoiseDraw> =
            (0..cfg.batch).map(|_| NoiseDraw::sample(&mut rng, views.len(), den.image_len(), schedule)).collect();
        let mut tape = Tape::new();
        let bases = [
            tape.param(&crate::numerics::TensorValue::from_vec(mve.bases[0].clone())),
            tape.param(&crate::numerics::TensorValue::from_vec(mve.bases[1].clone())),
            tape.param(&crate::numerics::TensorValue::from_vec(mve.bases[2].clone())),
            tape.param(&crate::numerics::TensorValue::from_vec(mve.bases[3].clone())),
        ];
        let frozen_rule = mve.clone();
        let loss = record_recon_loss(&mut tape, den, views, schedule, &draws, |tape, az| {
            frozen_rule.record_interpolate(tape, &bases, az)
        })?;
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::Training { step, detail: format!("loss {value}") });
        }
        let grads = tape.backward(loss)?;
        let zero = alloc::vec![0.0; mve.dim()];
        let g: Vec<&[f64]> = bases.iter().map(|&b| grads.get(b).unwrap_or(&zero)).collect();
        let norm = libm::sqrt(g.iter().map(|v| vecops::dot(v, v)).sum::<f64>());
        let mut params: Vec<&mut [f64]> = mve.bases.iter_mut().map(|b| b.as_mut_slice()).collect();
        adam.lr = cfg.lr_at(step);
        adam.step(&mut params, &g);
        log.losses.push(value);
        log.grad_norms.push(norm);
    }
    Ok(log)
}

/// Shared-embedding counterpart of [`optimize_embeddings`].
pub fn optimize_single(
    e: &mut SingleEmbedding,
    den: &Denoiser,
    views: &[ViewImage<'_>],
    schedule: &NoiseSchedule,
    cfg: &EmbeddingOptConfig,
) -> Result<TrainLog> {
    check_views(views, den)?;
    if !e.trainable {
        return Err(Error::argument("embedding", "embedding is frozen"));
    }
    let mut rng = RngStream::new(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let draws: Vec<NoiseDraw> =
            (0..cfg.batch).map(|_| NoiseDraw::sample(&mut rng, views.len(), den.image_len(), schedule)).collect();
        let mut tape = Tape::new();
        let var = tape.param(&crate::numerics::TensorValue::from_vec(e.value.clone()));
        let loss = record_recon_loss(&mut tape, den, views, schedule, &draws, |_, _| Ok(var))?;
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::Training { step, detail: format!("loss {value}") });
        }
        let grads = tape.backward(loss)?;
        let g = grads.get(var).expect("embedding is reachable").to_vec();
        log.grad_norms.push(vecops::norm(&g));
        adam.lr = cfg.lr_at(step);
        adam.step(&mut [e.value.as_mut_slice()], &[&g]);
        log.losses.push(value);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, TensorValue};
    use alloc::vec;

    fn distinct() -> MultiViewEmbedding {
        MultiViewEmbedding::from_bases([vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap()
    }

    #[test]
    fn base_azimuths_reproduce_bases() {
        let m = distinct();
        for (k, &a) in BASE_AZIMUTHS.iter().enumerate() {
            assert_eq!(m.interpolate(a), m.bases()[k]);
        }
        assert_eq!(m.interpolate(-180.0), m.bases()[3]);
    }

    #[test]
    fn midpoints() {
        let m = distinct();
        assert_eq!(m.interpolate(45.0), vec![0.0, 0.0]);
        // -135 lies halfway between -180 (base 3) and -90 (base 1).
        assert_eq!(m.interpolate(-135.0), vec![0.0, 0.0]);
        let m = MultiViewEmbedding::from_bases([vec![2.0], vec![4.0], vec![6.0], vec![8.0]]).unwrap();
        assert_eq!(m.interpolate(45.0), vec![0.5 * 2.0 + 0.5 * 6.0]);
        assert_eq!(m.interpolate(-135.0), vec![0.5 * 4.0 + 0.5 * 8.0]);
    }

    #[test]
    fn swapped_convention_flips_weights() {
        let mut m = distinct();
        m.convention = Convention::Swapped;
        assert_eq!(m.interpolate(0.0), m.bases()[2]);
        let v = m.interpolate(30.0);
        assert!((v[0] + 1.0 / 3.0).abs() < 1e-15 && v[1] == 0.0);
    }

    #[test]
    fn weights_are_affine() {
        let m = distinct();
        for k in 0..720 {
            let [(_, a), (_, b)] = m.weights(-180.0 + k as f64 * 0.5);
            assert!(a >= 0.0 && b >= 0.0);
            assert!((a + b - 1.0).abs() < 1e-15);
        }
    }

    fn tiny_setup() -> (Denoiser, Vec<Vec<f64>>, NoiseSchedule) {
        let den = Denoiser::new(4, 2, 5);
        let imgs: Vec<Vec<f64>> = (0..8).map(|k| (0..4).map(|i| ((i + k) % 3) as f64 * 0.3).collect()).collect();
        (den, imgs, NoiseSchedule::default())
    }

    fn views(imgs: &[Vec<f64>]) -> Vec<ViewImage<'_>> {
        imgs.iter().enumerate().map(|(k, i)| ViewImage { azimuth: 45.0 * k as f64, image: i }).collect()
    }

    #[test]
    fn zero_noise_override_reduces_to_prediction_norm() {
        let (den, imgs, _) = tiny_setup();
        let v = views(&imgs);
        let e = SingleEmbedding::new(vec![0.3, -0.7]);
        let draws = vec![NoiseDraw { item: 2, t: 7, eps: vec![0.0; 4] }];
        let loss = recon_loss_with(&den, &e, &v, &draws, |_| Ok((1.0, 0.0))).unwrap();
        let p = den.predict(&imgs[2], &e.value, 7).unwrap();
        assert_eq!(loss, p.iter().map(|x| x * x).sum::<f64>() / 4.0);
    }

    #[test]
    fn single_view_matches_equal_bases() {
        let (den, imgs, s) = tiny_setup();
        let v = &views(&imgs)[..1];
        let e = SingleEmbedding::new(vec![0.2, 0.9]);
        let draws = NoiseDraw::fixed_set(3, 10, 1, 4, &s);
        let a = single_embedding_loss(&e, &den, v, &s, &draws).unwrap();
        let b = recon_loss(&den, &e.as_multiview(), v, &s, &draws).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recon_gradient_matches_finite_differences() {
        let (den, imgs, s) = tiny_setup();
        let v = views(&imgs);
        let mve = distinct();
        let draws = NoiseDraw::fixed_set(9, 6, v.len(), 4, &s);
        let mut tape = Tape::new();
        let bases: Vec<Var> = mve.bases().iter().map(|b| tape.param(&TensorValue::from_vec(b.clone()))).collect();
        let bases: [Var; 4] = bases.try_into().unwrap();
        let loss = record_recon_loss(&mut tape, &den, &v, &s, &draws, |t, az| mve.record_interpolate(t, &bases, az))
            .unwrap();
        assert!((tape.scalar_value(loss).unwrap() - recon_loss(&den, &mve, &v, &s, &draws).unwrap()).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        for k in 0..4 {
            let fd = finite_diff_grad(
                |t| {
                    let mut m = mve.clone();
                    m.bases[k] = t.data().to_vec();
                    recon_loss(&den, &m, &v, &s, &draws)
                },
                &TensorValue::from_vec(mve.bases()[k].clone()),
                1e-5,
            )
            .unwrap();
            let got = g.get(bases[k]).unwrap();
            for (a, b) in got.iter().zip(fd.data()) {
                assert!((a - b).abs() <= 1e-5 + 1e-3 * b.abs());
            }
        }
    }

    #[test]
    fn zero_steps_keeps_initialisation_and_denoiser() {
        let (den, imgs, s) = tiny_setup();
        let v = views(&imgs);
        let e_t = vec![0.5, 0.5];
        let mut m = MultiViewEmbedding::cloned_from(&e_t);
        let before = den.clone();
        optimize_embeddings(&mut m, &den, &v, &s, &EmbeddingOptConfig::new(0, 1)).unwrap();
        for a in [-180.0, -45.0, 0.0, 10.0, 170.0] {
            assert_eq!(m.interpolate(a), e_t);
        }
        optimize_embeddings(&mut m, &den, &v, &s, &EmbeddingOptConfig::new(5, 1)).unwrap();
        assert_ne!(m.interpolate(0.0), e_t);
        assert_eq!(den, before);
    }

    #[test]
    fn cosine_annealing_endpoints() {
        let c = EmbeddingOptConfig { steps: 11, lr: 0.1, lr_final: 0.001, batch: 4, seed: 0 };
        assert_eq!(c.lr_at(0), 0.1);
        assert!((c.lr_at(10) - 0.001).abs() < 1e-15);
        assert!((c.lr_at(5) - 0.0505).abs() < 1e-12);
        let flat = EmbeddingOptConfig::new(7, 0);
        assert!((0..7).all(|s| flat.lr_at(s) == flat.lr));
    }
}
