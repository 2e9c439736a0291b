use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{EditConfig, InitMode, Stage, StepRecord};
use crate::corpus::blur;
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{cfg, fuse, sds_surrogate, sps_direction, Predictions, SpsSchedule};
use crate::mve::MultiViewEmbedding;
use crate::numerics::{vecops, Adam, RngStream, Tape, Var};
use crate::scene::{record_color, record_depth, record_intensity, View, VoxelScene};

/// Auxiliary plain-guidance channel on depth renders.
#[derive(Debug, Clone, Copy)]
pub struct DepthGuidance<'a> {
    pub denoiser: &'a Denoiser,
    /// Optimised embedding of the original object's depth renders.
    pub original: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct GeometryGuidance<'a> {
    pub denoiser: &'a Denoiser,
    pub target: &'a [f64],
    pub original: &'a MultiViewEmbedding,
    pub depth: Option<DepthGuidance<'a>>,
}

#[derive(Debug, Clone, Copy)]
pub struct TextureGuidance<'a> {
    pub denoiser: &'a Denoiser,
    pub target: &'a [f64],
    pub original: &'a MultiViewEmbedding,
}

/// Starting scene of the geometry stage; colour is always the original's.
pub fn initial_scene(original: &VoxelScene, mode: InitMode) -> VoxelScene {
    match mode {
        InitMode::FromOriginal => original.clone(),
        InitMode::EllipsoidBlob => {
            let n = original.n();
            let c = (n as f64 - 1.0) / 2.0;
            let radii = [0.3 * n as f64, 0.4 * n as f64, 0.3 * n as f64];
            let mut occ = Vec::with_capacity(n * n * n);
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        let q: f64 = [x, y, z]
                            .iter()
                            .zip(&radii)
                            .map(|(&i, r)| {
                                let u = (i as f64 - c) / r;
                                u * u
                            })
                            .sum();
                        occ.push(if q <= 1.0 { 1.0 } else { 0.0 });
                    }
                }
            }
            let mut scene = original.clone();
            scene.density_mut().data_mut().copy_from_slice(&blur(&occ, n));
            scene
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    Density,
    Color,
}

struct Channel<'a> {
    denoiser: &'a Denoiser,
    target: &'a [f64],
    original: &'a MultiViewEmbedding,
}

fn timestep_bounds(schedule: &NoiseSchedule, (lo, hi): (f64, f64)) -> (i64, i64) {
    let t = schedule.steps() as f64;
    let a = libm::round(lo * t).max(1.0);
    let b = libm::round(hi * t).min(t).max(a);
    (a as i64, b as i64)
}

#[allow(clippy::too_many_arguments)]
fn distill(
    start: &VoxelScene,
    field: Field,
    main: Channel<'_>,
    depth: Option<DepthGuidance<'_>>,
    sps: &SpsSchedule,
    noise: &NoiseSchedule,
    config: &EditConfig,
    stage: Stage,
    lr: f64,
    log: &mut Vec<StepRecord>,
) -> Result<VoxelScene> {
    let mut scene = start.clone();
    let root = RngStream::new(config.seed).fork(match field {
        Field::Density => 0x6e0,
        Field::Color => 0x7e8,
    });
    let (mut view_rng, mut noise_rng, mut depth_rng) = (root.fork(1), root.fork(2), root.fork(3));
    let (t_lo, t_hi) = timestep_bounds(noise, config.t_range);
    let depth = depth.filter(|_| config.aux_guidance_weight > 0.0);
    let unc = vec![0.0; main.target.len()];
    let k = config.views_per_step as f64;
    let mut adam = Adam::new(lr);
    (adam.beta1, adam.beta2) = config.adam_betas;
    for step in 0..sps.total_steps {
        let mut tape = Tape::new();
        let param = match field {
            Field::Density => tape.param(scene.density()),
            Field::Color => tape.param(scene.color()),
        };
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let (mut loss, mut lambda) = (0.0, 0.0);
        let mut phase = 0;
        for _ in 0..config.views_per_step {
            let view = View::new(view_rng.uniform_range(-180.0, 180.0), config.image_size)?;
            let x = match field {
                Field::Density => record_intensity(&mut tape, param, &view)?,
                Field::Color => record_color(&mut tape, param, scene.density(), &view)?,
            };
            let t = noise_rng.uniform_int(t_lo, t_hi)? as usize;
            let eps = noise_rng.gaussian(&[main.denoiser.image_len()]).into_data();
            let x_t = noise.add_noise(tape.value(x)?, t, &eps)?;
            let e_o = main.original.interpolate(view.azimuth());
            let e_f = fuse(main.target, &e_o, config.fusion_rate)?;
            let p = main.denoiser.predict_many(&x_t, &[&unc, &e_f, main.target, &e_o], t)?;
            let preds = Predictions { unconditional: &p[0], fused: &p[1], target: &p[2], original: &p[3] };
            let out = sps_direction(&preds, sps, step)?;
            phase = out.phase.number();
            loss += vecops::dot(&vecops::sub(&out.guided, &eps), &vecops::sub(&out.guided, &eps)) / eps.len() as f64 / k;
            lambda += out.lambda / k;
            terms.push((sds_surrogate(&mut tape, x, &out.guided, &eps, config.omega.at(noise, t)?)?, 1.0 / k));

            if let Some(d) = depth {
                let xd = record_depth(&mut tape, param, &view)?;
                let td = depth_rng.uniform_int(t_lo, t_hi)? as usize;
                let eps_d = depth_rng.gaussian(&[d.denoiser.image_len()]).into_data();
                let xd_t = noise.add_noise(tape.value(xd)?, td, &eps_d)?;
                let e_fd = fuse(main.target, d.original, config.fusion_rate)?;
                let p = d.denoiser.predict_many(&xd_t, &[&unc, &e_fd], td)?;
                let guided = cfg(&p[0], &p[1], sps.guidance_scale)?.guided;
                let s = sds_surrogate(&mut tape, xd, &guided, &eps_d, config.omega.at(noise, td)?)?;
                terms.push((s, config.aux_guidance_weight / k));
            }
        }
        let total = tape.combine(&terms)?;
        let grads = tape.backward(total)?;
        let g = grads.get(param).ok_or_else(|| Error::Training { step, detail: "no gradient".into() })?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training { step, detail: format!("non-finite gradient in {}", stage.label()) });
        }
        let grad_norm = vecops::norm(g);
        let data = match field {
            Field::Density => scene.density_mut(),
            Field::Color => scene.color_mut(),
        };
        adam.step(&mut [data.data_mut()], &[g]);
        data.clamp_in_place(0.0, 1.0);
        log.push(StepRecord { step, stage, phase, loss, lambda, grad_norm });
    }
    Ok(scene)
}

/// Edits the density by guided score distillation on intensity renders,
/// plus plain guidance on depth renders weighted by the auxiliary weight.
/// Colour is carried over untouched.
pub fn run_geometry_stage(
    original: &VoxelScene,
    guide: &GeometryGuidance<'_>,
    noise: &NoiseSchedule,
    config: &EditConfig,
    log: &mut Vec<StepRecord>,
) -> Result<VoxelScene> {
    let sps = config.geometry_schedule()?;
    let start = initial_scene(original, config.init_mode);
    let main = Channel { denoiser: guide.denoiser, target: guide.target, original: guide.original };
    distill(&start, Field::Density, main, guide.depth, &sps, noise, config, Stage::Geometry, config.geometry_lr, log)
}

/// Edits colour only; the density is frozen and there is no
/// target-enhancement phase.
pub fn run_texture_stage(
    scene: &VoxelScene,
    guide: &TextureGuidance<'_>,
    noise: &NoiseSchedule,
    config: &EditConfig,
    log: &mut Vec<StepRecord>,
) -> Result<VoxelScene> {
    let sps = config.texture_schedule()?;
    let main = Channel { denoiser: guide.denoiser, target: guide.target, original: guide.original };
    distill(scene, Field::Color, main, None, &sps, noise, config, Stage::Texture, config.texture_lr, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::EditTask;

    const N: usize = 4;
    const DIM: usize = 8;

    struct Models {
        intensity: Denoiser,
        depth: Denoiser,
        color: Denoiser,
        target: Vec<f64>,
        mve: MultiViewEmbedding,
        depth_e: Vec<f64>,
    }

    fn models() -> Models {
        let mut rng = RngStream::new(11);
        let mut v = || rng.gaussian(&[DIM]).into_data();
        let (target, depth_e) = (v(), v());
        let mve = MultiViewEmbedding::from_bases([v(), v(), v(), v()]).unwrap();
        Models {
            intensity: Denoiser::new(N * N, DIM, 1),
            depth: Denoiser::new(N * N, DIM, 2),
            color: Denoiser::new(N * N * 3, DIM, 3),
            target,
            mve,
            depth_e,
        }
    }

    fn config() -> EditConfig {
        EditConfig {
            grid_size: N,
            image_size: N,
            geometry_steps: 6,
            phase1_steps: 2,
            phase3_steps: 2,
            texture_steps: 4,
            seed: 5,
            ..EditConfig::default()
        }
    }

    fn original() -> VoxelScene {
        EditTask::cube_to_sphere(N).original_scene(N)
    }

    fn geometry(m: &Models, config: &EditConfig, depth: bool, log: &mut Vec<StepRecord>) -> VoxelScene {
        let guide = GeometryGuidance {
            denoiser: &m.intensity,
            target: &m.target,
            original: &m.mve,
            depth: depth.then_some(DepthGuidance { denoiser: &m.depth, original: &m.depth_e }),
        };
        run_geometry_stage(&original(), &guide, &NoiseSchedule::default(), config, log).unwrap()
    }

    fn texture(m: &Models, scene: &VoxelScene, config: &EditConfig, log: &mut Vec<StepRecord>) -> VoxelScene {
        let guide = TextureGuidance { denoiser: &m.color, target: &m.target, original: &m.mve };
        run_texture_stage(scene, &guide, &NoiseSchedule::default(), config, log).unwrap()
    }

    #[test]
    fn zero_aux_weight_matches_no_depth_guidance() {
        let m = models();
        let c = EditConfig { aux_guidance_weight: 0.0, ..config() };
        let a = geometry(&m, &c, true, &mut Vec::new());
        let b = geometry(&m, &c, false, &mut Vec::new());
        assert_eq!(a, b);
        let with_aux = geometry(&m, &config(), true, &mut Vec::new());
        assert_ne!(a, with_aux);
    }

    #[test]
    fn geometry_is_deterministic_and_logs_each_step() {
        let m = models();
        let (mut la, mut lb) = (Vec::new(), Vec::new());
        let a = geometry(&m, &config(), true, &mut la);
        let b = geometry(&m, &config(), true, &mut lb);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a.color(), original().color());
        let phases: Vec<u8> = la.iter().map(|r| r.phase).collect();
        assert_eq!(phases, [1, 1, 2, 2, 3, 3]);
        assert!(la.iter().enumerate().all(|(i, r)| r.step == i && r.stage == Stage::Geometry));
        assert!(la.iter().filter(|r| r.phase == 2).all(|r| r.lambda == 0.0));
    }

    #[test]
    fn texture_stage_leaves_density_untouched() {
        let m = models();
        let mut log = Vec::new();
        let out = texture(&m, &original(), &config(), &mut log);
        assert!(out.density().data().iter().zip(original().density().data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_ne!(out.color(), original().color());
        let phases: Vec<u8> = log.iter().map(|r| r.phase).collect();
        assert_eq!(phases, [2, 2, 3, 3]);
    }

    #[test]
    fn zero_texture_steps_leave_color_unchanged() {
        let m = models();
        let mut log = Vec::new();
        let out = texture(&m, &original(), &EditConfig { texture_steps: 0, ..config() }, &mut log);
        assert_eq!(out, original());
        assert!(log.is_empty());
    }
}
