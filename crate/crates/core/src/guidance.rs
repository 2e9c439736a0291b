//! Embedding fusion, classifier-free guidance and the phase-dependent
//! guidance direction with perpendicular target and detail components.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{vecops, Tape, Var};

/// Norms below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Fusion rates outside this range are accepted but warned about.
pub const RECOMMENDED_FUSION: (f64, f64) = (0.35, 0.85);

/// `r * e_t + (1 - r) * e_o`.
pub fn fuse(e_t: &[f64], e_o: &[f64], r: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::argument("fusion rate", alloc::format!("{r} is outside [0, 1]")));
    }
    if e_t.len() != e_o.len() {
        return Err(Error::shape("fuse", "embedding lengths differ"));
    }
    Ok(e_t.iter().zip(e_o).map(|(t, o)| r * t + (1.0 - r) * o).collect())
}

/// Guided prediction and its raw conditional direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Cfg {
    pub guided: Vec<f64>,
    pub direction: Vec<f64>,
}

/// `eps_unc + w * (eps_cond - eps_unc)`.
pub fn cfg(eps_unc: &[f64], eps_cond: &[f64], w: f64) -> Result<Cfg> {
    if eps_unc.len() != eps_cond.len() {
        return Err(Error::shape("cfg", "prediction lengths differ"));
    }
    let direction = vecops::sub(eps_cond, eps_unc);
    let guided = vecops::axpy(eps_unc, w, &direction);
    Ok(Cfg { guided, direction })
}

/// Component of `a` perpendicular to `b`.
pub fn perp_extract(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape("perp_extract", "vector lengths differ"));
    }
    let bb = vecops::dot(b, b);
    if libm::sqrt(bb) < DEGENERATE_NORM {
        return Err(Error::DegenerateGuidance);
    }
    Ok(vecops::axpy(a, -vecops::dot(a, b) / bb, b))
}

/// `scale * |eps_f| / |perp|`, zero when the perpendicular part vanishes.
pub fn lambda_weight(eps_f: &[f64], perp: &[f64], scale: f64) -> f64 {
    let p = vecops::norm(perp);
    if p < DEGENERATE_NORM {
        0.0
    } else {
        scale * vecops::norm(eps_f) / p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    TargetEnhancement,
    Fused,
    DetailEnhancement,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::TargetEnhancement => 1,
            Phase::Fused => 2,
            Phase::DetailEnhancement => 3,
        }
    }
}

/// Step-indexed phase boundaries and guidance weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpsSchedule {
    pub total_steps: usize,
    /// Steps before this use target enhancement.
    pub phase1_end: usize,
    /// Steps from this on use detail enhancement.
    pub phase3_start: usize,
    pub lambda_t_scale: f64,
    pub lambda_d_scale: f64,
    pub guidance_scale: f64,
}

impl SpsSchedule {
    /// `phase1_steps` of target enhancement, `phase3_steps` of detail
    /// enhancement at the end, fused guidance in between.
    pub fn new(total_steps: usize, phase1_steps: usize, phase3_steps: usize) -> Result<Self> {
        if phase1_steps + phase3_steps > total_steps {
            return Err(Error::argument(
                "phase steps",
                alloc::format!("{phase1_steps} + {phase3_steps} exceed {total_steps} total"),
            ));
        }
        Ok(Self {
            total_steps,
            phase1_end: phase1_steps,
            phase3_start: total_steps - phase3_steps,
            lambda_t_scale: 0.4,
            lambda_d_scale: 0.2,
            guidance_scale: 10.0,
        })
    }

    pub fn geometry() -> Self {
        Self::new(300, 100, 100).expect("valid defaults")
    }

    /// Texture refinement skips target enhancement.
    pub fn texture() -> Self {
        Self::new(200, 0, 100).expect("valid defaults")
    }

    pub fn phase(&self, step: usize) -> Phase {
        if step < self.phase1_end {
            Phase::TargetEnhancement
        } else if step >= self.phase3_start {
            Phase::DetailEnhancement
        } else {
            Phase::Fused
        }
    }
}

/// The four noise predictions taken at the same noisy image and timestep.
#[derive(Debug, Clone, Copy)]
pub struct Predictions<'a> {
    pub unconditional: &'a [f64],
    pub fused: &'a [f64],
    pub target: &'a [f64],
    pub original: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpsOutput {
    /// Final guided prediction `eps_unc + w * direction`.
    pub guided: Vec<f64>,
    pub direction: Vec<f64>,
    pub phase: Phase,
    /// The enhancement weight used this step, zero in the fused phase.
    pub lambda: f64,
}

/// Guidance direction for `step`.
///
/// In the enhancement phases the extra direction is projected off the fused
/// direction and added back with weight `scale * |eps_f| / |perp|`; if the
/// fused direction vanishes the plain fused direction is used.
pub fn sps_direction(pred: &Predictions<'_>, schedule: &SpsSchedule, step: usize) -> Result<SpsOutput> {
    let len = pred.unconditional.len();
    if [pred.fused, pred.target, pred.original].iter().any(|p| p.len() != len) {
        return Err(Error::shape("sps_direction", "prediction lengths differ"));
    }
    let eps_f = vecops::sub(pred.fused, pred.unconditional);
    let phase = schedule.phase(step);
    let (extra, scale) = match phase {
        Phase::TargetEnhancement => (pred.target, schedule.lambda_t_scale),
        Phase::DetailEnhancement => (pred.original, schedule.lambda_d_scale),
        Phase::Fused => (pred.fused, 0.0),
    };
    let (direction, lambda) = if scale == 0.0 {
        (eps_f, 0.0)
    } else {
        let raw = vecops::sub(extra, pred.unconditional);
        match perp_extract(&raw, &eps_f) {
            Ok(perp) => {
                let lambda = lambda_weight(&eps_f, &perp, scale);
                (vecops::axpy(&eps_f, lambda, &perp), lambda)
            }
            Err(Error::DegenerateGuidance) => (eps_f, 0.0),
            Err(e) => return Err(e),
        }
    };
    let guided = vecops::axpy(pred.unconditional, schedule.guidance_scale, &direction);
    Ok(SpsOutput { guided, direction, phase, lambda })
}

/// Score-distillation surrogate `<stopgrad(omega * (eps_hat - eps)), x>`:
/// its gradient with respect to anything upstream of `x` is the
/// distillation gradient pushed through the renderer.
pub fn sds_surrogate(tape: &mut Tape, x: Var, eps_hat: &[f64], eps: &[f64], omega: f64) -> Result<Var> {
    if eps_hat.len() != eps.len() {
        return Err(Error::shape("sds", "prediction and noise lengths differ"));
    }
    let w = eps_hat.iter().zip(eps).map(|(p, e)| omega * (p - e)).collect();
    tape.weighted_sum(x, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{RngStream, TensorValue};
    use alloc::vec;

    #[test]
    fn fuse_endpoints() {
        let t = [1.0, 2.0];
        let o = [-3.0, 5.0];
        assert_eq!(fuse(&t, &o, 1.0).unwrap(), t);
        assert_eq!(fuse(&t, &o, 0.0).unwrap(), o);
        assert!(fuse(&t, &o, 1.5).is_err());
        assert!(fuse(&t, &o, -0.1).is_err());
        assert!(fuse(&t, &o[..1], 0.5).is_err());
    }

    #[test]
    fn cfg_unit_scale_is_conditional() {
        let c = cfg(&[1.0, 1.0], &[3.0, -1.0], 1.0).unwrap();
        assert_eq!(c.guided, vec![3.0, -1.0]);
        assert_eq!(c.direction, vec![2.0, -2.0]);
    }

    #[test]
    fn perp_of_parallel_vanishes() {
        let p = perp_extract(&[2.0, 4.0], &[1.0, 2.0]).unwrap();
        assert!(vecops::norm(&p) < 1e-15);
        assert_eq!(perp_extract(&[1.0], &[0.0]), Err(Error::DegenerateGuidance));
    }

    #[test]
    fn phase_boundaries() {
        let s = SpsSchedule::geometry();
        assert_eq!(s.phase(0), Phase::TargetEnhancement);
        assert_eq!(s.phase(99), Phase::TargetEnhancement);
        assert_eq!(s.phase(100), Phase::Fused);
        assert_eq!(s.phase(199), Phase::Fused);
        assert_eq!(s.phase(200), Phase::DetailEnhancement);
        let t = SpsSchedule::texture();
        assert_eq!(t.phase(0), Phase::Fused);
        assert_eq!(t.phase(100), Phase::DetailEnhancement);
        assert!(SpsSchedule::new(10, 6, 5).is_err());
    }

    fn random_predictions(rng: &mut RngStream, d: usize) -> [Vec<f64>; 4] {
        core::array::from_fn(|_| rng.gaussian(&[d]).into_data())
    }

    #[test]
    fn enhancement_keeps_fused_component() {
        let mut rng = RngStream::new(4);
        let s = SpsSchedule::geometry();
        for _ in 0..50 {
            let [u, f, t, o] = random_predictions(&mut rng, 16);
            let p = Predictions { unconditional: &u, fused: &f, target: &t, original: &o };
            let eps_f = vecops::sub(&f, &u);
            for step in [0, 250] {
                let out = sps_direction(&p, &s, step).unwrap();
                let along = vecops::dot(&out.direction, &eps_f);
                assert!((along - vecops::dot(&eps_f, &eps_f)).abs() <= 1e-9 * vecops::dot(&eps_f, &eps_f));
                let expected = vecops::axpy(&u, 10.0, &out.direction);
                assert_eq!(out.guided, expected);
            }
            let mid = sps_direction(&p, &s, 150).unwrap();
            assert_eq!(mid.direction, eps_f);
            assert_eq!(mid.lambda, 0.0);
        }
    }

    #[test]
    fn degenerate_fused_direction_falls_back() {
        let u = [1.0, 2.0];
        let p = Predictions { unconditional: &u, fused: &u, target: &[5.0, 5.0], original: &[0.0, 0.0] };
        let out = sps_direction(&p, &SpsSchedule::geometry(), 0).unwrap();
        assert_eq!(out.direction, vec![0.0, 0.0]);
        assert_eq!(out.lambda, 0.0);
        assert_eq!(out.guided, u);
    }

    #[test]
    fn surrogate_gradient_is_weighted_residual() {
        let mut tape = Tape::new();
        let x = tape.param(&TensorValue::from_vec(vec![0.3, -0.2, 0.9]));
        let s = sds_surrogate(&mut tape, x, &[1.0, 0.0, 2.0], &[0.5, 0.5, 0.5], 2.0).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, -1.0, 3.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-10.0..10.0f64, n)
        }

        proptest! {
            #[test]
            fn perp_is_orthogonal(a in vecs(8), b in vecs(8)) {
                prop_assume!(vecops::norm(&b) > 1e-3);
                let p = perp_extract(&a, &b).unwrap();
                let scale = vecops::norm(&a) * vecops::norm(&b) + 1.0;
                prop_assert!(vecops::dot(&p, &b).abs() <= 1e-10 * scale);
            }

            #[test]
            fn fused_rate_is_affine(a in vecs(6), b in vecs(6), r in 0.0..=1.0f64) {
                let f = fuse(&a, &b, r).unwrap();
                for ((x, y), z) in a.iter().zip(&b).zip(&f) {
                    prop_assert!((z - (r * x + (1.0 - r) * y)).abs() < 1e-12);
                }
            }
        }
    }
}
