use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Linear-beta DDPM schedule over steps `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(100, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2 && 0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0);
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::argument("timestep", format!("{t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((libm::sqrt(ab), libm::sqrt(1.0 - ab)))
    }

    /// `x_t = sqrt(alpha_bar_t) x + sqrt(1 - alpha_bar_t) eps`.
    pub fn add_noise(&self, x: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if x.len() != eps.len() {
            return Err(Error::shape("add_noise", format!("{} vs {}", x.len(), eps.len())));
        }
        let (a, b) = self.coefficients(t)?;
        Ok(mix(x, eps, a, b))
    }
}

pub(crate) fn mix(x: &[f64], eps: &[f64], a: f64, b: f64) -> Vec<f64> {
    x.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}
