use std::f64::consts::PI;

use crate::error::{ParError, Result};

/// Discrete diffusion schedule with cumulative products `ᾱ_t`, `t ∈ [0, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// Cosine schedule `ᾱ(t) = f(t)/f(0)`, `f(t) = cos²(π/2·(t/T + s)/(1 + s))`,
    /// with per-step betas capped at 0.999.
    pub fn cosine(steps: usize, s: f64) -> Result<Self> {
        if steps < 2 || !(s > 0.0) {
            return Err(ParError::contract(format!("cosine schedule needs T >= 2 and s > 0, got T={steps} s={s}")));
        }
        let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * PI / 2.0).cos().powi(2);
        let betas: Vec<f64> = (0..steps).map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).min(MAX_BETA)).collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(ParError::contract("betas must lie in (0, 1)"));
        }
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// `steps` timesteps evenly strided over `[0, T−1]`, ascending and
    /// distinct; `steps = T` gives every timestep.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(ParError::contract(format!("denoise steps {steps} outside 1..={t}")));
        }
        if steps == 1 {
            return Ok(vec![t - 1]);
        }
        Ok((0..steps)
            .map(|i| ((i as f64) * (t - 1) as f64 / (steps - 1) as f64).round() as usize)
            .collect())
    }
}
