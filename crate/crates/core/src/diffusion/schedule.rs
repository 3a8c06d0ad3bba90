//! Linear beta schedule, forward noising and deterministic DDIM steps.

use serde::{Deserialize, Serialize};

use super::LatentGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alphas_cumprod[t]` for `t` in `0..=T`; index 0 is 1.
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let n = cfg.steps;
        if n == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {} .. {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let mut alphas_cumprod = Vec::with_capacity(n + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of `1 - beta` up to `t`; `alpha_cumprod(0) = 1`.
    pub fn alpha_cumprod(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Validation(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `sqrt(acc_t) x0 + sqrt(1 - acc_t) eps`.
    pub fn add_noise(&self, x0: &LatentGrid, t: usize, eps: &LatentGrid) -> Result<LatentGrid> {
        self.check_t(t)?;
        x0.check_same_shape(eps)?;
        let a = self.alpha_cumprod(t);
        Ok(x0.map_data(|d| d * a.sqrt() + eps.data() * (1.0 - a).sqrt()))
    }

    /// The clean sample implied by `x_t` and a noise prediction.
    pub fn predict_x0(&self, x_t: &LatentGrid, eps: &LatentGrid, t: usize) -> Result<LatentGrid> {
        self.check_t(t)?;
        x_t.check_same_shape(eps)?;
        let a = self.alpha_cumprod(t);
        Ok(x_t.map_data(|d| (d - eps.data() * (1.0 - a).sqrt()) / a.sqrt()))
    }

    /// One deterministic (eta = 0) DDIM update from `t` to `t_prev < t`.
    ///
    /// The predicted clean latent is clipped to the codec range `[-1, 1]` and
    /// the noise estimate is re-derived from the clipped value.
    pub fn ddim_step(
        &self,
        x_t: &LatentGrid,
        eps: &LatentGrid,
        t: usize,
        t_prev: usize,
    ) -> Result<LatentGrid> {
        if t_prev >= t {
            return Err(Error::Validation(format!(
                "DDIM step must go backwards, got {t} -> {t_prev}"
            )));
        }
        let x0 = self.predict_x0(x_t, eps, t)?.map_data(|d| d.mapv(|v| v.clamp(-1.0, 1.0)));
        let a = self.alpha_cumprod(t);
        let eps = x_t.map_data(|d| (d - x0.data() * a.sqrt()) / (1.0 - a).sqrt());
        let ap = self.alpha_cumprod(t_prev);
        Ok(x0.map_data(|d| d * ap.sqrt() + eps.data() * (1.0 - ap).sqrt()))
    }

    /// `steps` timesteps `ceil(i T / steps)`, largest first.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.steps();
        if steps == 0 || steps > n {
            return Err(Error::Validation(format!(
                "sampling steps must be in 1..={n}, got {steps}"
            )));
        }
        let mut ts: Vec<usize> = (1..=steps).map(|i| (i * n).div_ceil(steps)).collect();
        ts.reverse();
        Ok(ts)
    }
}
