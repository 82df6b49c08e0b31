//! Variance-preserving noise schedule, forward diffusion and the
//! deterministic DDIM update.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, MivaError, Result};
use crate::tensor::{LatentVideo, Mat};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_DDIM_STEPS: usize = 50;

/// `(alpha_t, sigma_t)` over `T` steps with `alpha^2 + sigma^2 = 1`.
///
/// Step 0 is the clean signal (`alpha = 1`, `sigma = 0`). The DDIM
/// sub-schedule is stored ascending; sampling walks it backwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    ddim_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear-beta DDPM schedule mapped to `(alpha, sigma)`.
    pub fn linear(timesteps: usize, ddim_count: usize) -> Result<Self> {
        Self::linear_with_betas(timesteps, ddim_count, 1e-4, 0.02)
    }

    pub fn linear_with_betas(timesteps: usize, ddim_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(MivaError::InvalidArgument("need at least 2 timesteps".into()));
        }
        let mut alpha = Vec::with_capacity(timesteps);
        let mut sigma = Vec::with_capacity(timesteps);
        let mut alpha_bar = 1.0f64;
        for t in 0..timesteps {
            if t > 0 {
                let frac = (t - 1) as f64 / (timesteps - 2).max(1) as f64;
                let beta = beta_start + frac * (beta_end - beta_start);
                alpha_bar *= 1.0 - beta;
            }
            alpha.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        let ddim_steps = uniform_steps(timesteps, ddim_count)?;
        Ok(Self {
            alpha,
            sigma,
            ddim_steps,
        })
    }

    /// Schedule from explicit `alpha` values; `sigma = sqrt(1 - alpha^2)`.
    pub fn from_alphas(alpha: Vec<f64>, ddim_steps: Vec<usize>) -> Result<Self> {
        if alpha.iter().any(|a| !(*a >= 0.0 && *a <= 1.0)) {
            return Err(MivaError::InvalidArgument("alpha must lie in [0, 1]".into()));
        }
        let sigma = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        let s = Self {
            alpha,
            sigma,
            ddim_steps,
        };
        s.validate_steps()?;
        Ok(s)
    }

    fn validate_steps(&self) -> Result<()> {
        if self.ddim_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MivaError::InvalidArgument(
                "DDIM steps must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = self.ddim_steps.last() {
            if last >= self.alpha.len() {
                return Err(MivaError::StepOutOfRange {
                    t: last,
                    total: self.alpha.len(),
                });
            }
        }
        Ok(())
    }

    pub fn timesteps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alpha.get(t).copied().ok_or(MivaError::StepOutOfRange {
            t,
            total: self.alpha.len(),
        })
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.sigma.get(t).copied().ok_or(MivaError::StepOutOfRange {
            t,
            total: self.sigma.len(),
        })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn ddim_steps(&self) -> &[usize] {
        &self.ddim_steps
    }

    /// Number of denoising iterations in one sampling run.
    pub fn sampling_len(&self) -> usize {
        self.ddim_steps.len().saturating_sub(1)
    }

    /// `(t, t_prev)` pairs in sampling order; index `k` of this list is the
    /// DDIM index.
    pub fn sampling_pairs(&self) -> Vec<(usize, usize)> {
        self.ddim_steps.windows(2).rev().map(|w| (w[1], w[0])).collect()
    }

    pub fn terminal_step(&self) -> usize {
        *self.ddim_steps.last().unwrap_or(&(self.alpha.len() - 1))
    }

    /// Worst deviation from `alpha^2 + sigma^2 = 1`.
    pub fn max_variance_defect(&self) -> f64 {
        self.alpha
            .iter()
            .zip(&self.sigma)
            .map(|(a, s)| (a * a + s * s - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `count + 1` boundaries spread evenly over `[0, T-1]`, giving `count`
/// sampling iterations that end at the clean step 0.
pub fn uniform_steps(timesteps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count >= timesteps {
        return Err(MivaError::InvalidArgument(format!(
            "DDIM step count {count} must be in [1, {})",
            timesteps
        )));
    }
    let span = (timesteps - 1) as f64;
    Ok((0..=count)
        .map(|k| (k as f64 * span / count as f64).round() as usize)
        .collect())
}

pub(crate) fn forward_diffuse_array(
    x0: &Array4<f64>,
    t: usize,
    eps: &Array4<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    if x0.dim() != eps.dim() {
        return Err(dim_err(
            "forward_diffuse",
            format!("x0 {:?} vs eps {:?}", x0.dim(), eps.dim()),
        ));
    }
    let (a, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
    Ok(x0 * a + eps * s)
}

/// `alpha_t x0 + sigma_t eps`.
pub fn forward_diffuse(x0: &LatentVideo, t: usize, eps: &Array4<f64>, schedule: &NoiseSchedule) -> Result<LatentVideo> {
    LatentVideo::new(forward_diffuse_array(x0.data(), t, eps, schedule)?)
}

/// Clean-signal estimate `(x_t - sigma_t eps_hat) / alpha_t`.
pub fn predict_x0(x_t: &Array4<f64>, t: usize, eps_hat: &Array4<f64>, schedule: &NoiseSchedule) -> Result<Array4<f64>> {
    if x_t.dim() != eps_hat.dim() {
        return Err(dim_err(
            "predict_x0",
            format!("x_t {:?} vs eps_hat {:?}", x_t.dim(), eps_hat.dim()),
        ));
    }
    let a = schedule.alpha(t)?;
    if a == 0.0 {
        return Err(MivaError::SingularStep(t));
    }
    let s = schedule.sigma(t)?;
    Ok((x_t - &(eps_hat * s)) / a)
}

pub(crate) fn ddim_step_array(
    x_t: &Array4<f64>,
    t: usize,
    t_prev: usize,
    eps_hat: &Array4<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    if t <= t_prev {
        return Err(MivaError::InvalidArgument(format!(
            "DDIM step requires t > t_prev, got {t} -> {t_prev}"
        )));
    }
    let x0 = predict_x0(x_t, t, eps_hat, schedule)?;
    let (a, s) = (schedule.alpha(t_prev)?, schedule.sigma(t_prev)?);
    Ok(x0 * a + eps_hat * s)
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &LatentVideo,
    t: usize,
    t_prev: usize,
    eps_hat: &Array4<f64>,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo> {
    LatentVideo::new(ddim_step_array(x_t.data(), t, t_prev, eps_hat, schedule)?)
}

/// Sinusoidal encoding of a diffusion step as a `1 x dim` row.
pub fn timestep_features(t: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros((1, dim));
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[[0, k]] = angle.sin();
        out[[0, half + k]] = angle.cos();
    }
    out
}
