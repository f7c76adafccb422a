//! Noise schedules, forward noising and the DDPM/DDIM reverse updates.
//!
//! Timesteps are 1-based: `t = 1..=T` index the schedule, and `t = 0` is the
//! clean state with `alpha_bar(0) = 1`. A DDIM trajectory over a
//! [`StepPlan`] therefore always finishes with a step into `t = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, ValueRange};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end`, both ends
    /// included.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if total_steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (total_steps - 1) as f64;
            (0..total_steps).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidParameter(format!("beta[{}] = {b} outside (0, 1)", i + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            Err(Error::InvalidParameter(format!("timestep {t} outside [1, {}]", self.total_steps())))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// `sigma_t = 0`: DDIM as a deterministic map.
    #[default]
    Deterministic,
    /// `eta = 1`: the DDIM variance that matches DDPM's posterior.
    DdpmMatched,
}

/// A descending DDIM subsequence and the split between the two stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    timesteps: Vec<usize>,
    scaffold_steps: usize,
    sigma_mode: SigmaMode,
}

impl StepPlan {
    /// Evenly spaced subsequence of `1..=T` from `T` down to `1`, with the
    /// first `round(kappa_percent / 100 * num_steps)` entries given to the
    /// scaffolding stage.
    pub fn new(schedule: &NoiseSchedule, num_steps: usize, kappa_percent: f64) -> Result<Self> {
        let total = schedule.total_steps();
        if num_steps == 0 || num_steps > total {
            return Err(Error::InvalidParameter(format!("num_steps {num_steps} outside [1, {total}]")));
        }
        if !(0.0..=100.0).contains(&kappa_percent) {
            return Err(Error::InvalidParameter(format!("kappa {kappa_percent} outside [0, 100]")));
        }
        let timesteps: Vec<usize> = if num_steps == 1 {
            vec![total]
        } else {
            (0..num_steps).rev().map(|j| 1 + j * (total - 1) / (num_steps - 1)).collect()
        };
        let scaffold_steps = (kappa_percent / 100.0 * num_steps as f64).round() as usize;
        Self::from_parts(timesteps, scaffold_steps, SigmaMode::Deterministic)
    }

    pub fn from_parts(timesteps: Vec<usize>, scaffold_steps: usize, sigma_mode: SigmaMode) -> Result<Self> {
        if timesteps.is_empty() || timesteps.last() == Some(&0) {
            return Err(Error::InvalidParameter("plan timesteps must be non-empty and >= 1".into()));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidParameter("plan timesteps must be strictly decreasing".into()));
        }
        if scaffold_steps > timesteps.len() {
            return Err(Error::InvalidParameter(format!(
                "scaffold_steps {scaffold_steps} exceeds {} plan steps",
                timesteps.len()
            )));
        }
        Ok(StepPlan { timesteps, scaffold_steps, sigma_mode })
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.sigma_mode = mode;
        self
    }

    pub fn with_scaffold_steps(mut self, scaffold_steps: usize) -> Result<Self> {
        if scaffold_steps > self.timesteps.len() {
            return Err(Error::InvalidParameter("scaffold_steps exceeds plan length".into()));
        }
        self.scaffold_steps = scaffold_steps;
        Ok(self)
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn scaffold_steps(&self) -> usize {
        self.scaffold_steps
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    /// The highest-noise timestep, where sampling starts.
    pub fn start_timestep(&self) -> usize {
        self.timesteps[0]
    }

    /// Timestep of the latent handed from scaffolding to harmonization
    /// (`0` when scaffolding covers the whole plan).
    pub fn boundary_timestep(&self) -> usize {
        self.timesteps.get(self.scaffold_steps).copied().unwrap_or(0)
    }

    /// Every `(t, t_prev)` transition, ending with a step into `t = 0`.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    pub fn scaffold_transitions(&self) -> Vec<(usize, usize)> {
        self.transitions()[..self.scaffold_steps].to_vec()
    }

    pub fn harmonize_transitions(&self) -> Vec<(usize, usize)> {
        self.transitions()[self.scaffold_steps..].to_vec()
    }

    pub fn sigma(&self, schedule: &NoiseSchedule, t: usize, t_prev: usize) -> f64 {
        Self::sigma_for(self.sigma_mode, schedule, t, t_prev)
    }

    pub fn sigma_for(mode: SigmaMode, schedule: &NoiseSchedule, t: usize, t_prev: usize) -> f64 {
        match mode {
            SigmaMode::Deterministic => 0.0,
            SigmaMode::DdpmMatched => ddpm_matched_sigma(schedule.alpha_bar(t), schedule.alpha_bar(t_prev)),
        }
    }
}

/// `eta = 1` DDIM noise level between two cumulative alphas.
pub fn ddpm_matched_sigma(alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    (((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) * (1.0 - alpha_bar_t / alpha_bar_prev)).max(0.0).sqrt()
}

/// The per-element update rules, in `f64`.
pub mod scalar {
    pub fn q_sample(x0: f64, eps: f64, alpha_bar: f64) -> f64 {
        alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps
    }

    pub fn predict_x0(x_t: f64, eps_hat: f64, alpha_bar: f64) -> f64 {
        (x_t - (1.0 - alpha_bar).sqrt() * eps_hat) / alpha_bar.sqrt()
    }

    pub fn ddim(x_t: f64, eps_hat: f64, alpha_bar_t: f64, alpha_bar_prev: f64, sigma: f64, noise: f64) -> f64 {
        let x0 = predict_x0(x_t, eps_hat, alpha_bar_t);
        let dir = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt();
        alpha_bar_prev.sqrt() * x0 + dir * eps_hat + sigma * noise
    }

    pub fn ddpm(x_t: f64, eps_hat: f64, alpha: f64, beta: f64, alpha_bar: f64, sigma: f64, noise: f64) -> f64 {
        (x_t - beta / (1.0 - alpha_bar).sqrt() * eps_hat) / alpha.sqrt() + sigma * noise
    }

    pub fn cfg(eps_uncond: f64, eps_cond: f64, scale: f64) -> f64 {
        eps_uncond + scale * (eps_cond - eps_uncond)
    }
}

/// Forward noising straight from the clean image:
/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn q_sample(x0: &ImageGrid, t: usize, eps: &ImageGrid, schedule: &NoiseSchedule) -> Result<ImageGrid> {
    schedule.check_t(t)?;
    q_sample_at(x0, schedule.alpha_bar(t), eps, t)
}

/// `q_sample` that also accepts the clean boundary `t = 0`, where it returns
/// `x0` unchanged.
pub(crate) fn q_sample_to(x0: &ImageGrid, t: usize, eps: &ImageGrid, schedule: &NoiseSchedule) -> Result<ImageGrid> {
    if t == 0 {
        x0.check_same_shape(eps, "q_sample")?;
        return Ok(x0.clone());
    }
    q_sample(x0, t, eps, schedule)
}

fn q_sample_at(x0: &ImageGrid, alpha_bar: f64, eps: &ImageGrid, t: usize) -> Result<ImageGrid> {
    x0.zip_map(eps, "q_sample", |x, e| scalar::q_sample(x, e, alpha_bar))?
        .with_range(ValueRange::Diffusion)
        .ensure_finite("q_sample", t)
}

pub fn predict_x0(x_t: &ImageGrid, t: usize, eps_hat: &ImageGrid, schedule: &NoiseSchedule) -> Result<ImageGrid> {
    schedule.check_t(t)?;
    let alpha_bar = schedule.alpha_bar(t);
    x_t.zip_map(eps_hat, "predict_x0", |x, e| scalar::predict_x0(x, e, alpha_bar))?
        .with_range(ValueRange::Data)
        .ensure_finite("predict_x0", t)
}

/// One DDIM update from `t` to `t_prev` given a noise estimate.
///
/// With `sigma == 0` the update is a pure function of its inputs and the
/// stream is never touched.
pub fn ddim_step(
    x_t: &ImageGrid,
    t: usize,
    t_prev: usize,
    eps_hat: &ImageGrid,
    sigma: f64,
    rng: &RngStream,
    schedule: &NoiseSchedule,
) -> Result<ImageGrid> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidParameter(format!("ddim step needs t_prev < t, got {t_prev} -> {t}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    let abar_t = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t_prev);
    if sigma * sigma > (1.0 - abar_prev) * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::InvalidParameter(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar(t_prev) = {}",
            sigma * sigma,
            1.0 - abar_prev
        )));
    }
    x_t.check_same_shape(eps_hat, "ddim_step")?;
    let out = if sigma == 0.0 {
        x_t.zip_map(eps_hat, "ddim_step", |x, e| scalar::ddim(x, e, abar_t, abar_prev, 0.0, 0.0))?
    } else {
        let noise = rng.normal_like(x_t);
        let mut out = x_t.clone();
        for ((o, &e), &z) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(noise.data()) {
            *o = scalar::ddim(*o, e, abar_t, abar_prev, sigma, z);
        }
        out
    };
    out.with_range(ValueRange::Diffusion).ensure_finite("ddim_step", t)
}

/// One ancestral DDPM update from `t` to `t - 1` with `sigma_t^2 = beta_t`
/// (no noise on the final step into the clean state).
pub fn ddpm_step(
    x_t: &ImageGrid,
    t: usize,
    eps_hat: &ImageGrid,
    rng: &RngStream,
    schedule: &NoiseSchedule,
) -> Result<ImageGrid> {
    ddpm_step_with(x_t, t, eps_hat, Some(rng), schedule)
}

/// [`ddpm_step`] with an optional stream; `None` suppresses the noise term.
pub fn ddpm_step_with(
    x_t: &ImageGrid,
    t: usize,
    eps_hat: &ImageGrid,
    rng: Option<&RngStream>,
    schedule: &NoiseSchedule,
) -> Result<ImageGrid> {
    schedule.check_t(t)?;
    x_t.check_same_shape(eps_hat, "ddpm_step")?;
    let (alpha, beta, abar) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
    let sigma = if t == 1 { 0.0 } else { beta.sqrt() };
    let noise = match rng {
        Some(rng) if sigma > 0.0 => Some(rng.normal_like(x_t)),
        _ => None,
    };
    let mut out = x_t.clone();
    for (i, (o, &e)) in out.data_mut().iter_mut().zip(eps_hat.data()).enumerate() {
        let z = noise.as_ref().map_or(0.0, |n| n.data()[i]);
        let s = if noise.is_some() { sigma } else { 0.0 };
        *o = scalar::ddpm(*o, e, alpha, beta, abar, s, z);
    }
    out.with_range(ValueRange::Diffusion).ensure_finite("ddpm_step", t)
}

/// Classifier-free guidance: `eps_uncond + s * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &ImageGrid, eps_cond: &ImageGrid, scale: f64) -> Result<ImageGrid> {
    eps_uncond.zip_map(eps_cond, "cfg_combine", |u, c| scalar::cfg(u, c, scale))
}
