//! Closed-form posterior-mean denoiser for Gaussian-mixture data.
//!
//! For data `x0 ~ sum_k w_k N(mu_k, s_k^2 I)` and `x_t = a x0 + b eps` with
//! `a = sqrt(abar_t)`, `b^2 = 1 - abar_t`:
//!
//! * `x_t | k ~ N(a mu_k, (a^2 s_k^2 + b^2) I)`,
//! * `E[x0 | x_t, k] = mu_k + a s_k^2 / (a^2 s_k^2 + b^2) (x_t - a mu_k)`,
//! * `eps_hat = (x_t - a E[x0 | x_t]) / b`.
//!
//! Responsibilities are normalised in the log domain; with thousands of
//! dimensions the raw densities underflow immediately.

use crate::denoiser::{check_condition, Condition, Denoiser};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, ValueRange};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: ImageGrid,
    pub std: f64,
    /// Token this component stands for, when the mixture is used as a
    /// conditional model.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureModel {
    components: Vec<GmmComponent>,
}

impl GaussianMixtureModel {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::InvalidParameter("mixture needs a component".into()))?;
        let shape = first.mean.shape();
        if components.iter().any(|c| c.mean.shape() != shape) {
            return Err(Error::shape("GaussianMixtureModel::new", "component means differ in shape"));
        }
        if components.iter().any(|c| !(c.weight > 0.0) || !(c.std > 0.0)) {
            return Err(Error::InvalidParameter("weights and stds must be > 0".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        let components = components.into_iter().map(|c| GmmComponent { weight: c.weight / total, ..c }).collect();
        Ok(GaussianMixtureModel { components })
    }

    /// Standard normal data on an `h x w x c` grid.
    pub fn standard_normal(height: usize, width: usize, channels: usize) -> Self {
        Self::new(vec![GmmComponent { weight: 1.0, mean: ImageGrid::zeros(height, width, channels), std: 1.0, label: None }])
            .expect("valid component")
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.components[0].mean.shape()
    }

    /// Components whose label is among `tokens`, reweighted; all of them
    /// when no label matches or no tokens are given.
    fn restricted(&self, tokens: &[usize]) -> Vec<&GmmComponent> {
        let picked: Vec<&GmmComponent> = self
            .components
            .iter()
            .filter(|c| c.label.is_some_and(|l| tokens.contains(&l)))
            .collect();
        if picked.is_empty() {
            self.components.iter().collect()
        } else {
            picked
        }
    }
}

fn posterior_eps(x_t: &ImageGrid, alpha_bar: f64, components: &[&GmmComponent]) -> Result<ImageGrid> {
    if alpha_bar >= 1.0 {
        return Err(Error::InvalidParameter("analytic eps undefined at alpha_bar = 1 (b = 0)".into()));
    }
    let a = alpha_bar.sqrt();
    let b2 = 1.0 - alpha_bar;
    let b = b2.sqrt();
    let dim = x_t.data().len() as f64;
    let logs: Vec<f64> = components
        .iter()
        .map(|c| {
            let var = a * a * c.std * c.std + b2;
            let sq: f64 = x_t.data().iter().zip(c.mean.data()).map(|(x, m)| (x - a * m).powi(2)).sum();
            c.weight.ln() - 0.5 * dim * var.ln() - sq / (2.0 * var)
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();

    let mut expected = vec![0.0; x_t.data().len()];
    for (c, u) in components.iter().zip(&unnorm) {
        let r = u / z;
        if r == 0.0 {
            continue;
        }
        let gain = a * c.std * c.std / (a * a * c.std * c.std + b2);
        for ((e, x), m) in expected.iter_mut().zip(x_t.data()).zip(c.mean.data()) {
            *e += r * (m + gain * (x - a * m));
        }
    }
    let (h, w, ch) = x_t.shape();
    let eps = x_t.data().iter().zip(&expected).map(|(x, e)| (x - a * e) / b).collect();
    Ok(ImageGrid::from_vec(h, w, ch, eps)?.with_range(ValueRange::Diffusion))
}

/// Exact posterior-mean noise estimate for mixture data.
pub fn analytic_eps(x_t: &ImageGrid, t: usize, gmm: &GaussianMixtureModel, schedule: &NoiseSchedule) -> Result<ImageGrid> {
    if t == 0 || t > schedule.total_steps() {
        return Err(Error::InvalidParameter(format!("timestep {t} outside [1, {}]", schedule.total_steps())));
    }
    if x_t.shape() != gmm.shape() {
        return Err(Error::shape("analytic_eps", format!("{:?} vs mixture {:?}", x_t.shape(), gmm.shape())));
    }
    let all: Vec<&GmmComponent> = gmm.components.iter().collect();
    posterior_eps(x_t, schedule.alpha_bar(t), &all)?.ensure_finite("analytic_eps", t)
}

/// [`analytic_eps`] behind the [`Denoiser`] contract. Token conditions
/// restrict the mixture to the components labelled with those tokens.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    gmm: GaussianMixtureModel,
    schedule: NoiseSchedule,
    vocab_size: usize,
}

impl AnalyticDenoiser {
    pub fn new(gmm: GaussianMixtureModel, schedule: NoiseSchedule, vocab_size: usize) -> Self {
        AnalyticDenoiser { gmm, schedule, vocab_size }
    }

    pub fn gmm(&self) -> &GaussianMixtureModel {
        &self.gmm
    }
}

impl Denoiser for AnalyticDenoiser {
    fn eps_predict(&self, x_t: &ImageGrid, t: usize, cond: &Condition) -> Result<ImageGrid> {
        check_condition(self, x_t, cond)?;
        if cond.token_ids().is_empty() {
            return analytic_eps(x_t, t, &self.gmm, &self.schedule);
        }
        if t == 0 || t > self.schedule.total_steps() {
            return Err(Error::InvalidParameter(format!("timestep {t} out of range")));
        }
        if x_t.shape() != self.gmm.shape() {
            return Err(Error::shape("analytic_eps", "sample and mixture shapes differ"));
        }
        let comps = self.gmm.restricted(&cond.token_ids());
        posterior_eps(x_t, self.schedule.alpha_bar(t), &comps)?.ensure_finite("analytic_eps", t)
    }

    fn accepts_control(&self) -> bool {
        false
    }

    fn vocabulary_size(&self) -> usize {
        self.vocab_size
    }
}
