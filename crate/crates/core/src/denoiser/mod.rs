//! The noise-prediction contract and its implementations.

mod analytic;
pub mod toy;
pub use toy::{overfit_single_image, train_toy_denoiser, FitOptions, ToyArchitecture, ToyDenoiser, TrainingLog};

pub use analytic::{analytic_eps, AnalyticDenoiser, GaussianMixtureModel, GmmComponent};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};

/// What a segment asks the denoiser for: a multi-hot token vector (empty
/// means unconditional) and an optional `{0,1}` control map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    tokens: Vec<f32>,
    control: Option<Mask>,
}

impl Condition {
    /// The null condition used for the unguided branch.
    pub fn unconditional() -> Self {
        Condition::default()
    }

    pub fn from_tokens(vocab_size: usize, ids: &[usize]) -> Result<Self> {
        let mut tokens = vec![0.0; vocab_size];
        for &id in ids {
            *tokens
                .get_mut(id)
                .ok_or_else(|| Error::InvalidParameter(format!("token {id} outside vocabulary of {vocab_size}")))? = 1.0;
        }
        Ok(Condition { tokens, control: None })
    }

    /// Union of several token sets; control maps are dropped.
    pub fn union<'a>(vocab_size: usize, conds: impl IntoIterator<Item = &'a Condition>) -> Self {
        let mut tokens = vec![0.0; vocab_size];
        for c in conds {
            for (t, &v) in tokens.iter_mut().zip(&c.tokens) {
                if v > 0.0 {
                    *t = 1.0;
                }
            }
        }
        Condition { tokens, control: None }
    }

    pub fn with_control(mut self, control: Mask) -> Self {
        self.control = Some(control);
        self
    }

    pub fn without_control(mut self) -> Self {
        self.control = None;
        self
    }

    pub fn multihot(&self) -> &[f32] {
        &self.tokens
    }

    pub fn control(&self) -> Option<&Mask> {
        self.control.as_ref()
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect()
    }

    pub fn has_tokens(&self) -> bool {
        self.tokens.iter().any(|&v| v > 0.0)
    }

    pub fn is_unconditional(&self) -> bool {
        !self.has_tokens() && self.control.is_none()
    }
}

/// A pure noise predictor `eps(x_t, t, condition)`.
pub trait Denoiser: Send + Sync {
    fn eps_predict(&self, x_t: &ImageGrid, t: usize, cond: &Condition) -> Result<ImageGrid>;

    fn accepts_control(&self) -> bool;

    fn vocabulary_size(&self) -> usize;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn eps_predict(&self, x_t: &ImageGrid, t: usize, cond: &Condition) -> Result<ImageGrid> {
        (**self).eps_predict(x_t, t, cond)
    }

    fn accepts_control(&self) -> bool {
        (**self).accepts_control()
    }

    fn vocabulary_size(&self) -> usize {
        (**self).vocabulary_size()
    }
}

/// Checks a condition against a denoiser's declared support.
pub fn check_condition(denoiser: &dyn Denoiser, x_t: &ImageGrid, cond: &Condition) -> Result<()> {
    let v = denoiser.vocabulary_size();
    if !cond.tokens.is_empty() && cond.tokens.len() != v {
        return Err(Error::InvalidParameter(format!(
            "condition has {} token slots, denoiser vocabulary has {v}",
            cond.tokens.len()
        )));
    }
    if let Some(c) = &cond.control {
        if !denoiser.accepts_control() {
            return Err(Error::Capability("denoiser does not accept control maps".into()));
        }
        c.check_matches(x_t, "control map")?;
    }
    Ok(())
}
