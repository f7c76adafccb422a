//! Two-stage compositional generation and the two baselines.
//!
//! The scaffolding stage develops every segment on its own, with a
//! reference image, a scaffolding image or a control map as outside help.
//! The harmonization stage then denoises the merged latent with every
//! segment seeing the others, merging after each step.
//!
//! Randomness comes from lanes keyed by `(seed, purpose, timestep,
//! segment)`, so per-segment work can run in any order or in parallel
//! without changing a single bit of the result.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::layout::{SegmentMaskSet, SegmentSpec};
use crate::par::{self, Execution};
use crate::rng::RngStream;
use crate::schedule::{cfg_combine, ddim_step, q_sample, q_sample_to, NoiseSchedule, SigmaMode, StepPlan};

const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HarmonizationMode {
    /// One branch under the union of every segment's tokens.
    Global,
    /// One branch per segment under its own tokens.
    #[default]
    PerSegment,
    /// As `PerSegment`, with each segment's control map attached.
    PerSegmentWithControl,
}

/// Guided DDIM stepping shared by every stage.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub guidance: f64,
    pub sigma_mode: SigmaMode,
    pub seed: u64,
}

impl<'a> Sampler<'a> {
    /// `eps_u + s (eps_c - eps_u)`; the unconditional branch drops both
    /// tokens and control.
    pub fn guided_eps(&self, x_t: &ImageGrid, t: usize, cond: &Condition) -> Result<ImageGrid> {
        let uncond = self.denoiser.eps_predict(x_t, t, &Condition::unconditional())?;
        let cond = self.denoiser.eps_predict(x_t, t, cond)?;
        cfg_combine(&uncond, &cond, self.guidance)
    }

    /// One guided step `t -> t_prev` drawing any noise from lane
    /// `("ddim", t, segment)`.
    pub fn step(&self, x_t: &ImageGrid, t: usize, t_prev: usize, cond: &Condition, segment: u64) -> Result<ImageGrid> {
        let eps = self.guided_eps(x_t, t, cond)?;
        let sigma = StepPlan::sigma_for(self.sigma_mode, self.schedule, t, t_prev);
        ddim_step(x_t, t, t_prev, &eps, sigma, &RngStream::new(self.seed, "ddim", t as u64, segment), self.schedule)
    }

    /// Replaces the complement of `mask` with the background noised to `t`,
    /// then takes one guided step.
    #[allow(clippy::too_many_arguments)]
    pub fn step_inpaint(
        &self,
        x_t: &ImageGrid,
        background: &ImageGrid,
        mask: &Mask,
        t: usize,
        t_prev: usize,
        cond: &Condition,
        segment: u64,
    ) -> Result<ImageGrid> {
        mask.check_matches(x_t, "step_inpaint")?;
        let noise = RngStream::new(self.seed, "scaffold-bg", t as u64, segment).normal_like(background);
        let bg_t = q_sample(background, t, &noise, self.schedule)?;
        let composed = x_t.select(mask, &bg_t)?;
        self.step(&composed, t, t_prev, cond, segment)
    }
}

/// Pastes each latent into its mask. Every output pixel is a copy of
/// exactly one input pixel.
pub fn merge_segments(latents: &[ImageGrid], masks: &SegmentMaskSet) -> Result<ImageGrid> {
    if latents.len() != masks.len() || latents.is_empty() {
        return Err(Error::shape("merge_segments", format!("{} latents for {} masks", latents.len(), masks.len())));
    }
    let mut out = latents[0].clone();
    masks.mask(0).check_matches(&out, "merge_segments")?;
    for (latent, mask) in latents.iter().zip(masks.masks()).skip(1) {
        out = latent.select(mask, &out)?;
    }
    Ok(out)
}

/// Shared initial noise `x_T` for a run.
pub fn initial_noise(seed: u64, height: usize, width: usize) -> ImageGrid {
    RngStream::new(seed, "init", 0, 0).normal_grid(height, width, IMAGE_CHANNELS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Scaffold,
    Harmonize,
}

/// Latents after one step: one per segment plus their merge.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub stage: Stage,
    /// Timestep the latents now sit at.
    pub timestep: usize,
    pub segments: Vec<ImageGrid>,
    pub composite: ImageGrid,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceRecord {
    pub steps: Vec<TraceStep>,
}

impl TraceRecord {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Which scaffolding branch a segment takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Reference,
    Control,
    Text,
}

impl Branch {
    pub fn of(spec: &SegmentSpec) -> Branch {
        if spec.reference_image.is_some() {
            Branch::Reference
        } else if spec.control_map.is_some() {
            Branch::Control
        } else {
            Branch::Text
        }
    }
}

#[derive(Clone)]
pub struct CompositeRequest<'a> {
    pub schedule: &'a NoiseSchedule,
    /// Carries κ as its count of scaffolding steps.
    pub plan: StepPlan,
    pub denoiser: &'a dyn Denoiser,
    pub masks: SegmentMaskSet,
    /// One per mask, in id order after validation.
    pub specs: Vec<SegmentSpec>,
    /// Defaults to constant mid-gray.
    pub scaffold_image: Option<ImageGrid>,
    pub harmonization: HarmonizationMode,
    pub guidance: f64,
    pub seed: u64,
    pub execution: Execution,
    pub trace: bool,
}

impl<'a> CompositeRequest<'a> {
    /// A request with default scaffold, mode and execution.
    pub fn new(
        schedule: &'a NoiseSchedule,
        plan: StepPlan,
        denoiser: &'a dyn Denoiser,
        masks: SegmentMaskSet,
        specs: Vec<SegmentSpec>,
        guidance: f64,
        seed: u64,
    ) -> Self {
        CompositeRequest {
            schedule,
            plan,
            denoiser,
            masks,
            specs,
            scaffold_image: None,
            harmonization: HarmonizationMode::default(),
            guidance,
            seed,
            execution: Execution::default(),
            trace: false,
        }
    }

    pub fn height(&self) -> usize {
        self.masks.height()
    }

    pub fn width(&self) -> usize {
        self.masks.width()
    }

    fn sampler(&self) -> Sampler<'a> {
        Sampler {
            denoiser: self.denoiser,
            schedule: self.schedule,
            guidance: self.guidance,
            sigma_mode: self.plan.sigma_mode(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.masks.validate()?;
        let n = self.masks.len();
        if self.specs.len() != n {
            return Err(Error::Validation(format!("{} segment specs for {n} masks", self.specs.len())));
        }
        for (i, spec) in self.specs.iter().enumerate() {
            if spec.id != i + 1 {
                return Err(Error::Validation(format!("spec at position {} has id {}, expected {}", i, spec.id, i + 1)));
            }
            spec.validate()?;
            if spec.reference_image.is_some() && spec.tokens.is_empty() {
                return Err(Error::Validation(format!("segment {} has a reference image but no tokens", spec.id)));
            }
            if let Some(&bad) = spec.tokens.iter().find(|&&t| t >= self.denoiser.vocabulary_size()) {
                return Err(Error::Validation(format!("segment {} token {bad} outside vocabulary", spec.id)));
            }
            if spec.control_map.is_some() && !self.denoiser.accepts_control() {
                return Err(Error::Capability(format!("segment {} has a control map but the denoiser takes none", spec.id)));
            }
            let shape = (self.height(), self.width(), IMAGE_CHANNELS);
            for (what, img) in [("reference", &spec.reference_image), ("scaffold", &spec.scaffold_image)] {
                if let Some(img) = img {
                    if img.shape() != shape {
                        return Err(Error::shape("CompositeRequest", format!("segment {} {what} image {:?} vs {shape:?}", spec.id, img.shape())));
                    }
                }
            }
            if let Some(c) = &spec.control_map {
                if (c.height(), c.width()) != (self.height(), self.width()) {
                    return Err(Error::shape("CompositeRequest", format!("segment {} control map size", spec.id)));
                }
            }
        }
        if let Some(img) = &self.scaffold_image {
            if img.shape() != (self.height(), self.width(), IMAGE_CHANNELS) {
                return Err(Error::shape("CompositeRequest", "scaffold image size"));
            }
        }
        if !self.guidance.is_finite() {
            return Err(Error::InvalidParameter("guidance scale must be finite".into()));
        }
        Ok(())
    }

    fn token_condition(&self, spec: &SegmentSpec) -> Condition {
        Condition::from_tokens(self.denoiser.vocabulary_size(), &spec.tokens).expect("validated tokens")
    }

    fn control_condition(&self, index: usize) -> Condition {
        let spec = &self.specs[index];
        let cond = self.token_condition(spec);
        match spec.clamped_control(self.masks.mask(index)) {
            Some(c) => cond.with_control(c),
            None => cond,
        }
    }

    /// Union of every segment's tokens.
    pub fn global_condition(&self) -> Condition {
        let conds: Vec<Condition> = self.specs.iter().map(|s| self.token_condition(s)).collect();
        Condition::union(self.denoiser.vocabulary_size(), &conds)
    }

    fn scaffold_background(&self, spec: &SegmentSpec) -> ImageGrid {
        spec.scaffold_image
            .clone()
            .or_else(|| self.scaffold_image.clone())
            .unwrap_or_else(|| ImageGrid::zeros(self.height(), self.width(), IMAGE_CHANNELS))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldOutput {
    /// Merged latent at the boundary timestep.
    pub composite: ImageGrid,
    /// Pre-merge latent of each segment at the boundary timestep.
    pub segments: Vec<ImageGrid>,
    pub trace: TraceRecord,
}

/// Develops every segment independently down to the κ boundary and merges.
pub fn scaffold_stage(req: &CompositeRequest) -> Result<ScaffoldOutput> {
    req.validate()?;
    let x_t = initial_noise(req.seed, req.height(), req.width());
    let n = req.masks.len();
    if req.plan.scaffold_steps() == 0 {
        return Ok(ScaffoldOutput { composite: x_t.clone(), segments: vec![x_t; n], trace: TraceRecord::default() });
    }
    let sampler = req.sampler();
    let transitions = req.plan.scaffold_transitions();
    let boundary = req.plan.boundary_timestep();
    let indices: Vec<usize> = (0..n).collect();

    // Each segment's latents after every scaffolding step.
    let histories = par::map(req.execution, &indices, |&i| -> Result<Vec<ImageGrid>> {
        let spec = &req.specs[i];
        let seg = i as u64;
        let mut history = Vec::with_capacity(transitions.len());
        match Branch::of(spec) {
            Branch::Reference => {
                let reference = spec.reference_image.as_ref().expect("reference branch");
                let eps = RngStream::new(req.seed, "reference", boundary as u64, seg).normal_like(reference);
                let latent = q_sample_to(reference, boundary, &eps, req.schedule)?;
                history.resize(transitions.len(), latent);
            }
            Branch::Control => {
                let cond = req.control_condition(i);
                let mut x = x_t.clone();
                for &(t, tp) in &transitions {
                    x = sampler.step(&x, t, tp, &cond, seg)?;
                    history.push(x.clone());
                }
            }
            Branch::Text => {
                let cond = req.token_condition(spec);
                let background = req.scaffold_background(spec);
                let mask = req.masks.mask(i);
                let mut x = x_t.clone();
                for &(t, tp) in &transitions {
                    x = sampler.step_inpaint(&x, &background, mask, t, tp, &cond, seg)?;
                    history.push(x.clone());
                }
            }
        }
        Ok(history)
    });
    let histories: Vec<Vec<ImageGrid>> = histories.into_iter().collect::<Result<_>>()?;

    let mut trace = TraceRecord::default();
    if req.trace {
        for (k, &(_, tp)) in transitions.iter().enumerate() {
            let segments: Vec<ImageGrid> = histories.iter().map(|h| h[k].clone()).collect();
            let composite = merge_segments(&segments, &req.masks)?;
            trace.steps.push(TraceStep { stage: Stage::Scaffold, timestep: tp, segments, composite });
        }
    }
    let segments: Vec<ImageGrid> = histories.into_iter().map(|mut h| h.pop().expect("non-empty stage")).collect();
    let composite = merge_segments(&segments, &req.masks)?;
    Ok(ScaffoldOutput { composite, segments, trace })
}

/// Denoises the merged latent from the κ boundary to the clean state with
/// every segment in context.
pub fn harmonize_stage(composite_in: &ImageGrid, req: &CompositeRequest) -> Result<(ImageGrid, TraceRecord)> {
    req.validate()?;
    let sampler = req.sampler();
    let n = req.masks.len();
    let indices: Vec<usize> = (0..n).collect();
    let global = req.global_condition();
    let conditions: Vec<Condition> = match req.harmonization {
        HarmonizationMode::Global => vec![],
        HarmonizationMode::PerSegment => req.specs.iter().map(|s| req.token_condition(s)).collect(),
        HarmonizationMode::PerSegmentWithControl => (0..n).map(|i| req.control_condition(i)).collect(),
    };
    let mut x = composite_in.clone();
    let mut trace = TraceRecord::default();
    for (t, tp) in req.plan.harmonize_transitions() {
        let segments = match req.harmonization {
            HarmonizationMode::Global => {
                x = sampler.step(&x, t, tp, &global, 0)?;
                vec![x.clone()]
            }
            _ => {
                let latents = par::map(req.execution, &indices, |&i| sampler.step(&x, t, tp, &conditions[i], i as u64));
                let latents: Vec<ImageGrid> = latents.into_iter().collect::<Result<_>>()?;
                x = merge_segments(&latents, &req.masks)?;
                latents
            }
        };
        if req.trace {
            trace.steps.push(TraceStep { stage: Stage::Harmonize, timestep: tp, segments, composite: x.clone() });
        }
    }
    Ok((x, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeOutput {
    /// Clean composite in data range (not clamped).
    pub image: ImageGrid,
    /// Pre-merge latents at the κ boundary.
    pub scaffold_segments: Vec<ImageGrid>,
    pub trace: TraceRecord,
}

/// Scaffolding followed by harmonization under one seed.
pub fn run_composite(req: &CompositeRequest) -> Result<CompositeOutput> {
    let scaffold = scaffold_stage(req)?;
    let (image, harmonize_trace) = harmonize_stage(&scaffold.composite, req)?;
    let mut trace = scaffold.trace;
    trace.steps.extend(harmonize_trace.steps);
    Ok(CompositeOutput { image: image.with_range(crate::grid::ValueRange::Data), scaffold_segments: scaffold.segments, trace })
}

/// Plain guided DDIM from noise over the full plan.
pub fn run_text_to_image_baseline(
    cond: &Condition,
    sampler: &Sampler,
    plan: &StepPlan,
    (height, width): (usize, usize),
) -> Result<ImageGrid> {
    let mut x = initial_noise(sampler.seed, height, width);
    for (t, tp) in plan.transitions() {
        x = sampler.step(&x, t, tp, cond, 0)?;
    }
    Ok(x.with_range(crate::grid::ValueRange::Data))
}

/// Inpaints the segments one after another, in the order given, each over
/// the full plan against the image produced so far. Pixels outside the
/// current mask keep the background.
pub fn run_serial_inpainting_baseline(
    background: &ImageGrid,
    masks: &[Mask],
    conditions: &[Condition],
    sampler: &Sampler,
    plan: &StepPlan,
) -> Result<ImageGrid> {
    if masks.len() != conditions.len() {
        return Err(Error::shape("serial_inpainting", format!("{} masks for {} conditions", masks.len(), conditions.len())));
    }
    let mut background = background.clone();
    let (h, w, _) = background.shape();
    for (i, (mask, cond)) in masks.iter().zip(conditions).enumerate() {
        mask.check_matches(&background, "serial_inpainting")?;
        let mut x = initial_noise(sampler.seed, h, w);
        for (t, tp) in plan.transitions() {
            x = sampler.step_inpaint(&x, &background, mask, t, tp, cond, i as u64)?;
        }
        background = x.select(mask, &background)?;
    }
    Ok(background.with_range(crate::grid::ValueRange::Data))
}
