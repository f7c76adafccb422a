//! Dataset configuration and the procedural training-sample stream shared
//! by the denoiser and classifier trainers.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{toml_error, ScheduleConfig};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::layout::{build_masks, SegmentLayout};
use crate::patterns::{gen_pattern, random_assignments, random_layout, LayoutFamily, Vocabulary, DEFAULT_VOCABULARY};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub vocabulary: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub samples_per_token: usize,
    pub mix: SampleMix,
    /// Half-width in pixels of the cross-fade between regions of a training
    /// composite. Zero gives hard pastes.
    pub feather: usize,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserTraining,
    pub classifier: ClassifierTraining,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            height: 32,
            width: 32,
            samples_per_token: 8000,
            mix: SampleMix::default(),
            feather: 2,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserTraining::default(),
            classifier: ClassifierTraining::default(),
        }
    }
}

/// Relative frequencies of the three training-sample kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleMix {
    pub single: f64,
    pub composite: f64,
    pub control: f64,
    /// Chance that a composite is labelled with a random non-empty subset of
    /// its tokens instead of all of them.
    pub partial_label: f64,
}

impl Default for SampleMix {
    fn default() -> Self {
        SampleMix { single: 0.45, composite: 0.30, control: 0.25, partial_label: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTraining {
    pub hidden: usize,
    pub embed: usize,
    pub time_embed: usize,
    pub dilations: Vec<usize>,
    pub accepts_control: bool,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub cond_dropout: f64,
    pub epochs: usize,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        DenoiserTraining {
            hidden: 32,
            embed: 64,
            time_embed: 32,
            dilations: vec![1, 2, 4, 8, 1, 2],
            accepts_control: true,
            batch_size: 8,
            learning_rate: 2e-3,
            cond_dropout: 0.15,
            epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTraining {
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub samples_per_token: usize,
    pub holdout_per_token: usize,
    /// Required held-out per-token accuracy.
    pub min_accuracy: f64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            hidden: 24,
            batch_size: 16,
            learning_rate: 3e-3,
            epochs: 1,
            samples_per_token: 1000,
            holdout_per_token: 100,
            min_accuracy: 0.95,
        }
    }
}

impl DatasetConfig {
    pub fn from_toml_str(source: &str) -> Result<Self> {
        let cfg: DatasetConfig = toml::from_str(source).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("dataset", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("dataset config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        Vocabulary::from_names(&self.vocabulary)?;
        if self.height < 4 || self.width < 4 {
            return Err(Error::config("height", "image size must be at least 4x4"));
        }
        if self.samples_per_token == 0 {
            return Err(Error::config("samples_per_token", "must be positive"));
        }
        let m = &self.mix;
        if [m.single, m.composite, m.control].iter().any(|f| !(*f >= 0.0)) || m.single + m.composite + m.control <= 0.0 {
            return Err(Error::config("mix", "fractions must be non-negative with a positive sum"));
        }
        if !(0.0..=1.0).contains(&m.partial_label) {
            return Err(Error::config("mix.partial_label", "must lie in [0, 1]"));
        }
        let d = &self.denoiser;
        if d.hidden == 0 || d.embed == 0 || d.time_embed < 2 || !d.time_embed.is_multiple_of(2) || d.batch_size == 0 {
            return Err(Error::config("denoiser", "layer sizes and batch size must be positive, time_embed even"));
        }
        if d.dilations.contains(&0) {
            return Err(Error::config("denoiser.dilations", "dilations must be positive"));
        }
        if !(0.0..1.0).contains(&d.cond_dropout) {
            return Err(Error::config("denoiser.cond_dropout", "must lie in [0, 1)"));
        }
        self.schedule.build()?;
        let c = &self.classifier;
        if c.hidden == 0 || c.batch_size == 0 || c.samples_per_token == 0 || c.holdout_per_token == 0 {
            return Err(Error::config("classifier", "sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&c.min_accuracy) {
            return Err(Error::config("classifier.min_accuracy", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::from_names(&self.vocabulary)
    }

    /// Number of samples in one denoiser epoch.
    pub fn epoch_len(&self) -> usize {
        self.samples_per_token * self.vocabulary.len()
    }
}

/// Root stream for denoiser training under `seed`. Its `"dataset"` fork
/// drives [`training_sample`].
pub fn denoiser_stream(seed: u64) -> RngStream {
    RngStream::new(seed, "train", 0, 0)
}

/// Root stream for classifier training under `seed`.
pub fn classifier_stream(seed: u64) -> RngStream {
    RngStream::new(seed, "classifier", 0, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    Single,
    Composite,
    Control,
}

/// One supervised example: a clean image with its token label set and an
/// optional control map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub kind: SampleKind,
    pub image: ImageGrid,
    pub tokens: Vec<usize>,
    pub control: Option<Mask>,
}

/// Per-segment blend weights: box-filtered one-hot masks, renormalised.
fn feather_weights(layout: &SegmentLayout, radius: usize) -> Vec<Vec<f64>> {
    let (h, w, n) = (layout.height(), layout.width(), layout.segment_count());
    let r = radius as isize;
    let mut weights = vec![vec![0.0; h * w]; n];
    for y in 0..h {
        for x in 0..w {
            let mut counts = vec![0.0; n];
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y as isize + dy, x as isize + dx);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        counts[layout.id_at(sy as usize, sx as usize) as usize - 1] += 1.0;
                    }
                }
            }
            let total: f64 = counts.iter().sum();
            for k in 0..n {
                weights[k][y * w + x] = counts[k] / total;
            }
        }
    }
    weights
}

/// A composite whose regions cross-fade over `feather` pixels on each side
/// of every boundary; `feather = 0` is a hard paste.
pub fn feathered_composite(
    layout: &SegmentLayout,
    tokens: &[usize],
    vocab: &Vocabulary,
    feather: usize,
    rng: &RngStream,
) -> Result<ImageGrid> {
    let (h, w) = (layout.height(), layout.width());
    if tokens.len() != layout.segment_count() {
        return Err(Error::InvalidParameter("one token per segment required".into()));
    }
    let weights = feather_weights(layout, feather);
    let mut out = ImageGrid::zeros(h, w, 3);
    let lane = rng.lane();
    for (k, &tok) in tokens.iter().enumerate() {
        let pattern = gen_pattern(vocab.get(tok)?, h, w, &rng.fork(lane.purpose, lane.timestep, lane.segment + k as u64));
        for p in 0..h * w {
            let wk = weights[k][p];
            if wk > 0.0 {
                for c in 0..3 {
                    out.data_mut()[p * 3 + c] += wk * pattern.data()[p * 3 + c];
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic training sample number `index` of the stream keyed by
/// `rng`'s seed.
pub fn training_sample(cfg: &DatasetConfig, vocab: &Vocabulary, index: u64, rng: &RngStream) -> Result<Sample> {
    let mut r = rng.fork("sample", index, 0).rng();
    let (h, w) = (cfg.height, cfg.width);
    let m = &cfg.mix;
    let u: f64 = r.random::<f64>() * (m.single + m.composite + m.control);
    let patterns = rng.fork("sample-pattern", index, 0);
    let v = vocab.len();
    if u < m.single {
        let tok = r.random_range(0..v);
        let image = gen_pattern(vocab.get(tok)?, h, w, &patterns);
        return Ok(Sample { kind: SampleKind::Single, image, tokens: vec![tok], control: None });
    }
    if u < m.single + m.composite || v < 2 {
        let layout = random_layout(h, w, &mut r);
        let assignments = random_assignments(&layout, v, &mut r);
        let toks: Vec<usize> = assignments.values().copied().collect();
        let image = feathered_composite(&layout, &toks, vocab, cfg.feather, &patterns)?;
        let mut labels: Vec<usize> = toks.clone();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() > 1 && r.random::<f64>() < m.partial_label {
            let keep = r.random_range(1..labels.len());
            for _ in 0..labels.len() - keep {
                labels.remove(r.random_range(0..labels.len()));
            }
        }
        return Ok(Sample { kind: SampleKind::Composite, image, tokens: labels, control: None });
    }
    let family = LayoutFamily::ALL[r.random_range(0..LayoutFamily::ALL.len())];
    let layout = family.sample(h, w, &mut r);
    let masks = build_masks(&layout)?;
    let inside = r.random_range(0..masks.len());
    let fg = r.random_range(0..v);
    let mut bg = r.random_range(0..v - 1);
    if bg >= fg {
        bg += 1;
    }
    let toks: Vec<usize> = (0..masks.len()).map(|k| if k == inside { fg } else { bg }).collect();
    let image = feathered_composite(&layout, &toks, vocab, cfg.feather, &patterns)?;
    Ok(Sample { kind: SampleKind::Control, image, tokens: vec![fg], control: Some(masks.mask(inside).clone()) })
}
