//! On-disk run configuration.
//!
//! ```toml
//! layout = "layouts/split.txt"
//! kappa = 40
//!
//! [[segments]]
//! id = 1
//! tokens = ["stripes-red"]
//!
//! [[segments]]
//! id = 2
//! tokens = ["dots-blue"]
//! reference = "refs/dots.png"
//! ```
//!
//! Relative paths are resolved against the directory holding the config.
//! Everything else falls back to the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::imageio;
use crate::layout::{build_masks, SegmentLayout, SegmentMaskSet, SegmentSpec};
use crate::patterns::Vocabulary;
use crate::pipeline::HarmonizationMode;
use crate::schedule::{NoiseSchedule, SigmaMode, StepPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { total_steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.total_steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::config("schedule", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub sigma_mode: SigmaMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: 50, sigma_mode: SigmaMode::Deterministic }
    }
}

/// `"gray"` or a path to an RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ScaffoldSource {
    #[default]
    Gray,
    File(PathBuf),
}

impl Serialize for ScaffoldSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ScaffoldSource::Gray => s.serialize_str("gray"),
            ScaffoldSource::File(p) => s.serialize_str(&p.to_string_lossy()),
        }
    }
}

impl<'de> Deserialize<'de> for ScaffoldSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "gray" { ScaffoldSource::Gray } else { ScaffoldSource::File(PathBuf::from(s)) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub id: usize,
    #[serde(default)]
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaffold: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub denoiser: PathBuf,
    pub classifier: PathBuf,
    /// Dataset config the models were trained from; supplies the
    /// vocabulary. The default vocabulary applies when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

impl Default for ModelPaths {
    fn default() -> Self {
        ModelPaths { denoiser: PathBuf::from("models/denoiser.cdif"), classifier: PathBuf::from("models/classifier.cdif"), dataset: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub kappas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { kappas: vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0], seeds: (0..10).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub layout: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default)]
    pub harmonization: HarmonizationMode,
    #[serde(default)]
    pub scaffold: ScaffoldSource,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_band")]
    pub band_radius: usize,
    pub segments: Vec<SegmentConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub models: ModelPaths,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_kappa() -> f64 {
    40.0
}

fn default_guidance() -> f64 {
    3.0
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_band() -> usize {
    1
}

/// Maps a TOML error onto a configuration error naming the offending key
/// where the parser reports one.
pub(crate) fn toml_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
        .unwrap_or("config")
        .to_string();
    Error::config(key, msg)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn must_exist(key: impl Into<String>, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::config(key, format!("file not found: {}", p.display())))
    }
}

impl RunConfig {
    pub fn from_toml_str(source: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(source).map_err(toml_error)?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        self.layout = resolve(base, &self.layout);
        self.output_dir = resolve(base, &self.output_dir);
        if let ScaffoldSource::File(p) = &self.scaffold {
            self.scaffold = ScaffoldSource::File(resolve(base, p));
        }
        self.models.denoiser = resolve(base, &self.models.denoiser);
        self.models.classifier = resolve(base, &self.models.classifier);
        self.models.dataset = self.models.dataset.as_ref().map(|p| resolve(base, p));
        for s in &mut self.segments {
            for p in [&mut s.control, &mut s.reference, &mut s.scaffold].into_iter().flatten() {
                *p = resolve(base, p);
            }
        }
    }

    /// Checks values and cross-references; model files are checked only
    /// when loaded.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.kappa) {
            return Err(Error::config("kappa", format!("must lie in [0, 100], got {}", self.kappa)));
        }
        if !self.guidance.is_finite() {
            return Err(Error::config("guidance", "must be finite"));
        }
        if self.band_radius == 0 {
            return Err(Error::config("band_radius", "must be at least 1"));
        }
        self.schedule.build()?;
        if self.sampler.num_steps == 0 || self.sampler.num_steps > self.schedule.total_steps {
            return Err(Error::config("sampler.num_steps", format!("must lie in [1, {}]", self.schedule.total_steps)));
        }
        if self.ablation.kappas.iter().any(|k| !(0.0..=100.0).contains(k)) {
            return Err(Error::config("ablation.kappas", "every kappa must lie in [0, 100]"));
        }
        must_exist("layout", &self.layout)?;
        if let ScaffoldSource::File(p) = &self.scaffold {
            must_exist("scaffold", p)?;
        }
        if let Some(p) = &self.models.dataset {
            must_exist("models.dataset", p)?;
        }
        let vocab = self.vocabulary()?;
        let layout = self.load_layout()?;
        let n = layout.segment_count();
        for (i, s) in self.segments.iter().enumerate() {
            let key = format!("segments[{i}]");
            if s.id == 0 || s.id > n {
                return Err(Error::config(format!("{key}.id"), format!("segment {} not in layout (ids 1..={n})", s.id)));
            }
            if self.segments[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::config(format!("{key}.id"), format!("segment {} listed twice", s.id)));
            }
            if s.tokens.is_empty() {
                return Err(Error::config(format!("{key}.tokens"), format!("segment {} needs at least one token", s.id)));
            }
            for t in &s.tokens {
                vocab.lookup(t).map_err(|_| Error::config(format!("{key}.tokens"), format!("unknown token `{t}`")))?;
            }
            for (name, p) in [("control", &s.control), ("reference", &s.reference), ("scaffold", &s.scaffold)] {
                if let Some(p) = p {
                    must_exist(format!("{key}.{name}"), p)?;
                }
            }
        }
        for id in 1..=n {
            if !self.segments.iter().any(|s| s.id == id) {
                return Err(Error::config("segments", format!("unassigned segment {id}")));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        match &self.models.dataset {
            Some(p) => DatasetConfig::load(p)?.vocab(),
            None => Ok(Vocabulary::default()),
        }
    }

    pub fn load_layout(&self) -> Result<SegmentLayout> {
        SegmentLayout::load(&self.layout).map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::config("layout", other.to_string()),
        })
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn step_plan(&self, schedule: &NoiseSchedule, kappa: f64) -> Result<StepPlan> {
        Ok(StepPlan::new(schedule, self.sampler.num_steps, kappa)?.with_sigma_mode(self.sampler.sigma_mode))
    }

    /// The resolved configuration as TOML, for writing next to outputs.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Loads the layout and every referenced image.
    pub fn load_scene(&self) -> Result<Scene> {
        let vocab = self.vocabulary()?;
        let layout = self.load_layout()?;
        let masks = build_masks(&layout)?;
        let (h, w) = (layout.height(), layout.width());
        let sized = |key: String, img: ImageGrid| -> Result<ImageGrid> {
            if img.shape() != (h, w, 3) {
                return Err(Error::config(key, format!("image is {}x{}, layout is {h}x{w}", img.width(), img.height())));
            }
            Ok(img)
        };
        let mut ordered: Vec<&SegmentConfig> = self.segments.iter().collect();
        ordered.sort_by_key(|s| s.id);
        let mut specs = Vec::with_capacity(ordered.len());
        for s in ordered {
            let key = format!("segments.{}", s.id);
            let tokens = s.tokens.iter().map(|t| Ok(vocab.lookup(t)?.id)).collect::<Result<Vec<_>>>()?;
            let mut spec = SegmentSpec::text(s.id, tokens);
            if let Some(p) = &s.control {
                let m = imageio::read_mask(p)?;
                if (m.height(), m.width()) != (h, w) {
                    return Err(Error::config(format!("{key}.control"), "control map size differs from the layout"));
                }
                spec = spec.with_control(m);
            }
            if let Some(p) = &s.reference {
                spec = spec.with_reference(sized(format!("{key}.reference"), imageio::read_grid_png(p)?)?);
            }
            if let Some(p) = &s.scaffold {
                spec = spec.with_scaffold(sized(format!("{key}.scaffold"), imageio::read_grid_png(p)?)?);
            }
            specs.push(spec);
        }
        let scaffold = match &self.scaffold {
            ScaffoldSource::Gray => None,
            ScaffoldSource::File(p) => Some(sized("scaffold".into(), imageio::read_grid_png(p)?)?),
        };
        Ok(Scene { vocab, layout, masks, specs, scaffold })
    }
}

/// Reads and validates a run configuration file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    let base = std::path::absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default();
    RunConfig::from_toml_str(&text, &base)
}

/// Everything a run needs from disk except the models.
#[derive(Debug, Clone)]
pub struct Scene {
    pub vocab: Vocabulary,
    pub layout: SegmentLayout,
    pub masks: SegmentMaskSet,
    /// In id order.
    pub specs: Vec<SegmentSpec>,
    pub scaffold: Option<ImageGrid>,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        (self.layout.height(), self.layout.width())
    }

    pub fn token_names(&self) -> Vec<String> {
        self.vocab.names()
    }
}
