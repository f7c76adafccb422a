//! Experiment runners shared by the command line and the acceptance suite.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{load_run_config, RunConfig, Scene};
use crate::denoiser::{Condition, Denoiser, ToyDenoiser};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::imageio;
use crate::metrics::{evaluate, MetricsReport, PatternClassifier, ReportMetadata};
use crate::par::Execution;
use crate::pipeline::{
    run_composite, run_serial_inpainting_baseline, run_text_to_image_baseline, CompositeOutput, CompositeRequest, Sampler,
    TraceRecord,
};
use crate::schedule::NoiseSchedule;

/// The generation methods the harness can run and compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Composite,
    TextToImage,
    Serial,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Composite, Method::TextToImage, Method::Serial];

    pub fn name(self) -> &'static str {
        match self {
            Method::Composite => "composite",
            Method::TextToImage => "t2i",
            Method::Serial => "serial",
        }
    }
}

/// A loaded run: configuration, scene and schedule.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub scene: Scene,
    pub schedule: NoiseSchedule,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        let scene = config.load_scene()?;
        let schedule = config.noise_schedule()?;
        Ok(Experiment { config, scene, schedule })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(load_run_config(path)?)
    }

    /// Loads the configured denoiser and checks it against the vocabulary.
    pub fn load_denoiser(&self) -> Result<ToyDenoiser> {
        let model = ToyDenoiser::load(&self.config.models.denoiser).map_err(|e| model_error("models.denoiser", e))?;
        self.check_vocab("models.denoiser", model.vocabulary_size())?;
        Ok(model)
    }

    pub fn load_classifier(&self) -> Result<PatternClassifier> {
        let model = PatternClassifier::load(&self.config.models.classifier).map_err(|e| model_error("models.classifier", e))?;
        self.check_vocab("models.classifier", model.vocabulary_size())?;
        Ok(model)
    }

    fn check_vocab(&self, key: &str, size: usize) -> Result<()> {
        if size != self.scene.vocab.len() {
            return Err(Error::config(
                key,
                format!("model has {size} tokens, the configured vocabulary has {}", self.scene.vocab.len()),
            ));
        }
        Ok(())
    }

    fn sampler<'a>(&'a self, denoiser: &'a dyn Denoiser, seed: u64) -> Sampler<'a> {
        Sampler {
            denoiser,
            schedule: &self.schedule,
            guidance: self.config.guidance,
            sigma_mode: self.config.sampler.sigma_mode,
            seed,
        }
    }

    pub fn request<'a>(
        &'a self,
        denoiser: &'a dyn Denoiser,
        seed: u64,
        kappa: f64,
        execution: Execution,
        trace: bool,
    ) -> Result<CompositeRequest<'a>> {
        let plan = self.config.step_plan(&self.schedule, kappa)?;
        let mut req = CompositeRequest::new(
            &self.schedule,
            plan,
            denoiser,
            self.scene.masks.clone(),
            self.scene.specs.clone(),
            self.config.guidance,
            seed,
        );
        req.scaffold_image = self.scene.scaffold.clone();
        req.harmonization = self.config.harmonization;
        req.execution = execution;
        req.trace = trace;
        Ok(req)
    }

    pub fn generate(
        &self,
        denoiser: &dyn Denoiser,
        seed: u64,
        kappa: f64,
        execution: Execution,
        trace: bool,
    ) -> Result<CompositeOutput> {
        let req = self.request(denoiser, seed, kappa, execution, trace)?;
        req.validate()?;
        run_composite(&req)
    }

    /// Guided sampling from the union of every segment's tokens.
    pub fn text_to_image(&self, denoiser: &dyn Denoiser, seed: u64) -> Result<ImageGrid> {
        let req = self.request(denoiser, seed, 0.0, Execution::Sequential, false)?;
        req.validate()?;
        let plan = self.config.step_plan(&self.schedule, 0.0)?;
        run_text_to_image_baseline(&req.global_condition(), &self.sampler(denoiser, seed), &plan, self.scene.size())
    }

    /// Segment-by-segment inpainting in id order over the scaffold image,
    /// or mid-gray when none is configured.
    pub fn serial(&self, denoiser: &dyn Denoiser, seed: u64) -> Result<ImageGrid> {
        let (h, w) = self.scene.size();
        let v = denoiser.vocabulary_size();
        let background = self.scene.scaffold.clone().unwrap_or_else(|| ImageGrid::zeros(h, w, 3));
        let conditions =
            self.scene.specs.iter().map(|s| Condition::from_tokens(v, &s.tokens)).collect::<Result<Vec<_>>>()?;
        let plan = self.config.step_plan(&self.schedule, 0.0)?;
        run_serial_inpainting_baseline(
            &background,
            self.scene.masks.masks(),
            &conditions,
            &self.sampler(denoiser, seed),
            &plan,
        )
    }

    pub fn run_method(&self, method: Method, denoiser: &dyn Denoiser, seed: u64, execution: Execution) -> Result<ImageGrid> {
        match method {
            Method::Composite => Ok(self.generate(denoiser, seed, self.config.kappa, execution, false)?.image),
            Method::TextToImage => self.text_to_image(denoiser, seed),
            Method::Serial => self.serial(denoiser, seed),
        }
    }

    pub fn metadata(&self, method: Method, seed: u64, kappa: Option<f64>) -> ReportMetadata {
        let harmonization = (method == Method::Composite)
            .then(|| serde_json::to_value(self.config.harmonization).ok())
            .flatten()
            .and_then(|v| v.as_str().map(str::to_string));
        ReportMetadata {
            method: method.name().to_string(),
            seed,
            kappa: if method == Method::Composite { kappa } else { None },
            harmonization,
            band_radius: self.config.band_radius,
        }
    }

    /// Scores the image clamped to the displayable range, as written to disk.
    pub fn evaluate(&self, image: &ImageGrid, classifier: &PatternClassifier, metadata: ReportMetadata) -> Result<MetricsReport> {
        if (image.height(), image.width()) != self.scene.size() {
            return Err(Error::config(
                "image",
                format!("image is {}x{}, layout is {}x{}", image.width(), image.height(), self.scene.size().1, self.scene.size().0),
            ));
        }
        evaluate(&image.clamped(), &self.scene.masks, &self.scene.specs, classifier, &self.scene.token_names(), metadata)
    }

    /// Runs the composite at every `(kappa, seed)` pair and scores it.
    pub fn ablate_kappa(
        &self,
        denoiser: &dyn Denoiser,
        classifier: &PatternClassifier,
        kappas: &[f64],
        seeds: &[u64],
        execution: Execution,
        mut progress: impl FnMut(f64, u64),
    ) -> Result<AblationTable> {
        if kappas.is_empty() || seeds.is_empty() {
            return Err(Error::InvalidParameter("ablation needs at least one kappa and one seed".into()));
        }
        let mut raw = Vec::with_capacity(kappas.len() * seeds.len());
        for &kappa in kappas {
            for &seed in seeds {
                progress(kappa, seed);
                let image = self.generate(denoiser, seed, kappa, execution, false)?.image;
                raw.push(self.evaluate(&image, classifier, self.metadata(Method::Composite, seed, Some(kappa)))?);
            }
        }
        Ok(AblationTable::from_raw(kappas, raw))
    }

    /// Scores every method under every seed.
    pub fn compare(
        &self,
        denoiser: &dyn Denoiser,
        classifier: &PatternClassifier,
        seeds: &[u64],
        execution: Execution,
    ) -> Result<Comparison> {
        if seeds.is_empty() {
            return Err(Error::InvalidParameter("comparison needs at least one seed".into()));
        }
        let mut rows = Vec::new();
        for method in Method::ALL {
            let mut reports = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let image = self.run_method(method, denoiser, seed, execution)?;
                reports.push(self.evaluate(&image, classifier, self.metadata(method, seed, Some(self.config.kappa)))?);
            }
            rows.push(MethodSummary { method, mean: MeanMetrics::of(&reports), reports });
        }
        Ok(Comparison { rows })
    }
}

fn model_error(key: &str, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::config(key, io.to_string()),
        other => other,
    }
}

/// Scalar metrics averaged over a set of reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub content_fidelity: f64,
    pub spatial_fidelity: f64,
    pub technical_quality: f64,
    pub blending: f64,
}

impl MeanMetrics {
    pub fn of(reports: &[MetricsReport]) -> MeanMetrics {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MeanMetrics {
            content_fidelity: sum(|r| r.content_fidelity),
            spatial_fidelity: sum(|r| r.spatial_fidelity),
            technical_quality: sum(|r| r.technical_quality),
            blending: sum(|r| r.blending),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kappa: f64,
    pub seeds: usize,
    pub mean: MeanMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub raw: Vec<MetricsReport>,
    /// Rank correlation between kappa and the per-kappa mean blending score.
    pub spearman_blending: f64,
    /// The same correlation over every raw (kappa, seed) row.
    pub spearman_blending_raw: f64,
}

impl AblationTable {
    /// Groups raw rows by kappa, keeping the order of `kappas`.
    pub fn from_raw(kappas: &[f64], raw: Vec<MetricsReport>) -> AblationTable {
        let rows: Vec<AblationRow> = kappas
            .iter()
            .map(|&k| {
                let group: Vec<MetricsReport> = raw.iter().filter(|r| r.metadata.kappa == Some(k)).cloned().collect();
                AblationRow { kappa: k, seeds: group.len(), mean: MeanMetrics::of(&group) }
            })
            .collect();
        let spearman_blending =
            spearman(&rows.iter().map(|r| r.kappa).collect::<Vec<_>>(), &rows.iter().map(|r| r.mean.blending).collect::<Vec<_>>());
        let spearman_blending_raw = spearman(
            &raw.iter().map(|r| r.metadata.kappa.unwrap_or(f64::NAN)).collect::<Vec<_>>(),
            &raw.iter().map(|r| r.blending).collect::<Vec<_>>(),
        );
        AblationTable { rows, raw, spearman_blending, spearman_blending_raw }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation table serializes")
    }

    /// Fixed-width text table of the per-kappa means.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:>6} {:>6} {:>9} {:>9} {:>9} {:>9}\n",
            "kappa", "seeds", "content", "spatial", "noise", "blending"
        );
        for r in &self.rows {
            out += &format!(
                "{:>6} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                r.kappa, r.seeds, r.mean.content_fidelity, r.mean.spatial_fidelity, r.mean.technical_quality, r.mean.blending
            );
        }
        out += &format!("spearman(kappa, blending) = {:.4} (raw rows {:.4})\n", self.spearman_blending, self.spearman_blending_raw);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: MeanMetrics,
    pub reports: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<MethodSummary>,
}

impl Comparison {
    pub fn get(&self, method: Method) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:>10} {:>9} {:>9} {:>9} {:>9}\n", "method", "content", "spatial", "noise", "blending");
        for r in &self.rows {
            let m = &r.mean;
            out += &format!(
                "{:>10} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                r.method.name(),
                m.content_fidelity,
                m.spatial_fidelity,
                m.technical_quality,
                m.blending
            );
        }
        out
    }
}

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant or the lengths differ or are below two.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// One row per step, one tile per segment followed by the merged latent.
pub fn trace_strip(trace: &TraceRecord) -> Option<ImageGrid> {
    let rows: Vec<Vec<&ImageGrid>> =
        trace.steps.iter().map(|s| s.segments.iter().chain(std::iter::once(&s.composite)).collect()).collect();
    imageio::tile_grids(&rows)
}

/// Writes `{stem}.png`, an optional `{stem}.json` report and the resolved
/// config into `dir`. Returns the image path.
pub fn write_run(
    dir: &Path,
    stem: &str,
    image: &ImageGrid,
    report: Option<&MetricsReport>,
    config: &RunConfig,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let png = dir.join(format!("{stem}.png"));
    imageio::write_grid_png(&png, image)?;
    if let Some(r) = report {
        std::fs::write(dir.join(format!("{stem}.json")), r.to_json())?;
    }
    std::fs::write(dir.join("resolved.toml"), config.to_toml_string())?;
    Ok(png)
}

/// Every `*.toml` run config directly inside `dir`, sorted by file name.
pub fn benchmark_configs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    Ok(paths)
}
