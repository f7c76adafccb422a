//! Automated quality measures: content and spatial fidelity from a trained
//! pattern classifier, a noise-level estimate and boundary edge energy.

mod classifier;

pub use classifier::{classifier_sample, holdout_accuracy, train_classifier, ClassifierReport, LabelledRegion, PatternClassifier};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::layout::{boundary_band, SegmentMaskSet, SegmentSpec};

/// Default half-width of the boundary band used by [`blending_score`].
pub const DEFAULT_BAND_RADIUS: usize = 1;

fn check_tokens(specs: &[SegmentSpec], classifier: &PatternClassifier) -> Result<()> {
    for s in specs {
        if s.tokens.is_empty() {
            return Err(Error::config(format!("segments.{}.tokens", s.id), "segment has no tokens to score"));
        }
        if let Some(&t) = s.tokens.iter().find(|&&t| t >= classifier.vocabulary_size()) {
            return Err(Error::config(
                format!("segments.{}.tokens", s.id),
                format!("token {t} outside the classifier vocabulary of {}", classifier.vocabulary_size()),
            ));
        }
    }
    Ok(())
}

fn mean_of(scores: &[f64], tokens: &[usize]) -> f64 {
    tokens.iter().map(|&t| scores[t]).sum::<f64>() / tokens.len() as f64
}

/// Per-segment full-image scores of each segment's tokens.
pub fn content_terms(image: &ImageGrid, specs: &[SegmentSpec], classifier: &PatternClassifier) -> Result<Vec<f64>> {
    check_tokens(specs, classifier)?;
    let scores = classifier.scores(image)?;
    Ok(specs.iter().map(|s| mean_of(&scores, &s.tokens)).collect())
}

/// Per-segment masked-region scores of each segment's tokens.
pub fn spatial_terms(
    image: &ImageGrid,
    masks: &SegmentMaskSet,
    specs: &[SegmentSpec],
    classifier: &PatternClassifier,
) -> Result<Vec<f64>> {
    check_tokens(specs, classifier)?;
    if specs.len() != masks.len() {
        return Err(Error::Validation(format!("{} specs for {} masks", specs.len(), masks.len())));
    }
    specs
        .iter()
        .zip(masks.masks())
        .map(|(s, m)| Ok(mean_of(&classifier.scores_masked(image, m)?, &s.tokens)))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean over segments of the whole-image score of each segment's tokens.
pub fn content_fidelity(image: &ImageGrid, specs: &[SegmentSpec], classifier: &PatternClassifier) -> Result<f64> {
    Ok(mean(&content_terms(image, specs, classifier)?))
}

/// Mean over segments of the score of each segment's tokens on its own
/// region.
pub fn spatial_fidelity(
    image: &ImageGrid,
    masks: &SegmentMaskSet,
    specs: &[SegmentSpec],
    classifier: &PatternClassifier,
) -> Result<f64> {
    Ok(mean(&spatial_terms(image, masks, specs, classifier)?))
}

/// Gaussian noise level from the mean absolute response to the 3x3
/// Laplacian-difference kernel `[[1,-2,1],[-2,4,-2],[1,-2,1]]`:
/// `sigma = sqrt(pi / 2) * mean|r| / 6`, averaged over channels.
pub fn noise_estimate(image: &ImageGrid) -> Result<f64> {
    let (h, w, c) = image.shape();
    if h < 3 || w < 3 {
        return Err(Error::InvalidParameter(format!("noise estimate needs at least 3x3 pixels, got {h}x{w}")));
    }
    const K: [[f64; 3]; 3] = [[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]];
    let mut total = 0.0;
    for ch in 0..c {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut r = 0.0;
                for (ky, row) in K.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        r += k * image.get(y + ky - 1, x + kx - 1, ch);
                    }
                }
                total += r.abs();
            }
        }
    }
    let n = (c * (h - 2) * (w - 2)) as f64;
    Ok((std::f64::consts::FRAC_PI_2).sqrt() * total / (6.0 * n))
}

/// Mean central-difference gradient magnitude (replicated border,
/// channel-averaged) over the boundary band of `masks`. Zero when the band
/// is empty.
pub fn blending_score(image: &ImageGrid, masks: &SegmentMaskSet, radius: usize) -> Result<f64> {
    if radius == 0 {
        return Err(Error::InvalidParameter("band radius must be at least 1".into()));
    }
    let (h, w, c) = image.shape();
    if (masks.height(), masks.width()) != (h, w) {
        return Err(Error::shape("blending_score", "masks and image differ in size"));
    }
    let band = boundary_band(masks, radius);
    if band.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !band.get(y, x) {
                continue;
            }
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let mut mag = 0.0;
            for ch in 0..c {
                let gx = (image.get(y, xp, ch) - image.get(y, xm, ch)) / 2.0;
                let gy = (image.get(yp, x, ch) - image.get(ym, x, ch)) / 2.0;
                mag += (gx * gx + gy * gy).sqrt();
            }
            total += mag / c as f64;
        }
    }
    Ok(total / band.count() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub id: usize,
    pub tokens: Vec<String>,
    pub content_fidelity: f64,
    pub spatial_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub method: String,
    pub seed: u64,
    pub kappa: Option<f64>,
    pub harmonization: Option<String>,
    pub band_radius: usize,
}

/// The four automated scores plus per-segment detail.
///
/// `aesthetic` and `preference` are kept in the schema but always `null`:
/// they need external pretrained scorers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub content_fidelity: f64,
    pub spatial_fidelity: f64,
    pub technical_quality: f64,
    pub blending: f64,
    pub aesthetic: Option<f64>,
    pub preference: Option<f64>,
    pub segments: Vec<SegmentMetrics>,
    pub metadata: ReportMetadata,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("metrics report: {e}")))
    }

    pub fn is_finite(&self) -> bool {
        [self.content_fidelity, self.spatial_fidelity, self.technical_quality, self.blending]
            .iter()
            .chain(self.segments.iter().flat_map(|s| [&s.content_fidelity, &s.spatial_fidelity]))
            .all(|v| v.is_finite())
    }
}

/// Scores `image` against its layout and segment conditions.
pub fn evaluate(
    image: &ImageGrid,
    masks: &SegmentMaskSet,
    specs: &[SegmentSpec],
    classifier: &PatternClassifier,
    token_names: &[String],
    metadata: ReportMetadata,
) -> Result<MetricsReport> {
    let content = content_terms(image, specs, classifier)?;
    let spatial = spatial_terms(image, masks, specs, classifier)?;
    let segments = specs
        .iter()
        .zip(content.iter().zip(&spatial))
        .map(|(s, (&c, &p))| SegmentMetrics {
            id: s.id,
            tokens: s.tokens.iter().map(|&t| token_names.get(t).cloned().unwrap_or_else(|| t.to_string())).collect(),
            content_fidelity: c,
            spatial_fidelity: p,
        })
        .collect();
    let report = MetricsReport {
        content_fidelity: mean(&content),
        spatial_fidelity: mean(&spatial),
        technical_quality: noise_estimate(image)?,
        blending: blending_score(image, masks, metadata.band_radius.max(1))?,
        aesthetic: None,
        preference: None,
        segments,
        metadata,
    };
    if !report.is_finite() {
        return Err(Error::NonFinite { op: "evaluate", timestep: 0 });
    }
    Ok(report)
}
