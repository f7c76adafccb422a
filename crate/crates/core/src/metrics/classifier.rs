//! Multi-label pattern scorer with mask-aware pooling.
//!
//! The image is zeroed outside the mask, passed through three dilated 3x3
//! convolutions with SiLU, pooled by masked mean and masked max per channel
//! and mapped to one sigmoid score per token.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{feathered_composite, DatasetConfig};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::layout::build_masks;
use crate::nn::{self, conv_backward, conv_forward, init_uniform, sigmoid, silu, silu_grad, Adam, ConvShape, Tensor, TensorTable};
use crate::par::{self, Execution};
use crate::patterns::{gen_pattern, random_assignments, random_layout, Vocabulary};
use crate::rng::RngStream;
use crate::weights;

const DILATIONS: [usize; 3] = [1, 2, 4];
const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PatternClassifier {
    hidden: usize,
    vocab: usize,
    params: TensorTable,
}

struct Forward {
    /// Lowered inputs of each convolution.
    cols: Vec<Vec<f32>>,
    /// Pre-activations of each convolution.
    pre: Vec<Vec<f32>>,
    pooled: Vec<f32>,
    argmax: Vec<usize>,
    active: Vec<usize>,
    scores: Vec<f32>,
}

impl PatternClassifier {
    pub fn init(hidden: usize, vocab: usize, rng: &RngStream) -> Result<Self> {
        if hidden == 0 || vocab == 0 {
            return Err(Error::InvalidParameter("classifier needs hidden > 0 and a vocabulary".into()));
        }
        let mut r = rng.rng();
        let mut tensors = Vec::new();
        for (l, _) in DILATIONS.iter().enumerate() {
            let in_ch = if l == 0 { IMAGE_CHANNELS } else { hidden };
            let mut w = Tensor::zeros(format!("conv{l}.weight"), vec![hidden, in_ch, 3, 3]);
            init_uniform(&mut w.data, in_ch * 9, &mut r);
            tensors.push(w);
            tensors.push(Tensor::zeros(format!("conv{l}.bias"), vec![hidden]));
        }
        let mut head = Tensor::zeros("head.weight", vec![vocab, 2 * hidden]);
        init_uniform(&mut head.data, 2 * hidden, &mut r);
        tensors.push(head);
        tensors.push(Tensor::zeros("head.bias", vec![vocab]));
        Ok(PatternClassifier { hidden, vocab, params: TensorTable::new(tensors) })
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocab
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = self.params.clone();
        t.push(Tensor::from_data("meta.classifier", vec![2], vec![self.hidden as f32, self.vocab as f32]));
        t
    }

    pub fn from_table(table: &TensorTable) -> Result<Self> {
        let meta = table
            .get("meta.classifier")
            .filter(|t| t.data.len() == 2)
            .ok_or_else(|| Error::Malformed("missing meta.classifier".into()))?;
        let (hidden, vocab) = (meta.data[0] as usize, meta.data[1] as usize);
        let shell = Self::init(hidden, vocab, &RngStream::new(0, "shape", 0, 0))?;
        let mut tensors = Vec::new();
        for t in shell.params.tensors() {
            let found = table.require(&t.name, &t.dims)?;
            if found.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Malformed(format!("tensor {} holds non-finite values", t.name)));
            }
            tensors.push(found.clone());
        }
        Ok(PatternClassifier { hidden, vocab, params: TensorTable::new(tensors) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, &self.to_table())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&weights::load(path)?)
    }

    fn p(&self, i: usize) -> &[f32] {
        &self.params.tensors()[i].data
    }

    fn forward(&self, image: &ImageGrid, mask: &Mask) -> Forward {
        let (h, w, _) = image.shape();
        let hw = h * w;
        let chw = image.to_chw();
        let mut x: Vec<f32> = chw.iter().enumerate().map(|(i, &v)| if mask.data()[i % hw] != 0 { v } else { 0.0 }).collect();
        let mut cols = Vec::new();
        let mut pre = Vec::new();
        for (l, &d) in DILATIONS.iter().enumerate() {
            let in_ch = if l == 0 { IMAGE_CHANNELS } else { self.hidden };
            let s = ConvShape { in_ch, out_ch: self.hidden, dilation: d, height: h, width: w };
            let (z, c) = conv_forward(self.p(2 * l), self.p(2 * l + 1), &x, &s);
            x = z.iter().map(|&v| silu(v)).collect();
            cols.push(c);
            pre.push(z);
        }
        let active: Vec<usize> = (0..hw).filter(|&p| mask.data()[p] != 0).collect();
        let n = active.len().max(1) as f32;
        let mut pooled = vec![0.0; 2 * self.hidden];
        let mut argmax = vec![0; self.hidden];
        for c in 0..self.hidden {
            let plane = &x[c * hw..(c + 1) * hw];
            let mut best = (f32::NEG_INFINITY, 0);
            let mut sum = 0.0;
            for &p in &active {
                sum += plane[p];
                if plane[p] > best.0 {
                    best = (plane[p], p);
                }
            }
            pooled[c] = sum / n;
            pooled[self.hidden + c] = if active.is_empty() { 0.0 } else { best.0 };
            argmax[c] = best.1;
        }
        let k = 2 * DILATIONS.len();
        let scores = nn::linear(self.p(k), Some(self.p(k + 1)), &pooled, self.vocab).into_iter().map(sigmoid).collect();
        Forward { cols, pre, pooled, argmax, active, scores }
    }

    /// Per-token scores in `[0, 1]` for the whole image.
    pub fn scores(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        self.scores_masked(image, &Mask::full(image.height(), image.width()))
    }

    /// Per-token scores for the region selected by `mask`.
    pub fn scores_masked(&self, image: &ImageGrid, mask: &Mask) -> Result<Vec<f64>> {
        if image.channels() != IMAGE_CHANNELS {
            return Err(Error::shape("PatternClassifier", "expected a 3-channel image"));
        }
        mask.check_matches(image, "PatternClassifier")?;
        if mask.is_empty() {
            return Err(Error::InvalidParameter("cannot score an empty region".into()));
        }
        Ok(self.forward(image, mask).scores.into_iter().map(f64::from).collect())
    }

    /// Binary cross-entropy of one example and its gradient.
    fn item_gradient(&self, image: &ImageGrid, mask: &Mask, target: &[f32]) -> (f64, TensorTable) {
        let (h, w, _) = image.shape();
        let hw = h * w;
        let f = self.forward(image, mask);
        let v = self.vocab as f32;
        let mut loss = 0.0f64;
        let mut dlogit = vec![0.0; self.vocab];
        for k in 0..self.vocab {
            let s = f.scores[k].clamp(1e-7, 1.0 - 1e-7);
            loss -= (target[k] * s.ln() + (1.0 - target[k]) * (1.0 - s).ln()) as f64;
            dlogit[k] = (f.scores[k] - target[k]) / v;
        }
        let mut grads = self.params.zeros_like();
        let g = grads.tensors_mut();
        let k = 2 * DILATIONS.len();
        let (lo, hi) = g.split_at_mut(k + 1);
        let dpool = nn::linear_backward(self.p(k), &f.pooled, &dlogit, &mut lo[k].data, Some(&mut hi[0].data));

        let n = f.active.len().max(1) as f32;
        let mut dx = vec![0.0f32; self.hidden * hw];
        for c in 0..self.hidden {
            for &p in &f.active {
                dx[c * hw + p] += dpool[c] / n;
            }
            if !f.active.is_empty() {
                dx[c * hw + f.argmax[c]] += dpool[self.hidden + c];
            }
        }
        for l in (0..DILATIONS.len()).rev() {
            let dz: Vec<f32> = dx.iter().zip(&f.pre[l]).map(|(d, &z)| d * silu_grad(z)).collect();
            let in_ch = if l == 0 { IMAGE_CHANNELS } else { self.hidden };
            let s = ConvShape { in_ch, out_ch: self.hidden, dilation: DILATIONS[l], height: h, width: w };
            let (lo, hi) = g.split_at_mut(2 * l + 1);
            match conv_backward(self.p(2 * l), &f.cols[l], &dz, &s, &mut lo[2 * l].data, &mut hi[0].data, l > 0) {
                Some(d) => dx = d,
                None => break,
            }
        }
        (loss / self.vocab as f64, grads)
    }
}

/// One classifier training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledRegion {
    pub image: ImageGrid,
    pub mask: Mask,
    pub target: Vec<f32>,
}

/// Example `index` of the classifier stream: single patterns, whole
/// composites and single regions of composites, some with added noise.
pub fn classifier_sample(cfg: &DatasetConfig, vocab: &Vocabulary, index: u64, rng: &RngStream) -> Result<LabelledRegion> {
    let mut r = rng.fork("classifier-sample", index, 0).rng();
    let patterns = rng.fork("classifier-pattern", index, 0);
    let (h, w, v) = (cfg.height, cfg.width, vocab.len());
    let mut target = vec![0.0f32; v];
    let u: f64 = r.random();
    let (mut image, mask) = if u < 0.3 || v < 2 {
        let tok = r.random_range(0..v);
        target[tok] = 1.0;
        (gen_pattern(vocab.get(tok)?, h, w, &patterns), Mask::full(h, w))
    } else {
        let layout = random_layout(h, w, &mut r);
        let toks: Vec<usize> = random_assignments(&layout, v, &mut r).into_values().collect();
        let feather = if r.random::<bool>() { cfg.feather } else { 0 };
        let image = feathered_composite(&layout, &toks, vocab, feather, &patterns)?;
        if u < 0.6 {
            toks.iter().for_each(|&t| target[t] = 1.0);
            (image, Mask::full(h, w))
        } else {
            let k = r.random_range(0..toks.len());
            target[toks[k]] = 1.0;
            (image, build_masks(&layout)?.mask(k).clone())
        }
    };
    if r.random::<f64>() < 0.5 {
        let sigma = r.random_range(0.0..0.15);
        for x in image.data_mut() {
            *x += sigma * r.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(LabelledRegion { image, mask, target })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Fraction of held-out `(example, token)` decisions correct at 0.5.
    pub holdout_accuracy: f64,
}

/// Held-out per-token accuracy at threshold 0.5.
pub fn holdout_accuracy(classifier: &PatternClassifier, examples: &[LabelledRegion]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let scores = par::map(Execution::Parallel, examples, |ex| classifier.scores_masked(&ex.image, &ex.mask));
    for (ex, s) in examples.iter().zip(scores) {
        for (score, &t) in s?.iter().zip(&ex.target) {
            correct += ((*score >= 0.5) == (t > 0.5)) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Trains on the procedural stream and checks held-out accuracy against
/// the configured floor.
pub fn train_classifier(
    cfg: &DatasetConfig,
    rng: &RngStream,
    mut progress: impl FnMut(usize, f64),
) -> Result<(PatternClassifier, ClassifierReport)> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let c = &cfg.classifier;
    let mut model = PatternClassifier::init(c.hidden, vocab.len(), &rng.fork("classifier-init", 0, 0))?;
    let train = rng.fork("classifier-train", 0, 0);
    let n = c.samples_per_token * vocab.len();
    let steps = (c.epochs * n).div_ceil(c.batch_size);
    let mut adam = Adam::new(model.params(), c.learning_rate);
    let mut window = (0.0, 0usize);
    let mut final_loss = f64::NAN;
    for step in 0..steps {
        let idx: Vec<u64> = (0..c.batch_size).map(|j| ((step * c.batch_size + j) % n) as u64).collect();
        let examples: Vec<LabelledRegion> = idx.iter().map(|&i| classifier_sample(cfg, &vocab, i, &train)).collect::<Result<_>>()?;
        let results = par::map(Execution::Parallel, &examples, |ex| model.item_gradient(&ex.image, &ex.mask, &ex.target));
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.add_assign(g);
        }
        grads.scale(1.0 / examples.len() as f32);
        loss /= examples.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!("classifier loss diverged at step {step}")));
        }
        let lr_scale = 0.5 * (1.0 + (std::f32::consts::PI * step as f32 / steps as f32).cos()) + 0.02;
        adam.step(&mut model.params, &grads, lr_scale);
        window.0 += loss;
        window.1 += 1;
        if window.1 == 50 || step + 1 == steps {
            final_loss = window.0 / window.1 as f64;
            progress(step + 1, final_loss);
            window = (0.0, 0);
        }
    }
    let holdout_stream = rng.fork("classifier-holdout", 0, 0);
    let holdout: Vec<LabelledRegion> = (0..(c.holdout_per_token * vocab.len()) as u64)
        .map(|i| classifier_sample(cfg, &vocab, i, &holdout_stream))
        .collect::<Result<_>>()?;
    let accuracy = holdout_accuracy(&model, &holdout)?;
    if accuracy < c.min_accuracy {
        return Err(Error::Training(format!(
            "classifier held-out accuracy {accuracy:.4} below the required {:.2}",
            c.min_accuracy
        )));
    }
    Ok((model, ClassifierReport { steps, final_loss, holdout_accuracy: accuracy }))
}

impl PatternClassifier {
    pub fn params(&self) -> &TensorTable {
        &self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PatternClassifier {
        let mut m = PatternClassifier::init(6, 4, &RngStream::new(1, "c", 0, 0)).unwrap();
        let mut r = RngStream::new(2, "c", 0, 0).rng();
        for t in m.params.tensors_mut() {
            for v in &mut t.data {
                *v += r.random_range(-0.1..0.1);
            }
        }
        m
    }

    #[test]
    fn full_mask_equals_unmasked() {
        let m = small();
        let img = RngStream::new(3, "img", 0, 0).normal_grid(7, 9, 3);
        assert_eq!(m.scores(&img).unwrap(), m.scores_masked(&img, &Mask::full(7, 9)).unwrap());
        assert!(m.scores(&img).unwrap().iter().all(|s| (0.0..=1.0).contains(s)));
        assert!(m.scores_masked(&img, &Mask::empty(7, 9)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = small();
        let img = RngStream::new(4, "img", 0, 0).normal_grid(6, 7, 3);
        let mask = Mask::from_fn(6, 7, |y, x| x + y > 3);
        let target = [1.0, 0.0, 1.0, 0.0];
        let (_, grads) = m.item_gradient(&img, &mask, &target);
        for (ti, t) in m.params.tensors().iter().enumerate() {
            for &i in &[0, t.data.len() / 3, t.data.len() - 1] {
                let d = 1e-2f32;
                let mut a = m.clone();
                a.params.tensors_mut()[ti].data[i] += d;
                let mut b = m.clone();
                b.params.tensors_mut()[ti].data[i] -= d;
                let numeric =
                    (a.item_gradient(&img, &mask, &target).0 - b.item_gradient(&img, &mask, &target).0) / (2.0 * d as f64);
                let analytic = grads.tensors()[ti].data[i] as f64;
                assert!(
                    (numeric - analytic).abs() < 1e-3 + 0.05 * numeric.abs().max(analytic.abs()),
                    "{}[{i}] numeric {numeric} analytic {analytic}",
                    t.name
                );
            }
        }
    }

    #[test]
    fn table_round_trip() {
        let m = small();
        assert_eq!(PatternClassifier::from_table(&m.to_table()).unwrap(), m);
        let mut t = m.to_table();
        t.tensors_mut()[0].data[0] = f32::INFINITY;
        assert!(PatternClassifier::from_table(&t).is_err());
    }
}
