//! A small convolutional noise predictor for the pattern domain.
//!
//! ```text
//! e      = silu(W_t temb(t) + W_c multihot + b)
//! h      = conv_in([x_t, control])
//! block: h += conv(silu(h * (1 + gamma(e)) + beta(e)))
//! eps    = conv_out(silu(h))
//! ```
//!
//! The control channel carries `2c - 1` for a present map and zeros when
//! absent. Every convolution is 3x3 "same", so any image size works.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{training_sample, DatasetConfig};
use crate::denoiser::{check_condition, Condition, Denoiser};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask, ValueRange};
use crate::nn::{self, conv_backward, conv_forward, init_uniform, silu, silu_grad, Adam, ConvShape, Tensor, TensorTable};
use crate::par::{self, Execution};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::weights;

const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyArchitecture {
    pub hidden: usize,
    pub embed: usize,
    pub time_embed: usize,
    pub vocab: usize,
    pub dilations: Vec<usize>,
    pub accepts_control: bool,
}

impl ToyArchitecture {
    pub fn from_config(cfg: &DatasetConfig) -> Self {
        let d = &cfg.denoiser;
        ToyArchitecture {
            hidden: d.hidden,
            embed: d.embed,
            time_embed: d.time_embed,
            vocab: cfg.vocabulary.len(),
            dilations: d.dilations.clone(),
            accepts_control: d.accepts_control,
        }
    }

    fn in_channels(&self) -> usize {
        IMAGE_CHANNELS + self.accepts_control as usize
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (hd, e) = (self.hidden, self.embed);
        let mut out = vec![
            ("emb.time.weight".to_string(), vec![e, self.time_embed]),
            ("emb.token.weight".to_string(), vec![e, self.vocab]),
            ("emb.bias".to_string(), vec![e]),
            ("conv_in.weight".to_string(), vec![hd, self.in_channels(), 3, 3]),
            ("conv_in.bias".to_string(), vec![hd]),
        ];
        for l in 0..self.dilations.len() {
            out.push((format!("block{l}.film.weight"), vec![2 * hd, e]));
            out.push((format!("block{l}.film.bias"), vec![2 * hd]));
            out.push((format!("block{l}.conv.weight"), vec![hd, hd, 3, 3]));
            out.push((format!("block{l}.conv.bias"), vec![hd]));
        }
        out.push(("conv_out.weight".to_string(), vec![IMAGE_CHANNELS, hd, 3, 3]));
        out.push(("conv_out.bias".to_string(), vec![IMAGE_CHANNELS]));
        out
    }

    fn encode(&self) -> Vec<f32> {
        let mut v = vec![
            self.hidden as f32,
            self.embed as f32,
            self.time_embed as f32,
            self.vocab as f32,
            self.accepts_control as u8 as f32,
        ];
        v.extend(self.dilations.iter().map(|&d| d as f32));
        v
    }

    fn decode(v: &[f32]) -> Result<Self> {
        let as_usize = |x: f32| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e6 {
                Ok(x as usize)
            } else {
                Err(Error::Malformed(format!("bad architecture field {x}")))
            }
        };
        if v.len() < 5 {
            return Err(Error::Malformed("architecture descriptor too short".into()));
        }
        let arch = ToyArchitecture {
            hidden: as_usize(v[0])?,
            embed: as_usize(v[1])?,
            time_embed: as_usize(v[2])?,
            vocab: as_usize(v[3])?,
            accepts_control: as_usize(v[4])? != 0,
            dilations: v[5..].iter().map(|&x| as_usize(x)).collect::<Result<_>>()?,
        };
        if arch.hidden == 0 || arch.embed == 0 || !arch.time_embed.is_multiple_of(2) || arch.dilations.contains(&0) {
            return Err(Error::Malformed("inconsistent architecture descriptor".into()));
        }
        Ok(arch)
    }
}

// Parameter slots in table order.
const EMB_T: usize = 0;
const EMB_C: usize = 1;
const EMB_B: usize = 2;
const CIN_W: usize = 3;
const CIN_B: usize = 4;
const fn film_w(l: usize) -> usize {
    5 + 4 * l
}
const fn conv_w(l: usize) -> usize {
    7 + 4 * l
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    arch: ToyArchitecture,
    params: TensorTable,
    cond_dropout: f64,
}

struct BlockCache {
    h_in: Vec<f32>,
    film: Vec<f32>,
    a: Vec<f32>,
    cols: Vec<f32>,
}

struct Forward {
    out: Vec<f32>,
    temb: Vec<f32>,
    e0: Vec<f32>,
    e: Vec<f32>,
    in_cols: Vec<f32>,
    blocks: Vec<BlockCache>,
    h_last: Vec<f32>,
    out_cols: Vec<f32>,
}

/// One supervised example in network layout (channel-major).
struct Item {
    x_t: Vec<f32>,
    control: Option<Vec<f32>>,
    multihot: Vec<f32>,
    t: usize,
    eps: Vec<f32>,
}

impl ToyDenoiser {
    /// Fresh weights; the output convolution starts at zero.
    pub fn init(arch: ToyArchitecture, rng: &RngStream) -> Result<Self> {
        if arch.hidden == 0 || arch.embed == 0 || arch.time_embed < 2 || !arch.time_embed.is_multiple_of(2) {
            return Err(Error::InvalidParameter("hidden, embed and an even time_embed must be positive".into()));
        }
        let mut r = rng.rng();
        let mut tensors = Vec::new();
        for (name, dims) in arch.shapes() {
            let mut t = Tensor::zeros(name.clone(), dims.clone());
            let fan_in: usize = dims[1..].iter().product();
            if name.ends_with(".weight") && !name.starts_with("conv_out") && fan_in > 0 {
                init_uniform(&mut t.data, fan_in, &mut r);
                if name.contains(".film.") {
                    t.data.iter_mut().for_each(|v| *v *= 0.1);
                }
            }
            tensors.push(t);
        }
        Ok(ToyDenoiser { arch, params: TensorTable::new(tensors), cond_dropout: 0.0 })
    }

    pub fn architecture(&self) -> &ToyArchitecture {
        &self.arch
    }

    pub fn cond_dropout(&self) -> f64 {
        self.cond_dropout
    }

    pub fn params(&self) -> &TensorTable {
        &self.params
    }

    /// Parameters plus the `meta.*` descriptor tensors.
    pub fn to_table(&self) -> TensorTable {
        let mut table = self.params.clone();
        let arch = self.arch.encode();
        table.push(Tensor::from_data("meta.arch", vec![arch.len()], arch));
        table.push(Tensor::from_data("meta.cond_dropout", vec![1], vec![self.cond_dropout as f32]));
        table
    }

    pub fn from_table(table: &TensorTable) -> Result<Self> {
        let meta = table.get("meta.arch").ok_or_else(|| Error::Malformed("missing meta.arch".into()))?;
        let arch = ToyArchitecture::decode(&meta.data)?;
        let cond_dropout = table.get("meta.cond_dropout").and_then(|t| t.data.first()).copied().unwrap_or(0.0) as f64;
        let mut tensors = Vec::new();
        for (name, dims) in arch.shapes() {
            let t = table.require(&name, &dims)?;
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Malformed(format!("tensor {name} holds non-finite values")));
            }
            tensors.push(t.clone());
        }
        let expected = tensors.len() + 2;
        if table.tensors().len() != expected {
            return Err(Error::Malformed(format!("expected {expected} tensors, found {}", table.tensors().len())));
        }
        Ok(ToyDenoiser { arch, params: TensorTable::new(tensors), cond_dropout })
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

    fn forward(&self, x_t: &[f32], control: Option<&[f32]>, t: usize, multihot: &[f32], h: usize, w: usize) -> Forward {
        let a = &self.arch;
        let hw = h * w;
        let shape = |in_ch, out_ch, dilation| ConvShape { in_ch, out_ch, dilation, height: h, width: w };
        let temb = nn::timestep_embedding(t, a.time_embed);
        let mut e0 = nn::linear(self.p(EMB_T), Some(self.p(EMB_B)), &temb, a.embed);
        if a.vocab > 0 {
            let tok = nn::linear(self.p(EMB_C), None, multihot, a.embed);
            e0.iter_mut().zip(tok).for_each(|(x, y)| *x += y);
        }
        let e: Vec<f32> = e0.iter().map(|&v| silu(v)).collect();

        let mut input = Vec::with_capacity(a.in_channels() * hw);
        input.extend_from_slice(x_t);
        if a.accepts_control {
            match control {
                Some(c) => input.extend(c.iter().map(|&v| 2.0 * v - 1.0)),
                None => input.resize(a.in_channels() * hw, 0.0),
            }
        }
        let (mut hcur, in_cols) = conv_forward(self.p(CIN_W), self.p(CIN_B), &input, &shape(a.in_channels(), a.hidden, 1));

        let mut blocks = Vec::with_capacity(a.dilations.len());
        for (l, &d) in a.dilations.iter().enumerate() {
            let film = nn::linear(self.p(film_w(l)), Some(self.p(film_w(l) + 1)), &e, 2 * a.hidden);
            let mut pre = vec![0.0; a.hidden * hw];
            for c in 0..a.hidden {
                let (g, b) = (1.0 + film[c], film[a.hidden + c]);
                for p in 0..hw {
                    pre[c * hw + p] = hcur[c * hw + p] * g + b;
                }
            }
            let u: Vec<f32> = pre.iter().map(|&v| silu(v)).collect();
            let (v, cols) = conv_forward(self.p(conv_w(l)), self.p(conv_w(l) + 1), &u, &shape(a.hidden, a.hidden, d));
            let h_in = hcur.clone();
            hcur.iter_mut().zip(&v).for_each(|(x, y)| *x += y);
            blocks.push(BlockCache { h_in, film, a: pre, cols });
        }
        let u_out: Vec<f32> = hcur.iter().map(|&v| silu(v)).collect();
        let n = a.dilations.len();
        let (out, out_cols) = conv_forward(self.p(film_w(n)), self.p(film_w(n) + 1), &u_out, &shape(a.hidden, IMAGE_CHANNELS, 1));
        Forward { out, temb, e0, e, in_cols, blocks, h_last: hcur, out_cols }
    }

    /// Accumulates parameter gradients for `d out` into `grads`.
    fn backward(&self, f: &Forward, dout: &[f32], multihot: &[f32], h: usize, w: usize, grads: &mut TensorTable) {
        let a = &self.arch;
        let hw = h * w;
        let n = a.dilations.len();
        let shape = |in_ch, out_ch, dilation| ConvShape { in_ch, out_ch, dilation, height: h, width: w };
        let g = grads.tensors_mut();
        // Weight slot `i` and its bias at `i + 1`, borrowed together.
        fn pair(g: &mut [Tensor], i: usize) -> (&mut [f32], &mut [f32]) {
            let (lo, hi) = g.split_at_mut(i + 1);
            (&mut lo[i].data, &mut hi[0].data)
        }

        let (gw, gb) = pair(g, film_w(n));
        let du = conv_backward(self.p(film_w(n)), &f.out_cols, dout, &shape(a.hidden, IMAGE_CHANNELS, 1), gw, gb, true)
            .expect("input grad requested");
        let mut dh: Vec<f32> = du.iter().zip(&f.h_last).map(|(d, &x)| d * silu_grad(x)).collect();
        let mut de = vec![0.0f32; a.embed];

        for l in (0..n).rev() {
            let b = &f.blocks[l];
            let (gw, gb) = pair(g, conv_w(l));
            let du = conv_backward(self.p(conv_w(l)), &b.cols, &dh, &shape(a.hidden, a.hidden, a.dilations[l]), gw, gb, true)
                .expect("input grad requested");
            let mut dfilm = vec![0.0f32; 2 * a.hidden];
            for c in 0..a.hidden {
                let gain = 1.0 + b.film[c];
                let (mut dg, mut db) = (0.0f32, 0.0f32);
                for p in 0..hw {
                    let i = c * hw + p;
                    let da = du[i] * silu_grad(b.a[i]);
                    dg += da * b.h_in[i];
                    db += da;
                    dh[i] += da * gain;
                }
                dfilm[c] = dg;
                dfilm[a.hidden + c] = db;
            }
            let (fw, fb) = pair(g, film_w(l));
            let d = nn::linear_backward(self.p(film_w(l)), &f.e, &dfilm, fw, Some(fb));
            de.iter_mut().zip(d).for_each(|(x, y)| *x += y);
        }

        let (gw, gb) = pair(g, CIN_W);
        conv_backward(self.p(CIN_W), &f.in_cols, &dh, &shape(a.in_channels(), a.hidden, 1), gw, gb, false);
        debug_assert_eq!(CIN_B, CIN_W + 1);

        let de0: Vec<f32> = de.iter().zip(&f.e0).map(|(d, &x)| d * silu_grad(x)).collect();
        nn::linear_backward(self.p(EMB_T), &f.temb, &de0, &mut g[EMB_T].data, None);
        nn::linear_backward(self.p(EMB_C), multihot, &de0, &mut g[EMB_C].data, None);
        g[EMB_B].data.iter_mut().zip(&de0).for_each(|(x, y)| *x += y);
    }

    /// Mean squared error of one item and its parameter gradient.
    fn item_gradient(&self, item: &Item, h: usize, w: usize) -> (f64, TensorTable) {
        let f = self.forward(&item.x_t, item.control.as_deref(), item.t, &item.multihot, h, w);
        let n = f.out.len() as f32;
        let mut loss = 0.0f64;
        let dout: Vec<f32> = f
            .out
            .iter()
            .zip(&item.eps)
            .map(|(p, e)| {
                let d = p - e;
                loss += (d * d) as f64;
                2.0 * d / n
            })
            .collect();
        let mut grads = self.params.zeros_like();
        self.backward(&f, &dout, &item.multihot, h, w, &mut grads);
        (loss / n as f64, grads)
    }
}

impl Denoiser for ToyDenoiser {
    fn eps_predict(&self, x_t: &ImageGrid, t: usize, cond: &Condition) -> Result<ImageGrid> {
        check_condition(self, x_t, cond)?;
        let (h, w, c) = x_t.shape();
        if c != IMAGE_CHANNELS {
            return Err(Error::shape("ToyDenoiser::eps_predict", format!("expected 3 channels, got {c}")));
        }
        let multihot = if cond.multihot().is_empty() { vec![0.0; self.arch.vocab] } else { cond.multihot().to_vec() };
        let control: Option<Vec<f32>> = cond.control().map(|m| m.data().iter().map(|&v| v as f32).collect());
        let f = self.forward(&x_t.to_chw(), control.as_deref(), t, &multihot, h, w);
        ImageGrid::from_chw(h, w, IMAGE_CHANNELS, &f.out)?
            .with_range(ValueRange::Diffusion)
            .ensure_finite("ToyDenoiser::eps_predict", t)
    }

    fn accepts_control(&self) -> bool {
        self.arch.accepts_control
    }

    fn vocabulary_size(&self) -> usize {
        self.arch.vocab
    }
}

/// Loss averaged over logging windows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub steps: usize,
    /// `(step, mean loss over the window ending at step)`.
    pub windows: Vec<(usize, f64)>,
}

impl TrainingLog {
    pub fn first(&self) -> Option<f64> {
        self.windows.first().map(|w| w.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.windows.last().map(|w| w.1)
    }
}

/// Optimiser settings for a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub log_every: usize,
}

fn noised_item(
    image: &ImageGrid,
    tokens: &[usize],
    control: Option<&Mask>,
    vocab: usize,
    dropout: f64,
    schedule: &NoiseSchedule,
    lane: &RngStream,
) -> Item {
    let mut r = lane.rng();
    let t = r.random_range(1..=schedule.total_steps());
    let drop = r.random::<f64>() < dropout;
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0 = image.to_chw();
    let eps: Vec<f32> = (0..x0.len()).map(|_| r.sample::<f64, _>(StandardNormal) as f32).collect();
    let x_t = x0.iter().zip(&eps).map(|(&x, &e)| (sa * x as f64 + sb * e as f64) as f32).collect();
    let mut multihot = vec![0.0; vocab];
    if !drop {
        tokens.iter().for_each(|&k| multihot[k] = 1.0);
    }
    let control = if drop { None } else { control.map(|m| m.data().iter().map(|&v| v as f32).collect()) };
    Item { x_t, control, multihot, t, eps }
}

/// Adam on the ε-matching loss over batches produced by `batch(step)`.
/// Batches are reduced in item order, so the result does not depend on
/// how the per-item work is scheduled.
fn fit<B>(
    model: &mut ToyDenoiser,
    opts: FitOptions,
    (h, w): (usize, usize),
    batch: B,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainingLog>
where
    B: Fn(usize) -> Result<Vec<Item>>,
{
    let mut adam = Adam::new(&model.params, opts.learning_rate);
    let warmup = (opts.steps / 20).max(1);
    let mut log = TrainingLog { steps: opts.steps, windows: Vec::new() };
    let mut window = (0.0, 0usize);
    for step in 0..opts.steps {
        let items = batch(step)?;
        let results = par::map(Execution::Parallel, &items, |it| model.item_gradient(it, h, w));
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.add_assign(g);
        }
        grads.scale(1.0 / items.len() as f32);
        loss /= items.len() as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Training(format!("loss diverged at step {step}")));
        }
        let frac = step as f32 / opts.steps as f32;
        let lr_scale = if step < warmup {
            (step + 1) as f32 / warmup as f32
        } else {
            0.05 + 0.95 * 0.5 * (1.0 + (std::f32::consts::PI * frac).cos())
        };
        adam.step(&mut model.params, &grads, lr_scale);
        window.0 += loss;
        window.1 += 1;
        if window.1 == opts.log_every || step + 1 == opts.steps {
            let mean = window.0 / window.1 as f64;
            log.windows.push((step + 1, mean));
            progress(step + 1, mean);
            window = (0.0, 0);
        }
    }
    Ok(log)
}

/// Trains a fresh model on the procedural stream described by `cfg`.
/// `progress` receives `(step, windowed loss)`.
pub fn train_toy_denoiser(
    cfg: &DatasetConfig,
    schedule: &NoiseSchedule,
    epochs: usize,
    rng: &RngStream,
    progress: impl FnMut(usize, f64),
) -> Result<(ToyDenoiser, TrainingLog)> {
    if epochs == 0 {
        return Err(Error::InvalidParameter("epochs must be at least 1".into()));
    }
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let d = &cfg.denoiser;
    let mut model = ToyDenoiser::init(ToyArchitecture::from_config(cfg), &rng.fork("init-weights", 0, 0))?;
    model.cond_dropout = d.cond_dropout;
    let n = cfg.epoch_len();
    let per_epoch = n.div_ceil(d.batch_size);
    let orders: Vec<Vec<usize>> = (0..epochs)
        .map(|e| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng.fork("shuffle", e as u64, 0).rng());
            order
        })
        .collect();
    let data = rng.fork("dataset", 0, 0);
    let opts = FitOptions { steps: epochs * per_epoch, batch_size: d.batch_size, learning_rate: d.learning_rate, log_every: 50 };
    let v = vocab.len();
    let batch = |step: usize| -> Result<Vec<Item>> {
        let (e, s) = (step / per_epoch, step % per_epoch);
        let chunk = &orders[e][s * d.batch_size..((s + 1) * d.batch_size).min(n)];
        chunk
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let sample = training_sample(cfg, &vocab, i as u64, &data)?;
                let lane = rng.fork("train-noise", step as u64, j as u64);
                Ok(noised_item(&sample.image, &sample.tokens, sample.control.as_ref(), v, d.cond_dropout, schedule, &lane))
            })
            .collect()
    };
    let log = fit(&mut model, opts, (cfg.height, cfg.width), batch, progress)?;
    Ok((model, log))
}

/// Fits `model` to one fixed image under a fixed token condition.
pub fn overfit_single_image(
    model: &mut ToyDenoiser,
    image: &ImageGrid,
    tokens: &[usize],
    schedule: &NoiseSchedule,
    opts: FitOptions,
    rng: &RngStream,
) -> Result<TrainingLog> {
    let v = model.arch.vocab;
    let batch = |step: usize| -> Result<Vec<Item>> {
        Ok((0..opts.batch_size)
            .map(|j| noised_item(image, tokens, None, v, 0.0, schedule, &rng.fork("overfit", step as u64, j as u64)))
            .collect())
    };
    fit(model, opts, (image.height(), image.width()), batch, |_, _| {})
}
