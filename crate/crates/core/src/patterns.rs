//! The procedural toy domain: pattern tokens, their renderers, random
//! layouts and hard-pasted ground-truth composites.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::layout::{build_masks, SegmentLayout};
use crate::rng::RngStream;

/// Per-image color jitter bound, applied to every channel.
pub const COLOR_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PatternKind {
    /// Vertical stripes; the value changes along each row.
    Stripes { period: f64 },
    Dots { period: f64, radius: f64 },
    Checker { cell: f64 },
    Plain,
    /// Sinusoidal bands along the vertical axis.
    Waves { period: f64 },
    Diagonal { period: f64 },
}

impl PatternKind {
    fn period(&self) -> f64 {
        match *self {
            PatternKind::Stripes { period }
            | PatternKind::Dots { period, .. }
            | PatternKind::Waves { period }
            | PatternKind::Diagonal { period } => period,
            PatternKind::Checker { cell } => 2.0 * cell,
            PatternKind::Plain => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternToken {
    pub id: usize,
    pub name: String,
    pub kind: PatternKind,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
}

/// Seed-dependent rendering parameters of one pattern instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternJitter {
    pub phase_x: f64,
    pub phase_y: f64,
    pub color: [f64; 3],
}

impl PatternToken {
    pub fn jitter(&self, rng: &RngStream) -> PatternJitter {
        let mut r = rng.rng();
        let p = self.kind.period();
        PatternJitter {
            phase_x: r.random_range(0.0..p),
            phase_y: r.random_range(0.0..p),
            color: [
                r.random_range(-COLOR_JITTER..=COLOR_JITTER),
                r.random_range(-COLOR_JITTER..=COLOR_JITTER),
                r.random_range(-COLOR_JITTER..=COLOR_JITTER),
            ],
        }
    }

    /// Foreground weight in `[0, 1]` at pixel `(y, x)`.
    fn coverage(&self, y: usize, x: usize, j: &PatternJitter) -> f64 {
        let (fy, fx) = (y as f64 + j.phase_y, x as f64 + j.phase_x);
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        match self.kind {
            PatternKind::Stripes { period } => on(fx.rem_euclid(period) < period / 2.0),
            PatternKind::Dots { period, radius } => {
                let dy = fy.rem_euclid(period) - period / 2.0;
                let dx = fx.rem_euclid(period) - period / 2.0;
                on(dy * dy + dx * dx <= radius * radius)
            }
            PatternKind::Checker { cell } => on(((fy / cell).floor() + (fx / cell).floor()).rem_euclid(2.0) < 1.0),
            PatternKind::Plain => 1.0,
            PatternKind::Waves { period } => 0.5 + 0.5 * (TAU * fy / period).sin(),
            PatternKind::Diagonal { period } => on((fx + fy).rem_euclid(period) < period / 2.0),
        }
    }

    pub fn render(&self, height: usize, width: usize, jitter: &PatternJitter) -> ImageGrid {
        let mut out = ImageGrid::zeros(height, width, 3);
        let fg: Vec<f64> = (0..3).map(|c| (self.foreground[c] + jitter.color[c]).clamp(-1.0, 1.0)).collect();
        let bg: Vec<f64> = (0..3).map(|c| (self.background[c] + jitter.color[c]).clamp(-1.0, 1.0)).collect();
        for y in 0..height {
            for x in 0..width {
                let a = self.coverage(y, x, jitter);
                for c in 0..3 {
                    out.set(y, x, c, bg[c] + a * (fg[c] - bg[c]));
                }
            }
        }
        out
    }
}

fn token(id: usize, name: &str, kind: PatternKind, foreground: [f64; 3], background: [f64; 3]) -> PatternToken {
    PatternToken { id, name: name.to_owned(), kind, foreground, background }
}

/// Every pattern the toy domain knows how to draw. Ids are reassigned by
/// position when a vocabulary is built from names.
pub fn catalogue() -> Vec<PatternToken> {
    vec![
        token(0, "stripes-red", PatternKind::Stripes { period: 8.0 }, [0.9, -0.75, -0.75], [-0.2, -0.85, -0.85]),
        token(1, "dots-blue", PatternKind::Dots { period: 8.0, radius: 2.5 }, [-0.75, -0.45, 0.95], [-0.8, -0.8, -0.35]),
        token(2, "checker-green", PatternKind::Checker { cell: 4.0 }, [-0.7, 0.85, -0.7], [-0.55, 0.05, -0.6]),
        token(3, "plain-yellow", PatternKind::Plain, [0.9, 0.8, -0.7], [0.9, 0.8, -0.7]),
        token(4, "waves-magenta", PatternKind::Waves { period: 10.0 }, [0.85, -0.6, 0.85], [0.1, -0.8, 0.1]),
        token(5, "diagonal-cyan", PatternKind::Diagonal { period: 8.0 }, [-0.75, 0.8, 0.9], [-0.7, -0.2, 0.0]),
        token(6, "stripes-green", PatternKind::Stripes { period: 6.0 }, [-0.6, 0.9, -0.4], [-0.9, -0.3, -0.9]),
        token(7, "plain-blue", PatternKind::Plain, [-0.8, -0.6, 0.7], [-0.8, -0.6, 0.7]),
    ]
}

pub const DEFAULT_VOCABULARY: [&str; 6] =
    ["stripes-red", "dots-blue", "checker-green", "plain-yellow", "waves-magenta", "diagonal-cyan"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<PatternToken>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_names(&DEFAULT_VOCABULARY).expect("default names are in the catalogue")
    }
}

impl Vocabulary {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let all = catalogue();
        let mut tokens = Vec::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            let name = name.as_ref();
            if tokens.iter().any(|t: &PatternToken| t.name == name) {
                return Err(Error::config("vocabulary", format!("duplicate token `{name}`")));
            }
            let mut t = all.iter().find(|t| t.name == name).cloned().ok_or_else(|| Error::UnknownToken(name.into()))?;
            t.id = id;
            tokens.push(t);
        }
        if tokens.is_empty() {
            return Err(Error::config("vocabulary", "vocabulary is empty"));
        }
        Ok(Vocabulary { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[PatternToken] {
        &self.tokens
    }

    pub fn get(&self, id: usize) -> Result<&PatternToken> {
        self.tokens.get(id).ok_or_else(|| Error::UnknownToken(format!("#{id}")))
    }

    pub fn lookup(&self, name: &str) -> Result<&PatternToken> {
        self.tokens.iter().find(|t| t.name == name).ok_or_else(|| Error::UnknownToken(name.into()))
    }

    pub fn names(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.name.clone()).collect()
    }
}

/// Renders one token with seed-jittered phase and color.
pub fn gen_pattern(token: &PatternToken, height: usize, width: usize, rng: &RngStream) -> ImageGrid {
    token.render(height, width, &token.jitter(rng))
}

/// Fills every segment with its assigned token's pattern. Segment `k`
/// (0-based) draws from `rng`'s lane shifted by `k`, so a one-segment layout
/// reproduces [`gen_pattern`] with the same stream.
pub fn gen_composite_ground_truth(
    layout: &SegmentLayout,
    assignments: &BTreeMap<usize, usize>,
    vocab: &Vocabulary,
    rng: &RngStream,
) -> Result<ImageGrid> {
    let masks = build_masks(layout)?;
    let (h, w) = (layout.height(), layout.width());
    let mut out = ImageGrid::zeros(h, w, 3);
    for (k, mask) in masks.masks().iter().enumerate() {
        let id = k + 1;
        let token_id = *assignments
            .get(&id)
            .ok_or_else(|| Error::config(format!("assignments.{id}"), format!("unassigned segment {id}")))?;
        let lane = rng.lane();
        let pattern = gen_pattern(vocab.get(token_id)?, h, w, &rng.fork(lane.purpose, lane.timestep, lane.segment + k as u64));
        out = pattern.select(mask, &out)?;
    }
    Ok(out)
}

/// Layout shapes used to build training composites and benchmark scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutFamily {
    VerticalSplit,
    HorizontalSplit,
    Quadrants,
    VerticalBands,
    HorizontalBands,
    Disk,
    Rectangle,
    Diagonal,
    LShape,
}

impl LayoutFamily {
    pub const ALL: [LayoutFamily; 9] = [
        LayoutFamily::VerticalSplit,
        LayoutFamily::HorizontalSplit,
        LayoutFamily::Quadrants,
        LayoutFamily::VerticalBands,
        LayoutFamily::HorizontalBands,
        LayoutFamily::Disk,
        LayoutFamily::Rectangle,
        LayoutFamily::Diagonal,
        LayoutFamily::LShape,
    ];

    /// Draws a layout of this family with randomized cut positions.
    pub fn sample(self, height: usize, width: usize, rng: &mut impl Rng) -> SegmentLayout {
        let (hf, wf) = (height as f64, width as f64);
        let mut frac = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let labels: Vec<u8> = match self {
            LayoutFamily::VerticalSplit => {
                let cut = (frac(0.3, 0.7) * wf) as usize;
                grid(height, width, |_, x| (x >= cut) as u8)
            }
            LayoutFamily::HorizontalSplit => {
                let cut = (frac(0.3, 0.7) * hf) as usize;
                grid(height, width, |y, _| (y >= cut) as u8)
            }
            LayoutFamily::Quadrants => {
                let (cy, cx) = ((frac(0.35, 0.65) * hf) as usize, (frac(0.35, 0.65) * wf) as usize);
                grid(height, width, |y, x| (y >= cy) as u8 * 2 + (x >= cx) as u8)
            }
            LayoutFamily::VerticalBands => {
                let a = (frac(0.25, 0.4) * wf) as usize;
                let b = (frac(0.6, 0.75) * wf) as usize;
                grid(height, width, |_, x| (x >= a) as u8 + (x >= b) as u8)
            }
            LayoutFamily::HorizontalBands => {
                let a = (frac(0.25, 0.4) * hf) as usize;
                let b = (frac(0.6, 0.75) * hf) as usize;
                grid(height, width, |y, _| (y >= a) as u8 + (y >= b) as u8)
            }
            LayoutFamily::Disk => {
                let (cy, cx) = (frac(0.35, 0.65) * hf, frac(0.35, 0.65) * wf);
                let r = frac(0.2, 0.33) * hf.min(wf);
                grid(height, width, |y, x| {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    (dy * dy + dx * dx <= r * r) as u8
                })
            }
            LayoutFamily::Rectangle => {
                let (y0, x0) = ((frac(0.1, 0.35) * hf) as usize, (frac(0.1, 0.35) * wf) as usize);
                let (y1, x1) = ((frac(0.65, 0.9) * hf) as usize, (frac(0.65, 0.9) * wf) as usize);
                grid(height, width, |y, x| (y >= y0 && y < y1 && x >= x0 && x < x1) as u8)
            }
            LayoutFamily::Diagonal => {
                let off = frac(-0.2, 0.2);
                grid(height, width, |y, x| ((y as f64 / hf) + (x as f64 / wf) > 1.0 + off) as u8)
            }
            LayoutFamily::LShape => {
                let (cy, cx) = ((frac(0.4, 0.7) * hf) as usize, (frac(0.3, 0.6) * wf) as usize);
                grid(height, width, |y, x| (y >= cy || x < cx) as u8)
            }
        };
        SegmentLayout::from_labels(height, width, &labels).expect("family layouts are well formed")
    }
}

fn grid(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect()
}

/// A layout from a uniformly chosen family.
pub fn random_layout(height: usize, width: usize, rng: &mut impl Rng) -> SegmentLayout {
    let family = LayoutFamily::ALL[rng.random_range(0..LayoutFamily::ALL.len())];
    family.sample(height, width, rng)
}

/// Distinct random tokens for each segment of `layout`.
pub fn random_assignments(layout: &SegmentLayout, vocab_len: usize, rng: &mut impl Rng) -> BTreeMap<usize, usize> {
    let mut pool: Vec<usize> = (0..vocab_len).collect();
    let mut out = BTreeMap::new();
    for id in 1..=layout.segment_count() {
        if pool.is_empty() {
            pool = (0..vocab_len).collect();
        }
        let pick = pool.swap_remove(rng.random_range(0..pool.len()));
        out.insert(id, pick);
    }
    out
}
