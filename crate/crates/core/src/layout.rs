//! Free-form segment layouts and the one-hot masks built from them.
//!
//! Two on-disk forms are accepted:
//!
//! * an 8-bit RGB image where every distinct color is a segment;
//! * a text grid, one row per line, whitespace-separated integers.
//!
//! ```text
//! 0 0 7 7
//! 0 0 7 7
//! 3 3 3 3
//! ```
//!
//! Raw values or colors are renumbered `1..=n` in order of first appearance
//! in a row-major scan, so the example above becomes ids `1, 2, 3`.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::imageio;

pub const MAX_SEGMENTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    height: usize,
    width: usize,
    ids: Vec<u8>,
    count: usize,
}

impl SegmentLayout {
    /// Builds a layout from arbitrary labels, renumbering them by first
    /// occurrence.
    pub fn from_labels<T: Eq + Hash + Copy>(height: usize, width: usize, labels: &[T]) -> Result<Self> {
        if height == 0 || width == 0 || labels.is_empty() {
            return Err(Error::Parse("empty layout".into()));
        }
        if labels.len() != height * width {
            return Err(Error::Parse(format!("{} labels for a {height}x{width} layout", labels.len())));
        }
        let mut seen: HashMap<T, u8> = HashMap::new();
        let mut ids = Vec::with_capacity(labels.len());
        for label in labels {
            let next = seen.len();
            let id = match seen.get(label) {
                Some(&id) => id,
                None => {
                    if next == MAX_SEGMENTS {
                        return Err(Error::Parse(format!("too many segments (more than {MAX_SEGMENTS})")));
                    }
                    let id = next as u8 + 1;
                    seen.insert(*label, id);
                    id
                }
            };
            ids.push(id);
        }
        Ok(SegmentLayout { height, width, count: seen.len(), ids })
    }

    pub fn parse_text(source: &str) -> Result<Self> {
        let mut rows: Vec<Vec<i64>> = Vec::new();
        for (lineno, line) in source.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<i64>()
                        .map_err(|_| Error::Parse(format!("line {}: `{tok}` is not an integer", lineno + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Parse(format!(
                        "ragged grid: line {} has {} columns, expected {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse("empty layout".into()));
        }
        let (h, w) = (rows.len(), rows[0].len());
        let flat: Vec<i64> = rows.into_iter().flatten().collect();
        Self::from_labels(h, w, &flat)
    }

    /// Layout from packed 8-bit RGB pixels; each distinct color is a segment.
    pub fn from_rgb(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Parse("RGB buffer does not match dimensions".into()));
        }
        let colors: Vec<[u8; 3]> = rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::from_labels(height, width, &colors)
    }

    /// Reads a `.png` layout image or a text grid (any other extension).
    pub fn load(path: &Path) -> Result<Self> {
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            let (h, w, rgb) = imageio::read_rgb8(path)?;
            Self::from_rgb(h, w, &rgb)
        } else {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(path.display().to_string(), format!("cannot read layout: {e}")))?;
            Self::parse_text(&text)
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn segment_count(&self) -> usize {
        self.count
    }

    /// Ids `1..=n`, one per pixel, row-major.
    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn id_at(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.ids.chunks_exact(self.width) {
            let line: Vec<String> = row.iter().map(|id| id.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Renders each id with a fixed palette color.
    pub fn to_rgb(&self) -> Vec<u8> {
        self.ids.iter().flat_map(|&id| PALETTE[(id as usize - 1) % PALETTE.len()]).collect()
    }
}

const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [0, 0, 128],
];

/// One binary mask per segment; together they partition the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMaskSet {
    masks: Vec<Mask>,
}

impl SegmentMaskSet {
    /// Wraps externally built masks after checking the one-hot partition.
    pub fn new(masks: Vec<Mask>) -> Result<Self> {
        let set = SegmentMaskSet { masks };
        set.validate()?;
        Ok(set)
    }

    pub fn from_layout(layout: &SegmentLayout) -> Result<Self> {
        build_masks(layout)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.masks.first() else {
            return Err(Error::Validation("no segments".into()));
        };
        let (h, w) = (first.height(), first.width());
        if self.masks.iter().any(|m| m.height() != h || m.width() != w) {
            return Err(Error::Validation("masks differ in size".into()));
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::Validation(format!("segment {} is empty", i + 1)));
            }
        }
        for p in 0..h * w {
            let sum: u32 = self.masks.iter().map(|m| m.data()[p] as u32).sum();
            if sum != 1 {
                return Err(Error::Validation(format!(
                    "pixel ({}, {}) is covered by {sum} segments",
                    p / w,
                    p % w
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn height(&self) -> usize {
        self.masks[0].height()
    }

    pub fn width(&self) -> usize {
        self.masks[0].width()
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    /// Mask of segment `index` (0-based).
    pub fn mask(&self, index: usize) -> &Mask {
        &self.masks[index]
    }

    /// 0-based segment index per pixel.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.height() * self.width()];
        for (i, m) in self.masks.iter().enumerate() {
            for (p, &v) in m.data().iter().enumerate() {
                if v != 0 {
                    labels[p] = i;
                }
            }
        }
        labels
    }

    /// A copy with segment order permuted: `order[k]` is the old index of
    /// the new segment `k`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let masks = order.iter().map(|&i| self.masks[i].clone()).collect();
        Self::new(masks)
    }
}

pub fn build_masks(layout: &SegmentLayout) -> Result<SegmentMaskSet> {
    let masks = (1..=layout.segment_count() as u8)
        .map(|id| Mask::new(layout.height, layout.width, layout.ids.iter().map(|&v| (v == id) as u8).collect()))
        .collect::<Result<Vec<_>>>()?;
    SegmentMaskSet::new(masks)
}

/// Pixels within Chebyshev distance `radius` of a pixel from another
/// segment.
pub fn boundary_band(masks: &SegmentMaskSet, radius: usize) -> Mask {
    let (h, w) = (masks.height(), masks.width());
    let labels = masks.labels();
    let r = radius as isize;
    Mask::from_fn(h, w, |y, x| {
        let own = labels[y * w + x];
        let (y0, y1) = ((y as isize - r).max(0) as usize, (y + radius).min(h - 1));
        let (x0, x1) = ((x as isize - r).max(0) as usize, (x + radius).min(w - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| labels[yy * w + xx] != own))
    })
}

/// Conditioning attached to one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpec {
    /// 1-based segment id, matching the layout.
    pub id: usize,
    /// Token ids into the denoiser's vocabulary.
    pub tokens: Vec<usize>,
    pub control_map: Option<Mask>,
    pub reference_image: Option<ImageGrid>,
    /// Overrides the request-wide scaffolding image for this segment.
    pub scaffold_image: Option<ImageGrid>,
}

impl SegmentSpec {
    pub fn text(id: usize, tokens: Vec<usize>) -> Self {
        SegmentSpec { id, tokens, control_map: None, reference_image: None, scaffold_image: None }
    }

    pub fn with_control(mut self, control: Mask) -> Self {
        self.control_map = Some(control);
        self
    }

    pub fn with_reference(mut self, reference: ImageGrid) -> Self {
        self.reference_image = Some(reference);
        self
    }

    pub fn with_scaffold(mut self, scaffold: ImageGrid) -> Self {
        self.scaffold_image = Some(scaffold);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() && self.reference_image.is_none() {
            return Err(Error::Validation(format!("segment {} has neither tokens nor a reference image", self.id)));
        }
        Ok(())
    }

    /// The control map restricted to `mask`.
    pub fn clamped_control(&self, mask: &Mask) -> Option<Mask> {
        self.control_map.as_ref().map(|c| c.and(mask))
    }
}
