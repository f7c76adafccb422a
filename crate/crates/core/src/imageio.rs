//! PNG encoding for grids, layouts and control maps.
//!
//! Grid values map to 8-bit as `round((clamp(v, -1, 1) + 1) / 2 * 255)`;
//! decoding uses `v = byte / 255 * 2 - 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::layout::SegmentLayout;

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), message: message.to_string() }
}

/// Decodes any 8-bit-normalisable PNG into packed RGB.
pub fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| image_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.line_size * h];
    let rows = buf.chunks_exact(info.line_size);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => rows.flat_map(|r| r[..w * 3].to_vec()).collect(),
        png::ColorType::Rgba => rows.flat_map(|r| r[..w * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>()).collect(),
        png::ColorType::Grayscale => rows.flat_map(|r| r[..w].iter().flat_map(|&g| [g, g, g]).collect::<Vec<_>>()).collect(),
        png::ColorType::GrayscaleAlpha => {
            rows.flat_map(|r| r[..w * 2].chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect::<Vec<_>>()).collect()
        }
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(image_err(path, "empty image"));
    }
    Ok((h, w, rgb))
}

pub fn encode_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.write_image_data(rgb).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

pub fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let bytes = encode_rgb8(width, height, rgb)?;
    let mut file = BufWriter::new(File::create(path)?);
    std::io::Write::write_all(&mut file, &bytes)?;
    Ok(())
}

#[inline]
pub fn encode_value(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round()) as u8
}

#[inline]
pub fn decode_value(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// 8-bit RGB bytes of a 1- or 3-channel grid.
pub fn grid_to_rgb8(grid: &ImageGrid) -> Vec<u8> {
    let c = grid.channels();
    (0..grid.pixels())
        .flat_map(|p| {
            let px = grid.pixel(p);
            if c >= 3 {
                [encode_value(px[0]), encode_value(px[1]), encode_value(px[2])]
            } else {
                let g = encode_value(px[0]);
                [g, g, g]
            }
        })
        .collect()
}

pub fn encode_grid_png(grid: &ImageGrid) -> Result<Vec<u8>> {
    encode_rgb8(grid.width(), grid.height(), &grid_to_rgb8(grid))
}

pub fn write_grid_png(path: &Path, grid: &ImageGrid) -> Result<()> {
    write_rgb8(path, grid.width(), grid.height(), &grid_to_rgb8(grid))
}

pub fn read_grid_png(path: &Path) -> Result<ImageGrid> {
    let (h, w, rgb) = read_rgb8(path)?;
    ImageGrid::from_vec(h, w, 3, rgb.into_iter().map(decode_value).collect())
}

/// Reads a `{0,1}` control map: a PNG (any non-black pixel is set) or a
/// text grid of zeros and ones.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let (h, w, rgb) = read_rgb8(path)?;
        Mask::new(h, w, rgb.chunks_exact(3).map(|p| (p.iter().any(|&v| v > 127)) as u8).collect())
    } else {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<Vec<u8>> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let row = line
                .split_whitespace()
                .map(|t| match t {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    _ => Err(Error::Parse(format!("{}: control values must be 0 or 1, got `{t}`", path.display()))),
                })
                .collect::<Result<Vec<_>>>()?;
            if rows.first().is_some_and(|r| r.len() != row.len()) {
                return Err(Error::Parse(format!("{}: ragged control map", path.display())));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse(format!("{}: empty control map", path.display())));
        }
        let (h, w) = (rows.len(), rows[0].len());
        Mask::new(h, w, rows.concat())
    }
}

pub fn write_layout_png(path: &Path, layout: &SegmentLayout) -> Result<()> {
    write_rgb8(path, layout.width(), layout.height(), &layout.to_rgb())
}

/// Tiles equally sized grids into one image: `rows` of `cols` tiles each,
/// separated by a one-pixel gap.
pub fn tile_grids(tiles: &[Vec<&ImageGrid>]) -> Option<ImageGrid> {
    let first = tiles.iter().flatten().next()?;
    let (h, w, _) = first.shape();
    let cols = tiles.iter().map(Vec::len).max()?;
    let (th, tw) = (tiles.len() * (h + 1) - 1, cols * (w + 1) - 1);
    let mut out = ImageGrid::filled(th, tw, 3, -1.0);
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let v = tile.get(y, x, ch.min(tile.channels() - 1));
                        out.set(r * (h + 1) + y, c * (w + 1) + x, ch, v);
                    }
                }
            }
        }
    }
    Some(out)
}
