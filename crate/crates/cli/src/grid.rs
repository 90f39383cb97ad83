//! Labelled image grids: rows are examples, columns are pipeline stages.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use atop_tensor::Tensor;
use font8x8::{UnicodeFonts, BASIC_FONTS};

use crate::error::CliError;

const GLYPH: usize = 8;
const PAD: usize = 4;
/// Tiles are upscaled to at least this width so labels and patches stay legible.
const MIN_TILE: usize = 96;

/// One image per cell; `cells[r][c]` has shape `[C, H, W]` or `[1, C, H, W]`
/// with C of 1 or 3, all cells alike.
pub struct Grid {
    pub labels: Vec<String>,
    pub cells: Vec<Vec<Tensor<f32>>>,
}

/// Raster of the grid as RGB8 rows.
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Grid {
    pub fn render(&self) -> Result<Raster, CliError> {
        if self.cells.is_empty() || self.labels.is_empty() {
            return Err(CliError::Schema("empty selection".into()));
        }
        let first = &self.cells[0][0];
        let dims = image_dims(first)?;
        for row in &self.cells {
            if row.len() != self.labels.len() {
                return Err(CliError::Runtime(format!(
                    "grid row has {} cells for {} labels",
                    row.len(),
                    self.labels.len()
                )));
            }
            for cell in row {
                if image_dims(cell)? != dims {
                    return Err(CliError::Runtime("grid cells differ in shape".into()));
                }
            }
        }
        let (c, h, w) = dims;
        let scale = MIN_TILE.div_ceil(w).max(1);
        let (tw, th) = (w * scale, h * scale);
        let header = GLYPH + 2 * PAD;
        let cols = self.labels.len();
        let width = PAD + cols * (tw + PAD);
        let height = header + self.cells.len() * (th + PAD);
        let mut out = Raster {
            width,
            height,
            rgb: vec![255; width * height * 3],
        };
        for (j, label) in self.labels.iter().enumerate() {
            out.text(PAD + j * (tw + PAD), PAD, label, tw / GLYPH);
        }
        for (i, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                let (x0, y0) = (PAD + j * (tw + PAD), header + i * (th + PAD));
                let d = cell.data();
                for y in 0..th {
                    for x in 0..tw {
                        let (sy, sx) = (y / scale, x / scale);
                        let px = |ch: usize| to_u8(d[(ch.min(c - 1) * h + sy) * w + sx]);
                        out.put(x0 + x, y0 + y, [px(0), px(1), px(2)]);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn image_dims(t: &Tensor<f32>) -> Result<(usize, usize, usize), CliError> {
    let s = t.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(CliError::Runtime(format!("grid cell has shape {s:?}"))),
    };
    if !(c == 1 || c == 3) || h == 0 || w == 0 {
        return Err(CliError::Runtime(format!("grid cell has shape {s:?}")));
    }
    Ok((c, h, w))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Raster {
    fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&px);
    }

    /// Black 8x8 glyphs; text past `max_chars` is cut off.
    fn text(&mut self, x0: usize, y0: usize, s: &str, max_chars: usize) {
        for (k, ch) in s.chars().take(max_chars).enumerate() {
            let Some(glyph) = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')) else {
                continue;
            };
            for (gy, bits) in glyph.iter().enumerate() {
                for gx in 0..GLYPH {
                    if bits >> gx & 1 == 1 {
                        self.put(x0 + k * GLYPH + gx, y0 + gy, [0, 0, 0]);
                    }
                }
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| CliError::Runtime(format!("{}: {e}", path.display()));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.rgb).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }
}
