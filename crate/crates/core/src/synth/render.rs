use std::path::Path;

use super::glyphs::{Glyph, GlyphAtlas, ALPHABET};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Binary single-channel image, row-major, pixels in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitmap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Bitmap {
    pub fn blank(height: usize, width: usize) -> Self {
        Bitmap {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize) {
        self.pixels[y * self.width + x] = 1;
    }

    pub fn foreground(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    /// Smallest `(x0, y0, x1, y1)` box (exclusive ends) holding every
    /// foreground pixel.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) != 0 {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    /// `(H, W, 1)` tensor with values 0.0 / 1.0.
    pub fn to_tensor<F: Element>(&self) -> Tensor<F> {
        Tensor::new(
            [self.height, self.width, 1],
            self.pixels.iter().map(|&p| F::lit(p as f64)).collect(),
        )
        .expect("consistent size")
    }

    /// Thresholds a `(H, W)` or `(H, W, 1)` tensor at 0.5.
    pub fn from_tensor<F: Element>(t: &Tensor<F>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [h, w, 1] | [1, h, w, 1] => (h, w),
            _ => {
                return Err(Error::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: "expected a single-channel image".into(),
                })
            }
        };
        Ok(Bitmap {
            height: h,
            width: w,
            pixels: t
                .data()
                .iter()
                .map(|&v| u8::from(v.as_f64() >= 0.5))
                .collect(),
        })
    }

    /// 8-bit grayscale PNG with values {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.pixels.iter().map(|&p| p * 255).collect();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads any image, converts to 8-bit luma and thresholds at 128.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(Bitmap {
            height: h as usize,
            width: w as usize,
            pixels: img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    /// Round dots with a blank seam between neighbouring cells.
    Dotted,
    /// Full square cells, so neighbouring dots fuse into strokes.
    Filled,
}

/// Pixels of one dot inside its `pitch × pitch` cell.
fn dot_mask(pitch: usize, style: Style) -> Vec<bool> {
    match style {
        Style::Filled => vec![true; pitch * pitch],
        Style::Dotted => {
            // Disc in the top-left (pitch-1)² corner of the cell; the last
            // row and column stay blank so dots never touch.
            let c = (pitch as f64 - 2.0) / 2.0;
            let r = c + 0.5;
            (0..pitch * pitch)
                .map(|i| {
                    let (y, x) = ((i / pitch) as f64, (i % pitch) as f64);
                    pitch == 1 || (x - c).powi(2) + (y - c).powi(2) <= r * r + 1e-9
                })
                .collect()
        }
    }
}

fn draw_glyph(img: &mut Bitmap, g: &Glyph, x0: usize, y0: usize, pitch: usize, mask: &[bool]) {
    for row in 0..super::glyphs::GLYPH_ROWS {
        for col in 0..g.cols {
            if !g.dot(row, col) {
                continue;
            }
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                img.set(y0 + row * pitch + i / pitch, x0 + col * pitch + i % pitch);
            }
        }
    }
}

/// Renders `text` with its top-left corner at `offset = (dx, dy)`.
pub fn render(
    text: &str,
    atlas: &GlyphAtlas,
    canvas: (usize, usize),
    offset: (usize, usize),
    style: Style,
) -> Result<Bitmap> {
    let (h, w) = canvas;
    let (tw, th) = atlas.text_size(text)?;
    if offset.0 + tw > w || offset.1 + th > h {
        return Err(Error::TextOverflow {
            required_width: offset.0 + tw,
            required_height: offset.1 + th,
            available_width: w,
            available_height: h,
        });
    }
    let mask = dot_mask(atlas.pitch, style);
    let mut img = Bitmap::blank(h, w);
    let mut x = offset.0;
    for c in text.chars() {
        let g = atlas.glyph(c)?;
        draw_glyph(&mut img, g, x, offset.1, atlas.pitch, &mask);
        x += atlas.glyph_width_px(g) + atlas.gap;
    }
    Ok(img)
}

pub fn render_dotmatrix(
    text: &str,
    atlas: &GlyphAtlas,
    canvas: (usize, usize),
    offset: (usize, usize),
) -> Result<Bitmap> {
    render(text, atlas, canvas, offset, Style::Dotted)
}

pub fn render_filled(
    text: &str,
    atlas: &GlyphAtlas,
    canvas: (usize, usize),
    offset: (usize, usize),
) -> Result<Bitmap> {
    render(text, atlas, canvas, offset, Style::Filled)
}

/// Reads a solid rendering back by exact template matching against the
/// atlas glyphs, backtracking over glyph choices. Returns `None` unless
/// some glyph sequence reproduces the image pixel for pixel.
pub fn decode_filled(img: &Bitmap, atlas: &GlyphAtlas) -> Option<String> {
    let (x0, y_min, _, y_max) = img.bounding_box()?;
    let p = atlas.pitch;
    let th = atlas.rows() * p;
    let mask = dot_mask(p, Style::Filled);
    let first_dy = y_max.saturating_sub(th);
    for dy in first_dy..=y_min {
        if dy + th > img.height {
            break;
        }
        let mut out = Vec::new();
        if search(img, atlas, &mask, x0, dy, &mut out) {
            return Some(out.into_iter().map(|i| ALPHABET[i]).collect());
        }
    }
    None
}

fn glyph_matches(img: &Bitmap, g: &Glyph, x0: usize, y0: usize, p: usize, mask: &[bool]) -> bool {
    let w = g.cols * p;
    if x0 + w > img.width {
        // A trailing spacer may hang off the canvas edge only if blank.
        let ink_w = (g.cols - 1) * p;
        if x0 + ink_w > img.width {
            return false;
        }
    }
    for yy in 0..atlas_rows(p) {
        for xx in 0..w.min(img.width - x0) {
            let (row, col) = (yy / p, xx / p);
            let want = g.dot(row, col) && mask[(yy % p) * p + xx % p];
            if (img.get(y0 + yy, x0 + xx) != 0) != want {
                return false;
            }
        }
    }
    true
}

fn atlas_rows(p: usize) -> usize {
    super::glyphs::GLYPH_ROWS * p
}

fn search(img: &Bitmap, atlas: &GlyphAtlas, mask: &[bool], x: usize, dy: usize, out: &mut Vec<usize>) -> bool {
    // Done once everything right of x is blank.
    let rest_blank = (0..img.height).all(|y| (x.min(img.width)..img.width).all(|xx| img.get(y, xx) == 0));
    if rest_blank && !out.is_empty() {
        return true;
    }
    if x >= img.width {
        return false;
    }
    for (i, g) in atlas.glyphs().iter().enumerate() {
        if glyph_matches(img, g, x, dy, atlas.pitch, mask) {
            out.push(i);
            if search(img, atlas, mask, x + g.cols * atlas.pitch + atlas.gap, dy, out) {
                return true;
            }
            out.pop();
        }
    }
    false
}
