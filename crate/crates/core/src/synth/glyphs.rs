//! Procedural 7-row dot-matrix glyphs for the Arabic-Indic digits and "/".

use crate::error::{Error, Result};

/// Alphabet in class-index order: ٠ … ٩ then "/".
pub const ALPHABET: [char; 11] = [
    '٠', '١', '٢', '٣', '٤', '٥', '٦', '٧', '٨', '٩', '/',
];

pub const GLYPH_ROWS: usize = 7;

/// Index of `c` in [`ALPHABET`].
pub fn char_index(c: char) -> Option<usize> {
    ALPHABET.iter().position(|&a| a == c)
}

/// Maps ASCII digits to their Arabic-Indic forms, leaving other characters.
pub fn from_ascii(s: &str) -> String {
    s.chars()
        .map(|c| match c.to_digit(10) {
            Some(d) => ALPHABET[d as usize],
            None => c,
        })
        .collect()
}

/// Maps Arabic-Indic digits to ASCII digits, leaving other characters.
pub fn to_ascii(s: &str) -> String {
    s.chars()
        .map(|c| match char_index(c) {
            Some(i) if i < 10 => char::from(b'0' + i as u8),
            _ => c,
        })
        .collect()
}

// Each row string is one dot row; '#' is a dot. The trailing blank column
// is the inter-character spacing of the dot grid.
const SHAPES: [[&str; GLYPH_ROWS]; 11] = [
    // ٠
    ["....", "....", ".#..", "###.", ".#..", "....", "...."],
    // ١
    ["##..", ".#..", ".#..", ".#..", ".#..", ".#..", ".#.."],
    // ٢
    ["#..#.", "#.#..", "##...", "#....", "#....", "#....", "#...."],
    // ٣
    ["#.#.#.", "#.#.#.", "#####.", "#.....", "#.....", "#.....", "#....."],
    // ٤
    [".###.", "#....", ".##..", "#....", "#....", ".###.", "....."],
    // ٥
    [".....", ".##..", "#..#.", "#..#.", "#..#.", ".##..", "....."],
    // ٦
    ["####.", "...#.", "...#.", "...#.", "...#.", "...#.", "...#."],
    // ٧
    ["#...#.", "#...#.", ".#.#..", ".#.#..", ".#.#..", "..#...", "..#..."],
    // ٨
    ["..#...", "..#...", ".#.#..", ".#.#..", ".#.#..", "#...#.", "#...#."],
    // ٩
    [".##..", "#..#.", "#..#.", ".###.", "...#.", "...#.", "...#."],
    // /
    ["..#.", "..#.", ".#..", ".#..", ".#..", "#...", "#..."],
];

/// A dot grid: `rows × cols` booleans, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub ch: char,
    pub cols: usize,
    pub dots: Vec<bool>,
}

impl Glyph {
    pub fn dot(&self, row: usize, col: usize) -> bool {
        self.dots[row * self.cols + col]
    }
}

/// Glyph grids plus rasterization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphAtlas {
    glyphs: Vec<Glyph>,
    /// Side of one dot cell in pixels.
    pub pitch: usize,
    /// Extra pixels between consecutive glyphs.
    pub gap: usize,
}

impl GlyphAtlas {
    pub fn new(pitch: usize, gap: usize) -> Result<Self> {
        if pitch == 0 {
            return Err(Error::InvalidArgument("dot pitch must be positive".into()));
        }
        let glyphs = ALPHABET
            .iter()
            .zip(SHAPES.iter())
            .map(|(&ch, rows)| {
                let cols = rows[0].len();
                let dots = rows
                    .iter()
                    .flat_map(|r| {
                        debug_assert_eq!(r.len(), cols);
                        r.bytes().map(|b| b == b'#')
                    })
                    .collect();
                Glyph { ch, cols, dots }
            })
            .collect();
        Ok(GlyphAtlas { glyphs, pitch, gap })
    }

    /// Atlas scaled for a canvas: the pitch is the largest that still fits
    /// the widest date with room to spare, i.e. `min(H / 16, W / 64)`.
    pub fn for_canvas(height: usize, width: usize) -> Result<Self> {
        let pitch = (height / 16).min(width / 64);
        if pitch == 0 {
            return Err(Error::TextOverflow {
                required_width: 64,
                required_height: 16,
                available_width: width,
                available_height: height,
            });
        }
        Self::new(pitch, 0)
    }

    pub fn glyphs(&self) -> &[Glyph] {
        &self.glyphs
    }

    pub fn glyph(&self, c: char) -> Result<&Glyph> {
        char_index(c)
            .map(|i| &self.glyphs[i])
            .ok_or_else(|| Error::InvalidLabel {
                label: c.to_string(),
                reason: "character outside the glyph alphabet".into(),
            })
    }

    pub fn rows(&self) -> usize {
        GLYPH_ROWS
    }

    pub fn glyph_width_px(&self, g: &Glyph) -> usize {
        g.cols * self.pitch
    }

    /// Pixel extent `(width, height)` of `text`.
    pub fn text_size(&self, text: &str) -> Result<(usize, usize)> {
        let mut w = 0;
        for (i, c) in text.chars().enumerate() {
            if i > 0 {
                w += self.gap;
            }
            w += self.glyph_width_px(self.glyph(c)?);
        }
        Ok((w, GLYPH_ROWS * self.pitch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_height_varying_width_distinct_nonempty() {
        let atlas = GlyphAtlas::new(1, 0).unwrap();
        let g = atlas.glyphs();
        assert_eq!(g.len(), 11);
        for a in g {
            assert_eq!(a.dots.len(), GLYPH_ROWS * a.cols);
            assert!((4..=6).contains(&a.cols));
            assert!(a.dots.iter().any(|&d| d));
            // leading ink column, trailing blank spacer
            assert!((0..GLYPH_ROWS).any(|r| a.dot(r, 0)), "{}", a.ch);
            assert!((0..GLYPH_ROWS).all(|r| !a.dot(r, a.cols - 1)), "{}", a.ch);
        }
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                assert_ne!(g[i], g[j]);
            }
        }
        let widths: std::collections::BTreeSet<_> = g.iter().map(|a| a.cols).collect();
        assert!(widths.len() >= 2);
    }

    #[test]
    fn ascii_round_trip() {
        assert_eq!(from_ascii("2025/07/30"), "٢٠٢٥/٠٧/٣٠");
        assert_eq!(to_ascii("٢٠٢٥/٠٧/٣٠"), "2025/07/30");
    }

    #[test]
    fn pitch_follows_canvas() {
        assert_eq!(GlyphAtlas::for_canvas(32, 128).unwrap().pitch, 2);
        assert_eq!(GlyphAtlas::for_canvas(64, 256).unwrap().pitch, 4);
        assert!(GlyphAtlas::for_canvas(8, 256).is_err());
    }
}
