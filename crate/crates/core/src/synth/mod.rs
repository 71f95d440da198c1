//! Paired dot-matrix / filled-in date images from procedural glyphs.

mod dataset;
mod date;
mod glyphs;
mod render;

pub use dataset::{
    generate_dataset, make_sample, Dataset, DatasetManifest, GenerateOptions, ManifestRecord,
    SamplePair, Which, MANIFEST_FILE,
};
pub use date::{
    days_in_month, is_leap, sample_date, sample_realistic_date, sample_unrealistic_date,
    DateKind, DateText, FIRST_YEAR, LAST_YEAR,
};
pub use glyphs::{char_index, from_ascii, to_ascii, Glyph, GlyphAtlas, ALPHABET, GLYPH_ROWS};
pub use render::{decode_filled, render, render_dotmatrix, render_filled, Bitmap, Style};
