//! Vocabulary, synthetic line rendering and the training augmentations.

mod augment;
pub mod font;
mod vocab;

use alloc::string::String;
use alloc::vec;

use rand::Rng;

pub use augment::{augment, augment_gates, dilate, erode, Augmentation, AUGMENTATIONS};
pub use vocab::{Vocab, EOS, PAD, SOS, SPECIALS};

use crate::error::{invalid, Error, Result};
use crate::rng::indexed_substream;
use crate::tensor::Tensor;

/// Line height in pixels.
pub const LINE_HEIGHT: usize = 32;
/// Horizontal and vertical glyph magnification.
pub const SCALE_X: usize = 2;
pub const SCALE_Y: usize = 3;
/// Pen advance per character, glyph width plus gap.
pub const ADVANCE: usize = 12;
/// Blank columns on each side of the line.
pub const MARGIN: usize = 4;
/// Maximum vertical offset of a glyph from the centered baseline.
pub const MAX_JITTER: i64 = 2;

/// A rendered line: `1×h×w` image with ink ≈ 1 on a zero background.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSample {
    pub id: String,
    pub image: Tensor,
    pub transcript: String,
}

impl LineSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Width of a rendered line of `chars` characters.
pub fn line_width(chars: usize) -> usize {
    2 * MARGIN + chars * ADVANCE
}

/// Draw `text` with the builtin font; `seed` only moves glyphs vertically.
pub fn render_line(text: &str, seed: u64) -> Result<Tensor> {
    let n = text.chars().count();
    if n == 0 {
        return Err(invalid("render_line", "empty text"));
    }
    let (h, w) = (LINE_HEIGHT, line_width(n));
    let gh = font::GLYPH_H * SCALE_Y;
    let top = ((h - gh) / 2) as i64;
    let mut rng = indexed_substream(seed, "render", 0);
    let mut img = vec![0.0; h * w];
    for (ci, c) in text.chars().enumerate() {
        let rows = font::glyph(c).ok_or(Error::UnknownChar(c))?;
        let dy = rng.gen_range(-MAX_JITTER..=MAX_JITTER);
        let y0 = (top + dy) as usize;
        let x0 = MARGIN + ci * ADVANCE;
        for (gy, row) in rows.iter().enumerate() {
            for (gx, b) in row.bytes().enumerate() {
                if b != b'#' {
                    continue;
                }
                for sy in 0..SCALE_Y {
                    for sx in 0..SCALE_X {
                        img[(y0 + gy * SCALE_Y + sy) * w + x0 + gx * SCALE_X + sx] = 1.0;
                    }
                }
            }
        }
    }
    Tensor::new(&[1, h, w], img)
}

/// Render and package a sample, checking vocabulary closure.
pub fn render_sample(id: impl Into<String>, text: &str, vocab: &Vocab, seed: u64) -> Result<LineSample> {
    vocab.contains_all(text)?;
    Ok(LineSample {
        id: id.into(),
        image: render_line(text, seed)?,
        transcript: text.into(),
    })
}
