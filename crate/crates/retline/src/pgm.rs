//! Binary 8-bit PGM (P5) images.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use retline_core::model::MapMatrix;
use retline_core::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| to_byte(v)));
    out
}

/// Parse a P5 file into a `1×h×w` tensor with values in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        ensure!(start < i, "truncated PGM header");
        fields.push(std::str::from_utf8(&bytes[start..i])?.to_string());
    }
    if fields[0] != "P5" {
        bail!("not a binary PGM (magic {:?})", fields[0]);
    }
    let w: usize = fields[1].parse().context("PGM width")?;
    let h: usize = fields[2].parse().context("PGM height")?;
    let max: usize = fields[3].parse().context("PGM maxval")?;
    ensure!(max > 0 && max < 256, "only 8-bit PGM is supported (maxval {max})");
    i += 1;
    let data = bytes.get(i..i + w * h).context("truncated PGM raster")?;
    let px = data.iter().map(|&b| b as f64 / max as f64).collect();
    Ok(Tensor::new(&[1, h, w], px)?)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [1, h, w] | [h, w] => (*h, *w),
        _ => bail!("cannot write a {s:?} tensor as PGM"),
    };
    fs::write(path, encode(w, h, image.data())).with_context(|| format!("writing {}", path.display()))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Min-max normalized heatmap; a constant matrix renders black.
pub fn write_heatmap(path: &Path, m: &MapMatrix) -> Result<()> {
    let (lo, hi) = m.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let px: Vec<f64> = m.data.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
    fs::write(path, encode(m.cols, m.rows, &px)).with_context(|| format!("writing {}", path.display()))
}
