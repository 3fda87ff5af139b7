use alloc::vec::Vec;

use super::{Mixer, Trace};
use crate::error::Result;
use crate::tensor::Tape;

/// A dense row-major matrix for dumping.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MapMatrix {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Text-query score matrices of one layer, one per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps {
    pub layer: usize,
    /// Retention: `Dots_text ⊙ D`, `N_T×N_T`. Attention: softmax weights of
    /// text queries over all keys, `N_T×N`.
    pub scores: Vec<MapMatrix>,
    /// Text decay blocks, `N_T×N_T` (retention only).
    pub decays: Vec<MapMatrix>,
}

pub(super) fn collect(tape: &Tape, tr: &Trace, mixer: Mixer) -> Result<Vec<LayerMaps>> {
    let ni = tr.n_image;
    let mut out = Vec::with_capacity(tr.layers.len());
    for (layer, lt) in tr.layers.iter().enumerate() {
        let scores = lt
            .scores
            .iter()
            .map(|&v| {
                let shape = tape.shape(v);
                let (n, cols) = (shape[0], shape[1]);
                let data = tape.value(v)[ni * cols..].to_vec();
                MapMatrix { rows: n - ni, cols, data }
            })
            .collect();
        let decays = match mixer {
            Mixer::Retention => lt
                .decays
                .iter()
                .map(|d| {
                    let nt = crate::math::round(crate::math::sqrt(d.len() as f64)) as usize;
                    MapMatrix {
                        rows: nt,
                        cols: nt,
                        data: d.clone(),
                    }
                })
                .collect(),
            Mixer::Attention => Vec::new(),
        };
        out.push(LayerMaps { layer, scores, decays });
    }
    Ok(out)
}

/// `Σ_{i>j}|M| / Σ_{i≥j}|M|` over the trailing square block of a map
/// (the text-to-text block); zero for an all-zero block.
pub fn sub_diagonal_fraction(m: &MapMatrix) -> f64 {
    let off = m.cols - m.rows.min(m.cols);
    let (mut below, mut total) = (0.0, 0.0);
    for i in 0..m.rows {
        for j in 0..=i.min(m.cols - off - 1) {
            let v = m.at(i, off + j).abs();
            total += v;
            if i > j {
                below += v;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        below / total
    }
}

/// `Σ_{i>j}|M|` over the trailing square block of a map.
pub fn sub_diagonal_mass(m: &MapMatrix) -> f64 {
    let off = m.cols - m.rows.min(m.cols);
    let mut below = 0.0;
    for i in 0..m.rows {
        for j in 0..i.min(m.cols - off) {
            below += m.at(i, off + j).abs();
        }
    }
    below
}
