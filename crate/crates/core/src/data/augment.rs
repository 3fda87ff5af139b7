use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::LineSample;
use crate::rng::{indexed_substream, normal, StreamRng};
use crate::tensor::Tensor;

/// The six augmentations, in application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    Padding,
    Stretch,
    Erosion,
    Dilation,
    GaussianNoise,
    BackgroundNoise,
}

pub const AUGMENTATIONS: [Augmentation; 6] = [
    Augmentation::Padding,
    Augmentation::Stretch,
    Augmentation::Erosion,
    Augmentation::Dilation,
    Augmentation::GaussianNoise,
    Augmentation::BackgroundNoise,
];

pub const GATE_PROBABILITY: f64 = 0.5;
pub const NOISE_SIGMA: f64 = 0.05;
pub const SALT_DENSITY: f64 = 0.01;
/// Largest blank border added on each side by padding.
pub const MAX_PAD: usize = 12;
pub const STRETCH_RANGE: (f64, f64) = (0.8, 1.2);

fn gates(rng: &mut StreamRng) -> [bool; 6] {
    let mut g = [false; 6];
    for x in &mut g {
        *x = rng.gen::<f64>() < GATE_PROBABILITY;
    }
    g
}

/// Which augmentations `augment` applies for `seed`.
pub fn augment_gates(seed: u64) -> [bool; 6] {
    gates(&mut indexed_substream(seed, "augment", 0))
}

struct Img {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

fn morph(img: &Img, pick: fn(f64, f64) -> f64) -> Vec<f64> {
    let (h, w) = (img.h as isize, img.w as isize);
    let mut out = img.px.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = img.px[(y * w + x) as usize];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h && xx >= 0 && xx < w {
                        acc = pick(acc, img.px[(yy * w + xx) as usize]);
                    }
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Round a width up to a multiple of four so the convolution stack tiles it
/// exactly.
fn round_width(w: usize) -> usize {
    w.div_ceil(4) * 4
}

fn pad(img: &Img, left: usize, right: usize) -> Img {
    let w = img.w + left + right;
    let mut px = vec![0.0; img.h * w];
    for y in 0..img.h {
        px[y * w + left..y * w + left + img.w].copy_from_slice(&img.px[y * img.w..(y + 1) * img.w]);
    }
    Img { h: img.h, w, px }
}

/// Linear resampling along the width.
fn stretch(img: &Img, factor: f64) -> Img {
    let w = round_width((crate::math::round(img.w as f64 * factor) as usize).max(4));
    let mut px = vec![0.0; img.h * w];
    let ratio = img.w as f64 / w as f64;
    for x in 0..w {
        let src = ((x as f64 + 0.5) * ratio - 0.5).clamp(0.0, (img.w - 1) as f64);
        let x0 = crate::math::floor(src) as usize;
        let x1 = (x0 + 1).min(img.w - 1);
        let t = src - x0 as f64;
        for y in 0..img.h {
            px[y * w + x] = (1.0 - t) * img.px[y * img.w + x0] + t * img.px[y * img.w + x1];
        }
    }
    Img { h: img.h, w, px }
}

/// Apply each augmentation independently with probability ½.
///
/// Values stay in `[0, 1]` and the height never changes; padding and
/// stretching keep the width a multiple of four.
pub fn augment(sample: &LineSample, seed: u64) -> LineSample {
    let mut rng = indexed_substream(seed, "augment", 0);
    let on = gates(&mut rng);
    let s = sample.image.shape();
    let mut img = Img {
        h: s[s.len() - 2],
        w: s[s.len() - 1],
        px: sample.image.data().to_vec(),
    };
    for (a, &enabled) in AUGMENTATIONS.iter().zip(&on) {
        if !enabled {
            continue;
        }
        match a {
            Augmentation::Padding => {
                let left = rng.gen_range(0..=MAX_PAD);
                let right = rng.gen_range(0..=MAX_PAD);
                let extra = round_width(img.w + left + right) - (img.w + left + right);
                img = pad(&img, left, right + extra);
            }
            Augmentation::Stretch => {
                let f = rng.gen_range(STRETCH_RANGE.0..=STRETCH_RANGE.1);
                img = stretch(&img, f);
            }
            Augmentation::Erosion => img.px = morph(&img, f64::min),
            Augmentation::Dilation => img.px = morph(&img, f64::max),
            Augmentation::GaussianNoise => {
                for p in &mut img.px {
                    *p += NOISE_SIGMA * normal(&mut rng);
                }
            }
            Augmentation::BackgroundNoise => {
                for p in &mut img.px {
                    if rng.gen::<f64>() < SALT_DENSITY {
                        *p = 1.0;
                    }
                }
            }
        }
    }
    for p in &mut img.px {
        *p = p.clamp(0.0, 1.0);
    }
    LineSample {
        id: sample.id.clone(),
        image: Tensor::new(&[1, img.h, img.w], img.px).expect("positive extents"),
        transcript: sample.transcript.clone(),
    }
}

/// Erosion alone, for checking morphology contracts.
pub fn erode(image: &Tensor) -> Tensor {
    apply_morph(image, f64::min)
}

/// Dilation alone.
pub fn dilate(image: &Tensor) -> Tensor {
    apply_morph(image, f64::max)
}

fn apply_morph(image: &Tensor, pick: fn(f64, f64) -> f64) -> Tensor {
    let s = image.shape();
    let img = Img {
        h: s[s.len() - 2],
        w: s[s.len() - 1],
        px: image.data().to_vec(),
    };
    Tensor::new(s, morph(&img, pick)).expect("same shape")
}
