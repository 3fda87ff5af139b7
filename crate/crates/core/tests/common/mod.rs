#![allow(dead_code)]

use retline_core::data::render_line;
use retline_core::model::{Mixer, Model, ModelConfig};
use retline_core::retention::GammaStrategy;
use retline_core::tensor::Tensor;

pub fn tiny_config(mixer: Mixer, gamma: GammaStrategy) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 9,
        max_text_len: 10,
        max_image_tokens: 64,
        cnn_channels: [2, 3, 3],
        gamma,
        mixer,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(mixer: Mixer, gamma: GammaStrategy, seed: u64) -> Model {
    Model::new(tiny_config(mixer, gamma), seed).unwrap()
}

pub fn image(text: &str, seed: u64) -> Tensor {
    render_line(text, seed).unwrap()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - z).collect()
}
