mod common;

use common::{image, tiny_config, tiny_model};
use retline_core::data::{EOS, SOS};
use retline_core::model::{teacher_forcing, training_loss, AdamW, AdamWConfig, CosineSchedule, Mixer, Model, ModelConfig};
use retline_core::retention::GammaStrategy;
use retline_core::rng::{substream, uniform};
use retline_core::tensor::{grad_check_many, Tape, Tensor};

fn random_image(w: usize, seed: u64) -> Tensor {
    let mut rng = substream(seed, "img");
    Tensor::new(&[1, 32, w], (0..32 * w).map(|_| uniform(&mut rng, 0.0, 1.0)).collect()).unwrap()
}

fn gradcheck_config(mixer: Mixer, gamma: GammaStrategy) -> ModelConfig {
    ModelConfig {
        max_image_tokens: 4,
        ..tiny_config(mixer, gamma)
    }
}

fn check_model_gradients(cfg: ModelConfig, seed: u64) -> f64 {
    let model = Model::new(cfg, seed).unwrap();
    let img = random_image(16, seed);
    let ids = [SOS, 3, 4, 5, 6, EOS];
    let (inputs, targets) = teacher_forcing(&ids).unwrap();
    assert_eq!(inputs.len(), 5);
    let report = grad_check_many(
        |tape, vars| {
            let tr = model.forward_with_params(tape, vars.to_vec(), &img, &inputs, None)?;
            assert_eq!(tr.n_image, 4);
            training_loss(tape, tr.logits, &targets, 0.1)
        },
        model.params().tensors(),
        1e-5,
    )
    .unwrap();
    assert_eq!(report.coordinates, model.params().scalar_count());
    report.max_rel_error
}

#[test]
fn end_to_end_gradients_layerwise() {
    let e = check_model_gradients(gradcheck_config(Mixer::Retention, GammaStrategy::LayerWise), 1);
    assert!(e <= 1e-4, "worst relative error {e}");
}

#[test]
fn end_to_end_gradients_gated() {
    let e = check_model_gradients(gradcheck_config(Mixer::Retention, GammaStrategy::Gated), 2);
    assert!(e <= 1e-4, "worst relative error {e}");
}

#[test]
fn end_to_end_gradients_baseline() {
    let e = check_model_gradients(gradcheck_config(Mixer::Attention, GammaStrategy::Original), 3);
    assert!(e <= 1e-4, "worst relative error {e}");
}

#[test]
fn zero_initialized_head_gives_uniform_loss() {
    let mut model = tiny_model(Mixer::Retention, GammaStrategy::LayerWise, 4);
    for name in ["head.weight", "head.bias"] {
        let i = model.params().index_of(name).unwrap();
        model.params_mut().tensors_mut()[i].data_mut().fill(0.0);
    }
    let (loss, _) = model.loss_and_grads(&image("ab", 0), &[SOS, 3, 4, EOS], 0.0, None).unwrap();
    assert!((loss - (9f64).ln()).abs() < 1e-12);
}

#[test]
fn overfits_single_sample() {
    let mut model = tiny_model(Mixer::Retention, GammaStrategy::LayerWise, 5);
    let img = image("abc", 1);
    let ids = [SOS, 3, 4, 5, EOS];
    let mut opt = AdamW::new(AdamWConfig::default(), model.params());
    let (first, _) = model.loss_and_grads(&img, &ids, 0.0, None).unwrap();
    let mut last = first;
    for _ in 0..100 {
        let (l, g) = model.loss_and_grads(&img, &ids, 0.0, None).unwrap();
        opt.step(model.params_mut(), &g, 3e-3).unwrap();
        last = l;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut model = tiny_model(Mixer::Attention, GammaStrategy::Original, 6);
    let before = model.params().clone();
    let mut opt = AdamW::new(AdamWConfig::default(), model.params());
    let (_, g) = model.loss_and_grads(&image("ab", 1), &[SOS, 3, EOS], 0.1, None).unwrap();
    opt.step(model.params_mut(), &g, 0.0).unwrap();
    assert_eq!(model.params(), &before);
}

#[test]
fn eval_is_deterministic() {
    let a = tiny_model(Mixer::Retention, GammaStrategy::Gated, 7);
    let b = tiny_model(Mixer::Retention, GammaStrategy::Gated, 7);
    let img = image("q q", 2);
    let la = a.logits(&img, &[SOS, 3, 4]).unwrap();
    let lb = b.logits(&img, &[SOS, 3, 4]).unwrap();
    assert_eq!(la.data(), lb.data());
    assert_eq!(la.data(), a.logits(&img, &[SOS, 3, 4]).unwrap().data());
}

#[test]
fn parameters_are_f32_representable() {
    let m = tiny_model(Mixer::Retention, GammaStrategy::LayerWise, 8);
    for t in m.params().tensors() {
        assert!(t.data().iter().all(|&v| (v as f32) as f64 == v));
    }
}

#[test]
fn baseline_shares_common_shapes() {
    let r = tiny_model(Mixer::Retention, GammaStrategy::LayerWise, 1);
    let a = tiny_model(Mixer::Attention, GammaStrategy::LayerWise, 1);
    assert_eq!(r.params().shapes(), a.params().shapes());
    let g = tiny_model(Mixer::Retention, GammaStrategy::Gated, 1);
    let extra: Vec<_> = g
        .params()
        .shapes()
        .into_iter()
        .filter(|(n, _)| a.params().index_of(n).is_none())
        .map(|(n, _)| n)
        .collect();
    assert_eq!(extra, ["layers.0.mix.w_gamma", "layers.1.mix.w_gamma"]);
}

#[test]
fn causal_logits() {
    for mixer in [Mixer::Retention, Mixer::Attention] {
        let m = tiny_model(mixer, GammaStrategy::LayerWise, 9);
        let img = image("abc", 0);
        let a = m.logits(&img, &[SOS, 3, 4, 5]).unwrap();
        let b = m.logits(&img, &[SOS, 3, 7, 8]).unwrap();
        let v = a.shape()[1];
        assert_eq!(a.data()[..2 * v], b.data()[..2 * v]);
        assert_ne!(a.data()[2 * v..3 * v], b.data()[2 * v..3 * v]);
    }
}

#[test]
fn dropout_changes_training_loss_only_with_rng() {
    let m = tiny_model(Mixer::Retention, GammaStrategy::LayerWise, 9);
    let img = image("abc", 0);
    let ids = [SOS, 3, 4, EOS];
    let (a, _) = m.loss_and_grads(&img, &ids, 0.1, None).unwrap();
    let (b, _) = m.loss_and_grads(&img, &ids, 0.1, None).unwrap();
    assert_eq!(a, b);
    let mut rng = substream(1, "dropout");
    let (c, _) = m.loss_and_grads(&img, &ids, 0.1, Some(&mut rng)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn bad_inputs_rejected() {
    let m = tiny_model(Mixer::Retention, GammaStrategy::LayerWise, 9);
    assert!(m.logits(&Tensor::zeros(&[1, 24, 16]), &[SOS]).is_err());
    assert!(m.logits(&image("a", 0), &[SOS, 99]).is_err());
    assert!(Model::new(ModelConfig { heads: 3, ..tiny_config(Mixer::Retention, GammaStrategy::Original) }, 0).is_err());
    let mut tape = Tape::new();
    assert!(m.forward_with_params(&mut tape, vec![], &image("a", 0), &[SOS], None).is_err());
}

#[test]
fn cosine_restarts() {
    let s = CosineSchedule {
        lr_max: 1e-4,
        lr_min: 1e-6,
        period: 5.0,
    };
    assert_eq!(s.lr(0.0), 1e-4);
    assert_eq!(s.lr(5.0), 1e-4);
    assert!(s.lr(4.9) < 2e-6);
    assert!(s.lr(2.5) > s.lr(3.0));
}
