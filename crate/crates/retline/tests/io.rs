use std::fs;

use proptest::prelude::*;
use retline::config::RunConfig;
use retline::{checkpoint, dataset, pgm};
use retline_core::data::Vocab;
use retline_core::model::{Mixer, Model, ModelConfig};
use retline_core::tensor::Tensor;

fn small_model(mixer: Mixer) -> Model {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 9,
        max_text_len: 10,
        max_image_tokens: 64,
        cnn_channels: [2, 3, 3],
        mixer,
        ..ModelConfig::default()
    };
    Model::new(cfg, 3).unwrap()
}

#[test]
fn pgm_skips_comments_and_rejects_bad_headers() {
    let img = pgm::decode(b"P5\n# a comment\n2 1\n255\n\x00\xff").unwrap();
    assert_eq!(img.shape(), &[1, 1, 2]);
    assert_eq!(img.data(), &[0.0, 1.0]);
    assert!(pgm::decode(b"P2\n2 1\n255\n0 255").is_err());
    assert!(pgm::decode(b"P5\n2 2\n255\n\x00").is_err());
    assert!(pgm::decode(b"P5\n2 2\n65535\n").is_err());
}

proptest! {
    #[test]
    fn pgm_round_trips_8_bit_values(w in 1usize..12, h in 1usize..6, seed in any::<u64>()) {
        let px: Vec<f64> = (0..w * h).map(|i| ((seed >> (i % 56)) as u8) as f64 / 255.0).collect();
        let bytes = pgm::encode(w, h, &px);
        let back = pgm::decode(&bytes).unwrap();
        prop_assert_eq!(back.shape(), &[1, h, w][..]);
        prop_assert_eq!(back.data(), &px[..]);
    }
}

#[test]
fn manifest_accepts_crlf_and_reports_line_numbers() {
    let rows = dataset::parse_manifest("a\timg/a.pgm\tabc\r\n\r\nb\timg/b.pgm\tx y\r\n").unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].3, "abc");
    assert_eq!(rows[1].0, 3);
    assert_eq!(rows[1].3, "x y");

    let err = dataset::parse_manifest("a\tp\tx\na\tq\ty\n").unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("duplicate"), "{err}");
    let err = dataset::parse_manifest("a\tp\tx\nbroken\n").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn generated_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (data, sidecar) = dataset::generate("abc", 5, 2, 6, 11, "train").unwrap();
    let path = dataset::write(dir.path(), "train", &data, &sidecar).unwrap();
    let back = dataset::load(&path).unwrap();
    assert_eq!(back.vocab, data.vocab);
    assert_eq!(back.samples.len(), 5);
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.image.shape(), b.image.shape());
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
    let (again, _) = dataset::generate("abc", 5, 2, 6, 11, "train").unwrap();
    assert_eq!(again, data);
    let (val, _) = dataset::generate("abc", 5, 2, 6, 11, "val").unwrap();
    assert_ne!(val.samples[0].transcript, data.samples[0].transcript);
}

#[test]
fn manifest_outside_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (data, sidecar) = dataset::generate("ab", 2, 2, 3, 0, "val").unwrap();
    let path = dataset::write(dir.path(), "val", &data, &sidecar).unwrap();
    let other = Vocab::new("xyz".chars()).unwrap();
    assert!(dataset::load_manifest(&path, &other).is_err());
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::new("abcdef".chars()).unwrap();
    for mixer in [Mixer::Retention, Mixer::Attention] {
        let model = small_model(mixer);
        let a = dir.path().join(format!("{mixer}-a"));
        let b = dir.path().join(format!("{mixer}-b"));
        checkpoint::save(&model, Some(&vocab), &a).unwrap();
        let (loaded, v) = checkpoint::load(&a).unwrap();
        assert_eq!(v.as_ref(), Some(&vocab));
        checkpoint::save(&loaded, Some(&vocab), &b).unwrap();
        let (ja, ba) = checkpoint::paths(&a);
        let (jb, bb) = checkpoint::paths(&b);
        assert_eq!(fs::read(ja).unwrap(), fs::read(jb).unwrap());
        assert_eq!(fs::read(ba).unwrap(), fs::read(bb).unwrap());

        let image = Tensor::new(&[1, 32, 24], (0..32 * 24).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let ids = [1, 3, 4, 5];
        let la = model.logits(&image, &ids).unwrap();
        let lb = loaded.logits(&image, &ids).unwrap();
        assert!(la.data().iter().zip(lb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("m");
    checkpoint::save(&small_model(Mixer::Retention), None, &base).unwrap();
    let (json, bin) = checkpoint::paths(&base);
    let good_json = fs::read_to_string(&json).unwrap();
    let good_bin = fs::read(&bin).unwrap();

    fs::write(&bin, &good_bin[..good_bin.len() - 4]).unwrap();
    assert!(checkpoint::load(&base).is_err(), "truncated blob");
    fs::write(&bin, &good_bin[..good_bin.len() - 1]).unwrap();
    assert!(checkpoint::load(&base).is_err(), "partial float");
    let mut longer = good_bin.clone();
    longer.extend_from_slice(&[0; 4]);
    fs::write(&bin, longer).unwrap();
    assert!(checkpoint::load(&base).is_err(), "trailing data");
    fs::write(&bin, &good_bin).unwrap();

    let mut m: checkpoint::Manifest = serde_json::from_str(&good_json).unwrap();
    m.tensors[0].shape.push(2);
    fs::write(&json, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(checkpoint::load(&base).is_err(), "wrong shape");

    let mut m: checkpoint::Manifest = serde_json::from_str(&good_json).unwrap();
    m.tensors[0].dtype = "f16".into();
    fs::write(&json, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(checkpoint::load(&base).is_err(), "dtype");

    let mut m: checkpoint::Manifest = serde_json::from_str(&good_json).unwrap();
    m.tensors.pop();
    fs::write(&json, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(checkpoint::load(&base).is_err(), "missing tensor");

    fs::write(&json, &good_json).unwrap();
    assert!(checkpoint::load(&base).is_ok());
}

#[test]
fn config_defaults_round_trip_and_unknown_keys_fail() {
    let cfg = RunConfig::default();
    let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(cfg.model.d_model, 768);
    assert_eq!(cfg.model.layers, 12);
    assert_eq!(cfg.train.lr_max, 1e-4);
    assert_eq!(cfg.train.label_smoothing, 0.4);

    let partial = RunConfig::parse("seed = 5\n[model]\nlayers = 3\n").unwrap();
    assert_eq!(partial.seed, 5);
    assert_eq!(partial.model.layers, 3);
    assert_eq!(partial.model.heads, 12);

    assert!(RunConfig::parse("sed = 5\n").is_err());
    assert!(RunConfig::parse("[model]\nlayer = 3\n").is_err());
    assert!(RunConfig::parse("[model]\nheads = 5\n").is_err(), "768 is not divisible by 5");
}

#[test]
fn config_echo_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("seed = 9\n[train]\nepochs = 2\n").unwrap();
    let p = cfg.write_echo(dir.path()).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap(), cfg);
}
