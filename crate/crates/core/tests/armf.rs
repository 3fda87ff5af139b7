use proptest::prelude::*;
use retline_core::armf::{
    armf_cache_image, armf_mask, armf_parallel, armf_recurrent, armf_tape, marmf_forward, ArmfHeadConfig, ArmfVars, ArmfWeights,
    FusionSequence, HeadDecay, ImagePrior,
};
use retline_core::retention::{GammaSchedule, GammaStrategy};
use retline_core::tensor::{Tape, Tensor};

fn mat(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
    Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap()
}

fn weights(d: usize, heads: usize, vals: &[f64], gated: bool) -> ArmfWeights {
    let dd = d * d;
    ArmfWeights {
        w_q: mat(d, d, vals),
        w_k: mat(d, d, &vals[dd..]),
        w_v: mat(d, d, &vals[2 * dd..]),
        w_o: mat(d, d, &vals[3 * dd..]),
        w_gamma: gated.then(|| mat(d, heads, &vals[4 * dd..])),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
struct Case {
    ni: usize,
    nt: usize,
    heads: usize,
    d: usize,
    kind: u8,
    vals: Vec<f64>,
}

impl Case {
    fn cfg(&self) -> ArmfHeadConfig {
        let gammas: Vec<f64> = (0..self.heads).map(|h| [0.1, 0.5, 0.96875][h % 3]).collect();
        match self.kind {
            0 => ArmfHeadConfig::fixed(gammas),
            1 => ArmfHeadConfig {
                image_prior: Some(vec![0.7; self.heads]),
                ..ArmfHeadConfig::fixed(gammas)
            },
            _ => ArmfHeadConfig {
                heads: self.heads,
                decay: HeadDecay::Gated { tau: 16.0 },
                image_prior: None,
            },
        }
    }

    fn weights(&self) -> ArmfWeights {
        let n = self.ni + self.nt;
        weights(self.d, self.heads, &self.vals[n * self.d..], self.kind == 2)
    }

    fn seq(&self) -> FusionSequence {
        FusionSequence::new(mat(self.ni + self.nt, self.d, &self.vals), self.ni).unwrap()
    }
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..=8, 0usize..=16, prop::sample::select(vec![1usize, 2, 4]), 1usize..=4, 0u8..3).prop_flat_map(|(ni, nt, heads, m, kind)| {
        let d = heads * m;
        let len = (ni + nt) * d + 4 * d * d + d * heads;
        prop::collection::vec(-1.0f64..1.0, len).prop_map(move |vals| Case { ni, nt, heads, d, kind, vals })
    })
}

#[test]
fn mask_rows() {
    let m = armf_mask(2, 2, 0.5).unwrap();
    assert_eq!(m.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.5, 1.0]);
    let m = armf_mask(1, 3, 0.25).unwrap();
    assert_eq!(m.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.25, 1.0, 0.0, 0.0625, 0.25, 1.0]);
}

#[test]
fn image_only_sequence_is_softmax_attention() {
    let x = mat(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
    let seq = FusionSequence::new(x.clone(), 3).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let vars = ArmfVars::record(&mut tape, &ArmfWeights::identity(2));
    let out = armf_tape(&mut tape, xv, 3, &vars, &ArmfHeadConfig::fixed(vec![0.5])).unwrap();
    for &p in &out.image_probs {
        for r in tape.value(p).chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
    assert!(out.text_scores.is_empty());
    let _ = armf_parallel(&seq, &ArmfWeights::identity(2), &ArmfHeadConfig::fixed(vec![0.5])).unwrap();
}

#[test]
fn identity_cache_is_input() {
    let x = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let c = armf_cache_image(&x, &[(ArmfWeights::identity(2), ArmfHeadConfig::fixed(vec![0.5]))]).unwrap();
    assert_eq!(c.layers[0].k, x.data());
    let c2 = armf_cache_image(&x, &[(ArmfWeights::identity(2), ArmfHeadConfig::fixed(vec![0.5]))]).unwrap();
    assert_eq!(c, c2);
}

#[test]
fn tied_heads_are_identical() {
    let d = 4;
    let vals: Vec<f64> = (0..5 * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let x = mat(5, d, &vals);
    let mut w = ArmfWeights::identity(d);
    w.w_q = Tensor::new(&[4, 4], {
        let mut v = vec![0.0; 16];
        for i in 0..4 {
            v[i * 4 + (i % 2)] = 1.0;
            v[i * 4 + 2 + (i % 2)] = 1.0;
        }
        v
    })
    .unwrap();
    w.w_k = w.w_q.clone();
    w.w_v = w.w_q.clone();
    let out = armf_parallel(&FusionSequence::new(x, 2).unwrap(), &w, &ArmfHeadConfig::fixed(vec![0.5, 0.5])).unwrap();
    for r in out.data().chunks(4) {
        assert_eq!(r[..2], r[2..]);
    }
}

#[test]
fn text_rows_are_not_normalized() {
    let x = mat(4, 2, &[0.9, -0.4, 0.3, 0.8, -0.7, 0.2, 0.5, 0.6]);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let vars = ArmfVars::record(&mut tape, &ArmfWeights::identity(2));
    let out = armf_tape(&mut tape, xv, 2, &vars, &ArmfHeadConfig::fixed(vec![0.5])).unwrap();
    let s = tape.value(out.text_scores[0]);
    let row_sum = s[6] + s[7];
    assert!((row_sum - 1.0).abs() > 1e-6);
}

#[test]
fn marmf_single_head_matches_armf() {
    let vals: Vec<f64> = (0..100).map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0).collect();
    let x = mat(5, 4, &vals);
    let w = weights(4, 1, &vals[20..], false);
    let sched = GammaSchedule::new(GammaStrategy::Original, 1, 1);
    let seq = FusionSequence::new(x, 2).unwrap();
    let a = marmf_forward(&seq, 0, &sched, &w, ImagePrior::None).unwrap();
    let g = sched.gamma_table().unwrap()[0].clone();
    let b = armf_parallel(&seq, &w, &ArmfHeadConfig::fixed(g)).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(marmf_forward(&seq, 1, &sched, &w, ImagePrior::None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parallel_equals_recurrent(c in case()) {
        let (w, cfg, seq) = (c.weights(), c.cfg(), c.seq());
        let p = armf_parallel(&seq, &w, &cfg).unwrap();
        let r = armf_recurrent(&seq, &w, &cfg).unwrap();
        prop_assert!(max_diff(p.data(), r.data()) <= 1e-10);
    }

    #[test]
    fn image_rows_ignore_text(c in case(), delta in -2.0f64..2.0) {
        prop_assume!(c.nt > 0 && delta != 0.0);
        let (w, cfg, seq) = (c.weights(), c.cfg(), c.seq());
        let a = armf_parallel(&seq, &w, &cfg).unwrap();
        let mut x = seq.x.clone();
        let k = c.ni * c.d + (c.vals.len() % (c.nt * c.d));
        x.data_mut()[k] += delta;
        let b = armf_parallel(&FusionSequence::new(x, c.ni).unwrap(), &w, &cfg).unwrap();
        prop_assert_eq!(&a.data()[..c.ni * c.d], &b.data()[..c.ni * c.d]);
    }

    #[test]
    fn text_rows_are_causal(c in case(), delta in 0.1f64..2.0) {
        prop_assume!(c.nt > 1);
        let (w, cfg, seq) = (c.weights(), c.cfg(), c.seq());
        let a = armf_parallel(&seq, &w, &cfg).unwrap();
        let t = c.nt - 1;
        let mut x = seq.x.clone();
        for v in &mut x.data_mut()[(c.ni + t) * c.d..] {
            *v += delta;
        }
        let b = armf_parallel(&FusionSequence::new(x, c.ni).unwrap(), &w, &cfg).unwrap();
        let keep = (c.ni + t) * c.d;
        prop_assert_eq!(&a.data()[..keep], &b.data()[..keep]);
    }

    #[test]
    fn image_gradients_from_text_vanish(c in case()) {
        prop_assume!(c.nt > 0);
        let (w, cfg, seq) = (c.weights(), c.cfg(), c.seq());
        let mut tape = Tape::new();
        let xv = tape.leaf(&seq.x.clone().with_requires_grad(true));
        let vars = ArmfVars::record(&mut tape, &w);
        let out = armf_tape(&mut tape, xv, c.ni, &vars, &cfg).unwrap();
        let img = tape.slice_rows(out.out, 0, c.ni).unwrap();
        let loss = tape.sum(img);
        let g = tape.backward(loss).unwrap().get_or_zeros(xv, seq.x.len());
        prop_assert!(g[c.ni * c.d..].iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn image_probabilities_sum_to_one(c in case()) {
        let (w, cfg, seq) = (c.weights(), c.cfg(), c.seq());
        let mut tape = Tape::new();
        let xv = tape.leaf(&seq.x);
        let vars = ArmfVars::record(&mut tape, &w);
        let out = armf_tape(&mut tape, xv, c.ni, &vars, &cfg).unwrap();
        for &p in &out.image_probs {
            for r in tape.value(p).chunks(c.ni) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
