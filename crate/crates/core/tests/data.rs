use proptest::prelude::*;
use retline_core::data::{
    augment, augment_gates, dilate, erode, line_width, render_line, render_sample, Vocab, EOS, LINE_HEIGHT, PAD, SOS,
};
use retline_core::metrics::{cer, corpus_rates, edit_distance, wer};

fn vocab() -> Vocab {
    Vocab::new("abcdefghij .".chars()).unwrap()
}

/// Plain O(nm) table, independent of the crate's row-rolling version.
fn edit_oracle(a: &[char], b: &[char]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

#[test]
fn render_is_deterministic_and_linear() {
    let a = render_line("A", 3).unwrap();
    assert_eq!(a, render_line("A", 3).unwrap());
    for n in 1..10 {
        let img = render_line(&"a".repeat(n), 1).unwrap();
        assert_eq!(img.shape(), &[1, LINE_HEIGHT, line_width(n)]);
        assert_eq!(line_width(n + 1) - line_width(n), line_width(2) - line_width(1));
    }
    assert!(render_line("", 0).is_err());
    assert!(render_line("é", 0).is_err());
    let img = render_line("ab", 0).unwrap();
    assert!(img.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(img.data().iter().any(|&v| v == 1.0));
}

#[test]
fn tokenization_examples() {
    let v = vocab();
    assert_eq!(v.tokenize("", 5).unwrap(), vec![SOS, EOS, PAD, PAD, PAD]);
    assert_eq!(v.tokenize("ab", 6).unwrap().len(), 6);
    assert!(v.tokenize("abcd", 5).is_err());
    assert!(v.tokenize("z", 5).is_err());
    assert_eq!(v.id('a').unwrap(), 3);
    assert!(Vocab::new("aa".chars()).is_err());
}

#[test]
fn metric_examples() {
    assert_eq!(cer("abc", "abc").unwrap(), 0.0);
    assert!((cer("kitten", "sitting").unwrap() - 3.0 / 7.0).abs() < 1e-15);
    assert_eq!(wer("a b", "a b").unwrap(), 0.0);
    assert_eq!(wer("a c", "a b").unwrap(), 0.5);
    assert!(cer("a", "").is_err());
    let (c, w) = corpus_rates([("ab", "ab"), ("a", "ab")]).unwrap();
    assert!((c - 0.25).abs() < 1e-15);
    assert!((w - 0.5).abs() < 1e-15);
}

#[test]
fn all_gates_off_is_identity() {
    let v = vocab();
    let s = render_sample("x", "abc", &v, 2).unwrap();
    let seed = (0..10_000u64).find(|&k| augment_gates(k).iter().all(|g| !g)).unwrap();
    assert_eq!(augment(&s, seed), s);
}

#[test]
fn morphology_monotone() {
    let img = render_line("hi.", 5).unwrap();
    let mass = |t: &retline_core::tensor::Tensor| t.data().iter().sum::<f64>();
    assert!(mass(&erode(&img)) <= mass(&img));
    assert!(mass(&dilate(&img)) >= mass(&img));
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select("abcdefghij .".chars().collect::<Vec<_>>()), 0..14).prop_map(|v| v.into_iter().collect())
}

proptest! {
    #[test]
    fn round_trip(s in text()) {
        let v = vocab();
        let ids = v.tokenize(&s, 16).unwrap();
        prop_assert_eq!(ids.len(), 16);
        prop_assert_eq!(v.detokenize(&ids), s);
    }

    #[test]
    fn augment_bounds(s in text(), seed in any::<u64>()) {
        prop_assume!(!s.is_empty());
        let v = vocab();
        let sample = render_sample("id", &s, &v, seed).unwrap();
        let out = augment(&sample, seed);
        prop_assert_eq!(&out.transcript, &sample.transcript);
        prop_assert_eq!(out.height(), sample.height());
        prop_assert_eq!(out.width() % 4, 0);
        prop_assert!(out.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert_eq!(augment(&sample, seed), out);
    }

    #[test]
    fn edit_distance_is_a_metric(a in text(), b in text(), c in text()) {
        let (a, b, c): (Vec<char>, Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect(), c.chars().collect());
        let ab = edit_distance(&a, &b);
        prop_assert_eq!(ab, edit_oracle(&a, &b));
        prop_assert_eq!(ab, edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
    }

    #[test]
    fn relabeling_keeps_geometry(s in text(), seed in 0u64..100) {
        prop_assume!(!s.is_empty());
        let v1 = Vocab::new("abcdefghij .".chars()).unwrap();
        let v2 = Vocab::new(". jihgfedcba".chars()).unwrap();
        let a = render_sample("x", &s, &v1, seed).unwrap();
        let b = render_sample("x", &s, &v2, seed).unwrap();
        prop_assert_eq!(a.image, b.image);
        prop_assert_eq!(v1.detokenize(&v1.tokenize(&s, 16).unwrap()), v2.detokenize(&v2.tokenize(&s, 16).unwrap()));
    }
}
