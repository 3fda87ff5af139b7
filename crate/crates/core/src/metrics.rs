//! Edit distance and error rates.

use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = alloc::vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over reference length.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(invalid("cer", "empty reference"));
    }
    let h: Vec<char> = hyp.chars().collect();
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

/// Word error rate over whitespace-separated words.
pub fn wer(hyp: &str, reference: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return Err(invalid("wer", "empty reference"));
    }
    let h: Vec<&str> = hyp.split_whitespace().collect();
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

/// Corpus-level rates: total edits over total reference length.
pub fn corpus_rates<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(f64, f64)> {
    let (mut ce, mut cn, mut we, mut wn) = (0, 0, 0, 0);
    for (h, r) in pairs {
        let (hc, rc): (Vec<char>, Vec<char>) = (h.chars().collect(), r.chars().collect());
        ce += edit_distance(&hc, &rc);
        cn += rc.len();
        let (hw, rw): (Vec<&str>, Vec<&str>) = (h.split_whitespace().collect(), r.split_whitespace().collect());
        we += edit_distance(&hw, &rw);
        wn += rw.len();
    }
    if cn == 0 || wn == 0 {
        return Err(invalid("corpus_rates", "empty references"));
    }
    Ok((ce as f64 / cn as f64, we as f64 / wn as f64))
}
