//! Synthetic datasets on disk: PGM images, a TSV manifest and a JSON sidecar.
//!
//! Manifest lines are `id<TAB>image_path<TAB>transcript`; image paths are
//! relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::Rng;
use retline_core::data::{render_sample, LineSample, Vocab};
use retline_core::rng::indexed_substream;
use serde::{Deserialize, Serialize};

use crate::pgm;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub samples: Vec<LineSample>,
}

/// Everything needed to regenerate a split exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub vocab: Vocab,
    pub alphabet: String,
    pub seed: u64,
    pub split: String,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
}

/// Stream index of a split, so train and validation never share draws.
fn split_index(split: &str) -> u64 {
    match split {
        "train" => 0,
        "val" => 1,
        "test" => 2,
        other => 3 + other.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)),
    }
}

/// Random strings over `alphabet` with lengths in `min_len..=max_len`.
pub fn synthetic_texts(alphabet: &str, count: usize, min_len: usize, max_len: usize, seed: u64, split: &str) -> Result<Vec<String>> {
    let chars: Vec<char> = alphabet.chars().collect();
    if chars.is_empty() || min_len == 0 || min_len > max_len {
        bail!("need a nonempty alphabet and 1 <= min_len <= max_len");
    }
    let mut rng = indexed_substream(seed, "data", split_index(split));
    Ok((0..count)
        .map(|_| {
            let n = rng.gen_range(min_len..=max_len);
            (0..n).map(|_| chars[rng.gen_range(0..chars.len())]).collect()
        })
        .collect())
}

pub fn generate(alphabet: &str, count: usize, min_len: usize, max_len: usize, seed: u64, split: &str) -> Result<(Dataset, Sidecar)> {
    let vocab = Vocab::new(alphabet.chars())?;
    let texts = synthetic_texts(alphabet, count, min_len, max_len, seed, split)?;
    let base = split_index(split) << 32;
    let samples = texts
        .iter()
        .enumerate()
        .map(|(i, t)| render_sample(format!("{split}-{i:05}"), t, &vocab, seed ^ (base + i as u64)))
        .collect::<retline_core::Result<Vec<_>>>()?;
    let sidecar = Sidecar {
        vocab: vocab.clone(),
        alphabet: alphabet.into(),
        seed,
        split: split.into(),
        count,
        min_len,
        max_len,
    };
    Ok((Dataset { vocab, samples }, sidecar))
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

/// Write images under `dir/images/`, the manifest and the sidecar.
pub fn write(dir: &Path, split: &str, data: &Dataset, sidecar: &Sidecar) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    let mut manifest = String::new();
    for s in &data.samples {
        if s.id.contains('\t') || s.transcript.contains(['\t', '\n', '\r']) {
            bail!("sample {} cannot be written to a TSV manifest", s.id);
        }
        let rel = format!("images/{}.pgm", s.id);
        pgm::write_image(&dir.join(&rel), &s.image)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", s.id, rel, s.transcript));
    }
    let path = manifest_path(dir, split);
    fs::write(&path, manifest)?;
    fs::write(dir.join(format!("{split}.json")), serde_json::to_string_pretty(sidecar)?)?;
    Ok(path)
}

/// Parse a manifest's text into `(line, id, image path, transcript)`.
pub fn parse_manifest(text: &str) -> Result<Vec<(usize, String, String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(path), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
            bail!("manifest line {line_no}: expected id<TAB>image<TAB>transcript");
        };
        if id.is_empty() || path.is_empty() {
            bail!("manifest line {line_no}: empty id or image path");
        }
        if !seen.insert(id.to_string()) {
            bail!("manifest line {line_no}: duplicate id `{id}`");
        }
        out.push((line_no, id.into(), path.into(), text.into()));
    }
    Ok(out)
}

/// Load a manifest; every transcript must be covered by `vocab`.
pub fn load_manifest(path: &Path, vocab: &Vocab) -> Result<Vec<LineSample>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let root = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text)?
        .into_iter()
        .map(|(line, id, img, transcript)| {
            vocab
                .contains_all(&transcript)
                .with_context(|| format!("manifest line {line}: transcript outside the vocabulary"))?;
            let image = pgm::read_image(&root.join(&img)).with_context(|| format!("manifest line {line}"))?;
            Ok(LineSample { id, image, transcript })
        })
        .collect()
}

/// Load a manifest with the vocabulary from its sidecar, or from the
/// transcripts when no sidecar exists.
pub fn load(path: &Path) -> Result<Dataset> {
    let sidecar = path.with_extension("json");
    let vocab = if sidecar.exists() {
        let s: Sidecar = serde_json::from_str(&fs::read_to_string(&sidecar)?).with_context(|| format!("parsing {}", sidecar.display()))?;
        s.vocab
    } else {
        let text = fs::read_to_string(path)?;
        let rows = parse_manifest(&text)?;
        Vocab::from_corpus(rows.iter().map(|r| r.3.as_str()))?
    };
    let samples = load_manifest(path, &vocab)?;
    Ok(Dataset { vocab, samples })
}
