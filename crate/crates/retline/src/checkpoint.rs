//! Checkpoints: `<name>.json` manifest plus `<name>.bin` little-endian f32 blob.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use retline_core::data::Vocab;
use retline_core::model::{Model, ModelConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub vocab: Option<Vocab>,
    pub tensors: Vec<TensorEntry>,
}

pub fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

pub fn save(model: &Model, vocab: Option<&Vocab>, base: &Path) -> Result<()> {
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params().names().iter().zip(model.params().tensors()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            dtype: "f32".into(),
        });
        for &v in t.data() {
            let f = v as f32;
            ensure!(f as f64 == v, "parameter {name} is not f32-representable");
            blob.extend_from_slice(&f.to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        config: model.config().clone(),
        vocab: vocab.cloned(),
        tensors,
    };
    let (json, bin) = paths(base);
    fs::write(&json, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", json.display()))?;
    fs::write(&bin, blob).with_context(|| format!("writing {}", bin.display()))?;
    Ok(())
}

/// Load a checkpoint; shapes are validated against the architecture the
/// manifest's config describes before any parameter is replaced.
pub fn load(base: &Path) -> Result<(Model, Option<Vocab>)> {
    let (json, bin) = paths(base);
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(&json).with_context(|| format!("reading {}", json.display()))?)
            .with_context(|| format!("parsing {}", json.display()))?;
    let blob = fs::read(&bin).with_context(|| format!("reading {}", bin.display()))?;
    ensure!(blob.len() % 4 == 0, "blob length {} is not a whole number of f32 values", blob.len());
    let floats: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            bail!("tensor {}: unsupported dtype {}", e.name, e.dtype);
        }
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .with_context(|| format!("tensor {} runs past the end of the blob", e.name))?;
        entries.push((e.name.clone(), e.shape.clone(), data.to_vec()));
    }
    let used: usize = entries.iter().map(|e| e.2.len()).sum();
    ensure!(used == floats.len(), "blob holds {} values but the manifest describes {used}", floats.len());
    let mut model = Model::new(manifest.config, 0)?;
    model.params_mut().load(entries)?;
    Ok((model, manifest.vocab))
}
