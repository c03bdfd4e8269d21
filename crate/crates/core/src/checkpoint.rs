//! `ELASTRON1` checkpoints: a JSON manifest naming every tensor with its
//! shape and byte offset, next to one little-endian `f64` blob.
//!
//! `<stem>.manifest.json` + `<stem>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{DenseModel, ElasticModel, ModelConfig, Weights};
use crate::tensor::Tensor;

pub const MAGIC: &str = "ELASTRON1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub kind: String,
    pub blob: String,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".manifest.json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".bin")
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn exists(stem: &Path) -> bool {
        manifest_path(stem).is_file() && blob_path(stem).is_file()
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let blob_file = blob_path(stem);
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            magic: MAGIC.to_string(),
            kind: self.kind.clone(),
            blob: blob_file
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(&blob_file, blob)?;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(manifest_path(stem), text)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path(stem))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {MAGIC}",
                manifest.magic
            )));
        }
        let blob = fs::read(stem.with_file_name(&manifest.blob))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            if end > blob.len() || e.offset % 8 != 0 {
                return Err(Error::Format(format!(
                    "tensor {} spans bytes {}..{end} of a {}-byte blob",
                    e.name,
                    e.offset,
                    blob.len()
                )));
            }
            let data = blob[e.offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn weights_from(ck: &Checkpoint, num_layers: usize) -> Result<Weights> {
    let expected = Weights::from_tensors(
        ck.tensors.iter().map(|(_, t)| t.clone()).collect(),
        num_layers,
    )?;
    for ((name, _), want) in ck.tensors.iter().zip(expected.names()) {
        if *name != want {
            return Err(Error::Format(format!("tensor {name} where {want} expected")));
        }
    }
    Ok(expected)
}

fn push_weights(ck: &mut Checkpoint, w: &Weights) {
    for (name, t) in w.names().into_iter().zip(w.tensors()) {
        ck.push(name, t.clone());
    }
}

impl ElasticModel {
    pub fn to_checkpoint(&self, mut meta: Value) -> Result<Checkpoint> {
        if !meta.is_object() {
            meta = Value::Object(Default::default());
        }
        meta["config"] = serde_json::to_value(&self.config)?;
        let mut ck = Checkpoint::new("elastic", meta);
        push_weights(&mut ck, &self.weights);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("elastic")?;
        let config: ModelConfig = serde_json::from_value(
            ck.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("manifest lacks model config".into()))?,
        )?;
        config.validate()?;
        let weights = weights_from(ck, config.num_layers)?;
        Ok(Self { config, weights })
    }

    pub fn save(&self, stem: &Path, meta: Value) -> Result<()> {
        self.to_checkpoint(meta)?.save(stem)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(stem)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DenseMeta {
    vocab_size: usize,
    embed_dim: usize,
    head_dim: usize,
    context_len: usize,
    num_layers: usize,
}

impl DenseModel {
    pub fn to_checkpoint(&self, mut meta: Value) -> Result<Checkpoint> {
        if !meta.is_object() {
            meta = Value::Object(Default::default());
        }
        meta["dense"] = serde_json::to_value(DenseMeta {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            head_dim: self.head_dim,
            context_len: self.context_len,
            num_layers: self.weights.blocks.len(),
        })?;
        let mut ck = Checkpoint::new("dense", meta);
        push_weights(&mut ck, &self.weights);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("dense")?;
        let m: DenseMeta = serde_json::from_value(
            ck.meta
                .get("dense")
                .cloned()
                .ok_or_else(|| Error::Format("manifest lacks dense shape".into()))?,
        )?;
        Ok(Self {
            vocab_size: m.vocab_size,
            embed_dim: m.embed_dim,
            head_dim: m.head_dim,
            context_len: m.context_len,
            weights: weights_from(ck, m.num_layers)?,
        })
    }

    pub fn save(&self, stem: &Path, meta: Value) -> Result<()> {
        self.to_checkpoint(meta)?.save(stem)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(stem)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn small() -> ModelConfig {
        ModelConfig::evenly_spaced(16, 8, 2, 2, 8, 4, 2)
    }

    #[test]
    fn elastic_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let model = ElasticModel::new(small(), &mut Rng::new(3)).unwrap();
        model.save(&stem, serde_json::json!({"stage": "test"})).unwrap();
        let back = ElasticModel::load(&stem).unwrap();
        assert_eq!(model, back);
        let text = fs::read_to_string(manifest_path(&stem)).unwrap();
        assert!(text.contains("\"magic\": \"ELASTRON1\""));
        assert_eq!(
            fs::metadata(blob_path(&stem)).unwrap().len() as usize,
            8 * model.weights.tensors().iter().map(|t| t.len()).sum::<usize>()
        );
    }

    #[test]
    fn rejects_wrong_magic_and_kind() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let model = ElasticModel::new(small(), &mut Rng::new(3)).unwrap();
        model.save(&stem, Value::Null).unwrap();
        assert!(matches!(DenseModel::load(&stem), Err(Error::Format(_))));

        let path = manifest_path(&stem);
        let text = fs::read_to_string(&path).unwrap().replace("ELASTRON1", "ELASTRON0");
        fs::write(&path, text).unwrap();
        assert!(matches!(Checkpoint::load(&stem), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let mut ck = Checkpoint::new("misc", Value::Null);
        ck.push("a", Tensor::full(&[3], 1.5));
        ck.save(&stem).unwrap();
        fs::write(blob_path(&stem), [0u8; 16]).unwrap();
        assert!(matches!(Checkpoint::load(&stem), Err(Error::Format(_))));
    }
}
