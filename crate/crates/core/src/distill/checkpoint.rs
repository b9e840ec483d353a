//! Checkpoint directory: `config.json`, `vocab.json`, `manifest.json` and a
//! raw little-endian `weights.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::{Interner, Vocab};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{param_shapes, Model};
use crate::numeric::{ParamStore, Tensor};

use super::History;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `weights.bin`, in values.
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    pub total: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabItem {
    item_id: String,
    category_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra_features: Option<BTreeMap<String, String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    categories: Vec<String>,
    users: Vec<String>,
    items: Vec<VocabItem>,
}

impl VocabFile {
    fn from_vocab(v: &Vocab) -> Self {
        Self {
            categories: v.categories.names().to_vec(),
            users: v.users.names().to_vec(),
            items: (0..v.items.len())
                .map(|i| {
                    let it = v.item(i);
                    VocabItem { item_id: it.item_id, category_id: it.category_id, extra_features: it.extra_features }
                })
                .collect(),
        }
    }

    fn into_vocab(self) -> Result<Vocab> {
        let categories = Interner::from_names(self.categories)?;
        let users = Interner::from_names(self.users)?;
        let mut item_category = Vec::with_capacity(self.items.len());
        let mut item_features = Vec::with_capacity(self.items.len());
        let mut names = Vec::with_capacity(self.items.len());
        for it in self.items {
            let cat = categories
                .get(&it.category_id)
                .ok_or_else(|| Error::Corrupt(format!("item `{}` has unknown category `{}`", it.item_id, it.category_id)))?;
            item_category.push(cat);
            item_features.push(it.extra_features);
            names.push(it.item_id);
        }
        Ok(Vocab { items: Interner::from_names(names)?, categories, users, item_category, item_features })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `model` into directory `dir`, creating it if needed.
pub fn save(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut bytes = Vec::with_capacity(model.params.num_values() * 8);
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, length: t.numel() });
        offset += t.numel();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { tensors, total: offset };
    write_atomic(&dir.join(WEIGHTS_FILE), &bytes)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    write_atomic(&dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(&model.config)?)?;
    write_atomic(&dir.join(VOCAB_FILE), &serde_json::to_vec(&VocabFile::from_vocab(&model.vocab))?)?;
    Ok(())
}

/// Reads a checkpoint written by [`save`]. Size mismatches, truncated weights
/// and unknown or missing tensors are reported as [`Error::Corrupt`].
pub fn load(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let config: TrainConfig = serde_json::from_slice(&read(&dir.join(CONFIG_FILE))?)?;
    config.validate()?;
    let vocab: VocabFile = serde_json::from_slice(&read(&dir.join(VOCAB_FILE))?)?;
    let vocab = vocab.into_vocab()?;
    let manifest: Manifest = serde_json::from_slice(&read(&dir.join(MANIFEST_FILE))?)?;
    let bytes = read(&dir.join(WEIGHTS_FILE))?;
    if bytes.len() != manifest.total * 8 {
        return Err(Error::Corrupt(format!(
            "{WEIGHTS_FILE} holds {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total * 8
        )));
    }
    let expected: BTreeMap<&str, Vec<usize>> = param_shapes(&vocab, &config).into_iter().collect();
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        let Some(shape) = expected.get(e.name.as_str()).cloned() else {
            return Err(Error::Corrupt(format!("unknown tensor `{}`", e.name)));
        };
        if shape != e.shape || e.length != e.shape.iter().product::<usize>() {
            return Err(Error::Corrupt(format!("tensor `{}` has shape {:?}, expected {:?}", e.name, e.shape, shape)));
        }
        let end = e.offset.checked_add(e.length).filter(|&x| x <= manifest.total);
        let Some(end) = end else {
            return Err(Error::Corrupt(format!("tensor `{}` runs past the end of {WEIGHTS_FILE}", e.name)));
        };
        let data: Vec<f64> = bytes[e.offset * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params
            .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
            .map_err(|_| Error::Corrupt(format!("tensor `{}` listed twice", e.name)))?;
    }
    Model::from_params(Arc::new(vocab), config, params)
}

pub fn save_history(history: &History, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(HISTORY_FILE), &serde_json::to_vec_pretty(history)?)
}

pub fn load_history(dir: impl AsRef<Path>) -> Result<History> {
    Ok(serde_json::from_slice(&read(&dir.as_ref().join(HISTORY_FILE))?)?)
}
