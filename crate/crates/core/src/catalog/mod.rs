//! Requests, candidate pools and the vocabularies that map external string
//! ids to dense table rows.

mod jsonl;
mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use jsonl::{load_jsonl, parse_jsonl, to_jsonl, write_jsonl};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticSpec, SyntheticWorld};

/// String ↔ dense id table; ids are assigned in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Corrupt(format!("duplicate vocabulary entry `{n}`")));
            }
        }
        Ok(Self { names, index })
    }
}

/// A catalog item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub item_id: String,
    pub category_id: String,
    pub extra_features: Option<BTreeMap<String, String>>,
}

/// Item, category and user vocabularies of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    pub items: Interner,
    pub categories: Interner,
    pub users: Interner,
    /// Category id of every item.
    pub item_category: Vec<usize>,
    pub item_features: Vec<Option<BTreeMap<String, String>>>,
}

impl Vocab {
    pub fn item_id(&self, name: &str) -> Result<usize> {
        self.items
            .get(name)
            .ok_or_else(|| Error::OutOfVocabulary { kind: "item", id: name.to_string() })
    }

    pub fn user_id(&self, name: &str) -> Result<usize> {
        self.users
            .get(name)
            .ok_or_else(|| Error::OutOfVocabulary { kind: "user", id: name.to_string() })
    }

    pub fn item(&self, id: usize) -> Item {
        Item {
            item_id: self.items.name(id).to_string(),
            category_id: self.categories.name(self.item_category[id]).to_string(),
            extra_features: self.item_features[id].clone(),
        }
    }

    pub fn category_of(&self, item: usize) -> usize {
        self.item_category[item]
    }

    /// Interns an item, checking that it keeps a single category.
    pub(crate) fn intern_item(
        &mut self,
        item_id: &str,
        category_id: &str,
        features: Option<BTreeMap<String, String>>,
    ) -> std::result::Result<usize, String> {
        let cat = self.categories.intern(category_id);
        match self.items.get(item_id) {
            Some(i) => {
                if self.item_category[i] != cat {
                    return Err(format!(
                        "item `{item_id}` has category `{category_id}`, previously `{}`",
                        self.categories.name(self.item_category[i])
                    ));
                }
                Ok(i)
            }
            None => {
                let i = self.items.intern(item_id);
                self.item_category.push(cat);
                self.item_features.push(features);
                Ok(i)
            }
        }
    }
}

/// One candidate of a request. `label` is present only for shown items.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateEntry {
    pub item: usize,
    pub label: Option<bool>,
}

/// One user request with its candidate pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub request_id: String,
    pub user: usize,
    pub candidates: Vec<CandidateEntry>,
}

impl Request {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn items(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.item).collect()
    }

    /// Positions of candidates labeled 1.
    pub fn positives(&self) -> Vec<usize> {
        self.candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.label == Some(true))
            .map(|(i, _)| i)
            .collect()
    }

    /// `(position, label)` of every shown candidate.
    pub fn shown(&self) -> Vec<(usize, f64)> {
        self.candidates
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.label.map(|l| (i, if l { 1.0 } else { 0.0 })))
            .collect()
    }
}

/// Requests sharing one vocabulary. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: Arc<Vocab>,
    pub requests: Vec<Request>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn min_candidates(&self) -> usize {
        self.requests.iter().map(Request::len).min().unwrap_or(0)
    }

    /// The same requests expressed in another vocabulary (typically a
    /// trained model's). Unknown users or items and category disagreements
    /// are errors.
    pub fn reindex(&self, vocab: Arc<Vocab>) -> Result<Dataset> {
        if Arc::ptr_eq(&self.vocab, &vocab) {
            return Ok(self.clone());
        }
        let mut requests = Vec::with_capacity(self.requests.len());
        for r in &self.requests {
            let user = vocab.user_id(self.vocab.users.name(r.user))?;
            let mut candidates = Vec::with_capacity(r.len());
            for c in &r.candidates {
                let name = self.vocab.items.name(c.item);
                let item = vocab.item_id(name)?;
                let ours = self.vocab.categories.name(self.vocab.item_category[c.item]);
                let theirs = vocab.categories.name(vocab.item_category[item]);
                if ours != theirs {
                    return Err(Error::Contract(format!(
                        "item `{name}` has category `{ours}` here but `{theirs}` in the target vocabulary"
                    )));
                }
                candidates.push(CandidateEntry { item, label: c.label });
            }
            requests.push(Request { request_id: r.request_id.clone(), user, candidates });
        }
        Ok(Dataset { vocab, requests })
    }

    /// Same vocabulary, a subset of requests.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            vocab: Arc::clone(&self.vocab),
            requests: indices.iter().map(|&i| self.requests[i].clone()).collect(),
        }
    }
}

/// Request-level split into `(train, eval)`, deterministic under `seed`.
/// Both sides keep the original relative order and share the vocabulary.
pub fn split_train_eval(dataset: &Dataset, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::config("eval_fraction", format!("must be in (0, 1), got {eval_fraction}")));
    }
    let n = dataset.len();
    let n_eval = (eval_fraction * n as f64).round() as usize;
    if n_eval == 0 || n_eval == n {
        return Err(Error::Contract(format!(
            "split of {n} requests with eval fraction {eval_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut eval_idx = order[..n_eval].to_vec();
    let mut train_idx = order[n_eval..].to_vec();
    eval_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&eval_idx)))
}
