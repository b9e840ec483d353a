//! Seeded generator of clustered candidate pools.
//!
//! Items live on the unit sphere around per-category centers, so every pool
//! contains tight groups of near-duplicates (items from the same category) next
//! to unrelated items. Users prefer one to three categories, drawn with a
//! Zipf-like skew, and candidate pools oversample those categories.

use std::collections::HashSet;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CandidateEntry, Dataset, Request, Vocab};
use crate::error::{Error, Result};
use crate::numeric::{dot, sigmoid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_users: usize,
    pub num_requests: usize,
    pub catalog_size: usize,
    pub num_categories: usize,
    pub candidates_per_request: usize,
    pub latent_dim: usize,
    /// Standard deviation of the per-coordinate noise around a category center.
    pub cluster_noise: f64,
    /// Fraction of each pool that is shown to the user and labeled.
    pub show_fraction: f64,
    /// Sharpness of the click model `σ(κ · (⟨user, item⟩ − ½))`.
    pub preference_concentration: f64,
    /// Fraction of each pool drawn from the user's preferred categories.
    pub preferred_fraction: f64,
    /// Zipf exponent of category popularity when users pick preferences.
    pub category_skew: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_users: 200,
            num_requests: 2400,
            catalog_size: 8000,
            num_categories: 80,
            candidates_per_request: 200,
            latent_dim: 16,
            cluster_noise: 0.1,
            show_fraction: 0.3,
            preference_concentration: 8.0,
            preferred_fraction: 0.4,
            category_skew: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_users", self.num_users),
            ("num_requests", self.num_requests),
            ("catalog_size", self.catalog_size),
            ("num_categories", self.num_categories),
            ("latent_dim", self.latent_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.candidates_per_request < 2 {
            return Err(Error::config("candidates_per_request", "need at least 2 candidates (N >= 2)"));
        }
        if self.candidates_per_request > self.catalog_size {
            return Err(Error::config("candidates_per_request", "exceeds catalog_size"));
        }
        if self.num_categories > self.catalog_size {
            return Err(Error::config("num_categories", "exceeds catalog_size"));
        }
        if !(self.show_fraction > 0.0 && self.show_fraction <= 1.0) {
            return Err(Error::config("show_fraction", "must be in (0, 1]"));
        }
        if !(self.preferred_fraction >= 0.0 && self.preferred_fraction <= 1.0) {
            return Err(Error::config("preferred_fraction", "must be in [0, 1]"));
        }
        for (field, v) in [
            ("cluster_noise", self.cluster_noise),
            ("preference_concentration", self.preference_concentration),
            ("category_skew", self.category_skew),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Latent structure behind a generated dataset, indexed by vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub category_centers: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    pub user_latent: Vec<Vec<f64>>,
    /// Preferred category ids (vocabulary ids) per user.
    pub user_preferences: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates requests only; see [`SyntheticWorld::generate`] for the latents.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(SyntheticWorld::generate(spec)?.dataset)
}

impl SyntheticWorld {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dim = spec.latent_dim;
        let g = spec.num_categories;

        let centers: Vec<Vec<f64>> = (0..g).map(|_| normalize(gaussian(&mut rng, dim))).collect();
        let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); g];
        let item_latent: Vec<Vec<f64>> = (0..spec.catalog_size)
            .map(|j| {
                let c = j % g;
                by_category[c].push(j);
                let noise = gaussian(&mut rng, dim);
                normalize(
                    centers[c]
                        .iter()
                        .zip(noise)
                        .map(|(m, e)| m + spec.cluster_noise * e)
                        .collect(),
                )
            })
            .collect();

        let popularity: Vec<f64> = (0..g).map(|c| ((c + 1) as f64).powf(-spec.category_skew)).collect();
        let mut user_prefs = Vec::with_capacity(spec.num_users);
        let mut user_latent = Vec::with_capacity(spec.num_users);
        for _ in 0..spec.num_users {
            let m = rng.random_range(1..=3usize).min(g);
            let mut weights = popularity.clone();
            let mut prefs = Vec::with_capacity(m);
            for _ in 0..m {
                let pick = WeightedIndex::new(&weights).expect("positive weights").sample(&mut rng);
                weights[pick] = 0.0;
                prefs.push(pick);
            }
            let mut sum = vec![0.0; dim];
            for &c in &prefs {
                sum.iter_mut().zip(&centers[c]).for_each(|(s, x)| *s += x);
            }
            user_latent.push(normalize(sum));
            user_prefs.push(prefs);
        }

        let n = spec.candidates_per_request;
        let n_shown = ((spec.show_fraction * n as f64).ceil() as usize).min(n);
        let mut vocab = Vocab::default();
        let mut requests = Vec::with_capacity(spec.num_requests);
        let mut catalog_of_item: Vec<usize> = Vec::new();
        let mut catalog_of_user: Vec<usize> = Vec::new();

        for r in 0..spec.num_requests {
            let user = rng.random_range(0..spec.num_users);
            let prefs = &user_prefs[user];
            let pref_pool: usize = prefs.iter().map(|&c| by_category[c].len()).sum();
            let n_pref = ((spec.preferred_fraction * n as f64).round() as usize).min(pref_pool);

            let mut chosen = HashSet::with_capacity(n);
            let mut pool = Vec::with_capacity(n);
            while pool.len() < n_pref {
                let c = prefs[rng.random_range(0..prefs.len())];
                let item = by_category[c][rng.random_range(0..by_category[c].len())];
                if chosen.insert(item) {
                    pool.push(item);
                }
            }
            while pool.len() < n {
                let item = rng.random_range(0..spec.catalog_size);
                if chosen.insert(item) {
                    pool.push(item);
                }
            }
            pool.shuffle(&mut rng);

            let mut shown: Vec<usize> = (0..n).collect();
            shown.shuffle(&mut rng);
            let mut labels = vec![None; n];
            for &pos in &shown[..n_shown] {
                let affinity = dot(&user_latent[user], &item_latent[pool[pos]]);
                let p = sigmoid(spec.preference_concentration * (affinity - 0.5));
                labels[pos] = Some(rng.random_bool(p));
            }

            let user_name = format!("u{user}");
            let uid = vocab.users.intern(&user_name);
            if uid == catalog_of_user.len() {
                catalog_of_user.push(user);
            }
            let candidates = pool
                .iter()
                .zip(labels)
                .map(|(&item, label)| {
                    let id = vocab
                        .intern_item(&format!("i{item}"), &format!("c{}", item % g), None)
                        .expect("generator keeps one category per item");
                    if id == catalog_of_item.len() {
                        catalog_of_item.push(item);
                    }
                    CandidateEntry { item: id, label }
                })
                .collect();
            requests.push(Request { request_id: format!("r{r}"), user: uid, candidates });
        }

        let cat_vocab = |c: usize| vocab.categories.get(&format!("c{c}"));
        let truth = GroundTruth {
            category_centers: (0..vocab.categories.len())
                .map(|vid| {
                    let name = vocab.categories.name(vid);
                    centers[name[1..].parse::<usize>().expect("generated name")].clone()
                })
                .collect(),
            item_latent: catalog_of_item.iter().map(|&j| item_latent[j].clone()).collect(),
            user_latent: catalog_of_user.iter().map(|&u| user_latent[u].clone()).collect(),
            user_preferences: catalog_of_user
                .iter()
                .map(|&u| user_prefs[u].iter().filter_map(|&c| cat_vocab(c)).collect())
                .collect(),
        };
        Ok(Self { dataset: Dataset { vocab: Arc::new(vocab), requests }, truth })
    }
}
