//! Interest-aware MMR teacher.
//!
//! Greedy list construction: the first pick is the most accurate item, every
//! later pick maximizes `f(u, i) + λ · (1 − max_{r ∈ R} sim_u(i, r))`, where
//! `sim_u(i, j) = σ((e_i ⊙ u) · (e_j ⊙ u))`. Its winners become the binary
//! distillation labels.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::Request;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{dot, sigmoid};

/// `σ((e_i ⊙ u) · (e_j ⊙ u))`.
pub fn interest_similarity(e_i: &[f64], e_j: &[f64], u: &[f64]) -> f64 {
    debug_assert!(e_i.len() == e_j.len() && e_j.len() == u.len());
    let s: f64 = e_i.iter().zip(e_j).zip(u).map(|((a, b), w)| a * w * b * w).sum();
    sigmoid(s)
}

/// `1 − max_{r ∈ selected} sim_u(e, r)`.
pub fn div_score(e: &[f64], selected: &[&[f64]], u: &[f64]) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::Contract("div_score needs a non-empty selected set".into()));
    }
    let max = selected
        .iter()
        .map(|r| interest_similarity(e, r, u))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(1.0 - max)
}

/// Everything the teacher reads about one request: accuracy scores and
/// interest-weighted embeddings `e_i ⊙ u`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherInput {
    pub acc: Vec<f64>,
    pub weighted: Vec<Vec<f64>>,
}

impl TeacherInput {
    /// Builds the input from raw item embeddings and a user vector.
    pub fn new(acc: Vec<f64>, embeddings: &[Vec<f64>], u: &[f64]) -> Result<Self> {
        if acc.len() != embeddings.len() {
            return Err(Error::dim("teacher input", format!("{} scores, {} embeddings", acc.len(), embeddings.len())));
        }
        let weighted = embeddings
            .iter()
            .map(|e| {
                if e.len() != u.len() {
                    return Err(Error::dim("teacher input", format!("embedding dim {} vs user dim {}", e.len(), u.len())));
                }
                Ok(e.iter().zip(u).map(|(a, b)| a * b).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { acc, weighted })
    }

    /// Detached snapshot of the current model for one request.
    pub fn from_model(model: &Model, request: &Request) -> Self {
        let items = request.items();
        let u = model.user_vec(request.user);
        Self {
            acc: model.score_items(request.user, &items),
            weighted: items
                .iter()
                .map(|&i| model.item_vec(i).iter().zip(u).map(|(a, b)| a * b).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    fn sim(&self, i: usize, j: usize) -> f64 {
        sigmoid(dot(&self.weighted[i], &self.weighted[j]))
    }
}

/// How the max-similarity term is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MmrMode {
    /// Recompute `max_{r ∈ R} sim(i, r)` from scratch at every step:
    /// `O(N K²)` similarity evaluations, as in the textbook algorithm.
    #[default]
    Recompute,
    /// Keep a running max per candidate: `O(N K)` evaluations, identical output.
    Cached,
}

/// One greedy step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Candidate position chosen at this step.
    pub position: usize,
    /// Its marginal gain.
    pub gain: f64,
}

/// Result of labeling one request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherLabeling {
    pub request_id: String,
    /// Winning candidate positions in selection order.
    pub winners: Vec<usize>,
    /// 1 for winners, 0 otherwise, per candidate position.
    pub labels: Vec<f64>,
    pub trace: Vec<TraceStep>,
    /// Similarity evaluations spent.
    pub similarity_evals: u64,
}

/// Marginal gain of candidate `i` given selected positions (step ≥ 2), computed
/// independently of the greedy loop.
pub fn marginal_gain(input: &TeacherInput, lambda: f64, i: usize, selected: &[usize]) -> f64 {
    if selected.is_empty() {
        return input.acc[i];
    }
    let max = selected.iter().map(|&r| input.sim(i, r)).fold(f64::NEG_INFINITY, f64::max);
    input.acc[i] + lambda * (1.0 - max)
}

/// Greedy interest-aware MMR over positions `0..N`. Ties go to the smaller
/// position.
pub fn mmr_select(input: &TeacherInput, lambda: f64, k: usize, mode: MmrMode) -> Result<TeacherLabeling> {
    let n = input.len();
    if k > n {
        return Err(Error::Contract(format!("teacher list size {k} exceeds candidate count {n}")));
    }
    if k == 0 {
        return Err(Error::Contract("teacher list size must be positive".into()));
    }
    let mut evals = 0u64;
    let mut chosen = vec![false; n];
    let mut winners = Vec::with_capacity(k);
    let mut trace = Vec::with_capacity(k);
    let mut max_sim = vec![f64::NEG_INFINITY; n];

    for step in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let gain = if step == 0 {
                input.acc[i]
            } else {
                let m = match mode {
                    MmrMode::Recompute => {
                        evals += winners.len() as u64;
                        winners.iter().map(|&r| input.sim(i, r)).fold(f64::NEG_INFINITY, f64::max)
                    }
                    MmrMode::Cached => max_sim[i],
                };
                input.acc[i] + lambda * (1.0 - m)
            };
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let (pick, gain) = best.expect("k <= n leaves a candidate");
        chosen[pick] = true;
        winners.push(pick);
        trace.push(TraceStep { position: pick, gain });
        if mode == MmrMode::Cached && step + 1 < k {
            for i in 0..n {
                if !chosen[i] {
                    evals += 1;
                    max_sim[i] = max_sim[i].max(input.sim(i, pick));
                }
            }
        }
    }
    let mut labels = vec![0.0; n];
    winners.iter().for_each(|&w| labels[w] = 1.0);
    Ok(TeacherLabeling { request_id: String::new(), winners, labels, trace, similarity_evals: evals })
}

/// A teacher that produces winning sets for requests.
pub trait Teacher {
    fn label(&self, model: &Model, request: &Request, k: usize) -> Result<TeacherLabeling>;
}

/// Interest-aware MMR with a fixed trade-off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmrTeacher {
    pub lambda: f64,
    pub mode: MmrMode,
}

impl Teacher for MmrTeacher {
    fn label(&self, model: &Model, request: &Request, k: usize) -> Result<TeacherLabeling> {
        let input = TeacherInput::from_model(model, request);
        let mut out = mmr_select(&input, self.lambda, k, self.mode)?;
        out.request_id = request.request_id.clone();
        Ok(out)
    }
}

/// Value of an ordered list: `Σ f + λ Σ_{h ≥ 2} (1 − max_{h' < h} sim)`.
pub fn list_objective(input: &TeacherInput, lambda: f64, order: &[usize]) -> f64 {
    order
        .iter()
        .enumerate()
        .map(|(h, &i)| marginal_gain(input, lambda, i, &order[..h]))
        .sum()
}

const MAX_SUBSETS: u128 = 1_000_000;
const MAX_ORDER_K: usize = 6;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else { return false };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive search over every size-`k` subset and every order of it.
/// Returns the best ordered list and its objective.
pub fn brute_force_best_subset(input: &TeacherInput, lambda: f64, k: usize) -> Result<(Vec<usize>, f64)> {
    let n = input.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    if binomial(n, k) > MAX_SUBSETS || k > MAX_ORDER_K {
        return Err(Error::Contract(format!(
            "exhaustive search over C({n}, {k}) subsets with K <= {MAX_ORDER_K} and at most {MAX_SUBSETS} subsets"
        )));
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut comb: Vec<usize> = (0..k).collect();
    loop {
        let mut order = comb.clone();
        loop {
            let v = list_objective(input, lambda, &order);
            if v > best.1 {
                best = (order.clone(), v);
            }
            if !next_permutation(&mut order) {
                break;
            }
        }
        // next combination in lexicographic order
        let Some(i) = (0..k).rev().find(|&i| comb[i] < n - k + i) else { break };
        comb[i] += 1;
        for j in i + 1..k {
            comb[j] = comb[j - 1] + 1;
        }
    }
    Ok(best)
}

#[derive(Serialize)]
struct LabelRecord<'a> {
    request_id: &'a str,
    winners: Vec<&'a str>,
    gains: Vec<f64>,
}

/// Writes one JSON line per labeling: request id, winning item ids and gains.
pub fn write_label_dump(
    path: impl AsRef<Path>,
    model: &Model,
    requests: &[Request],
    labelings: &[TeacherLabeling],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (r, l) in requests.iter().zip(labelings) {
        let rec = LabelRecord {
            request_id: &r.request_id,
            winners: l
                .winners
                .iter()
                .map(|&p| model.vocab.items.name(r.candidates[p].item))
                .collect(),
            gains: l.trace.iter().map(|s| s.gain).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
