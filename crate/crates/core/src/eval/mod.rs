//! Fused ranking and list metrics.

mod bench;

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::catalog::{Dataset, Request};
use crate::cce::StudentScorer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::dot;
use crate::parallel::par_map;
use crate::topk::top_k_counted;

pub use bench::{latency_bench, BenchReport, Scaling, Timing};

/// Top-K list of one request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub request_id: String,
    pub items: Vec<String>,
    /// Candidate positions of the listed items.
    pub positions: Vec<usize>,
    /// Fused scores `f + γ · y_stu`, nonincreasing.
    pub scores: Vec<f64>,
}

/// Per-candidate accuracy and student scores of one request.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestScores {
    pub acc: Vec<f64>,
    pub y_stu: Vec<f64>,
    pub comparisons: u64,
}

/// Backbone and student scores for every candidate.
pub fn score_request(model: &Model, request: &Request) -> Result<RequestScores> {
    let acc = model.score_items(request.user, &request.items());
    let s = StudentScorer::new(model).score_request(request)?;
    Ok(RequestScores { acc, y_stu: s.y_stu, comparisons: s.comparisons })
}

/// Heap Top-K of `f + γ · y` with ties broken by candidate position. Returns
/// positions, scores and the comparison count.
pub fn fuse_top_k(acc: &[f64], y_stu: &[f64], gamma: f64, k: usize) -> Result<(Vec<usize>, Vec<f64>, u64)> {
    if k > acc.len() {
        return Err(Error::Contract(format!("K = {k} exceeds the {} candidates", acc.len())));
    }
    let fused: Vec<f64> = acc.iter().zip(y_stu).map(|(f, y)| f + gamma * y).collect();
    let (top, comparisons) = top_k_counted(&fused, k);
    let scores = top.iter().map(|&p| fused[p]).collect();
    Ok((top, scores, comparisons))
}

/// Fused inference for one request.
pub fn fused_rank(request: &Request, model: &Model, gamma: f64, k: usize) -> Result<RankedList> {
    if k > request.len() {
        return Err(Error::Contract(format!("K = {k} exceeds the {} candidates", request.len())));
    }
    let s = score_request(model, request)?;
    let (positions, scores, _) = fuse_top_k(&s.acc, &s.y_stu, gamma, k)?;
    Ok(RankedList {
        request_id: request.request_id.clone(),
        items: positions
            .iter()
            .map(|&p| model.vocab.items.name(request.candidates[p].item).to_string())
            .collect(),
        positions,
        scores,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// `1 − mean cosine` over ordered pairs of distinct list positions.
pub fn ilad_at_k(embeddings: &[&[f64]]) -> Result<f64> {
    let k = embeddings.len();
    if k < 2 {
        return Err(Error::Contract(format!("ILAD needs at least 2 items, got {k}")));
    }
    if let Some(i) = embeddings.iter().position(|e| dot(e, e) == 0.0) {
        return Err(Error::Domain { op: "ilad_at_k", detail: format!("item {i} has a zero-norm embedding") });
    }
    let mut sum = 0.0;
    for x in 0..k {
        for y in 0..k {
            if x != y {
                sum += cosine(embeddings[x], embeddings[y]);
            }
        }
    }
    Ok(1.0 - sum / (k * (k - 1)) as f64)
}

/// Distinct categories across all lists over the vocabulary size.
pub fn cc_at_k(lists: &[Vec<usize>], num_categories: usize) -> Result<f64> {
    if num_categories == 0 {
        return Err(Error::Contract("empty category vocabulary".into()));
    }
    let covered: HashSet<usize> = lists.iter().flatten().copied().collect();
    Ok(covered.len() as f64 / num_categories as f64)
}

/// `|positives ∩ top| / |positives|`, `None` without positives.
pub fn recall_at_k(top: &[usize], positives: &[usize]) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let hits = positives.iter().filter(|p| top.contains(p)).count();
    Some(hits as f64 / positives.len() as f64)
}

/// Reciprocal rank of the first positive within the list (0 if none),
/// `None` without positives.
pub fn mrr_at_k(top: &[usize], positives: &[usize]) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    Some(
        top.iter()
            .position(|p| positives.contains(p))
            .map_or(0.0, |r| 1.0 / (r + 1) as f64),
    )
}

/// Area under the ROC curve with tied scores counted as half; `None` when
/// either class is empty.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&t| ranks[t] = avg);
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l > 0.5).map(|(r, _)| r).sum();
    Some((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub request_id: String,
    pub recall: Option<f64>,
    pub mrr: Option<f64>,
    pub ilad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestError {
    pub request_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub scoring_ms: f64,
    pub per_request_ms: f64,
}

/// Metrics of one `(K, γ)` setting over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub gamma: f64,
    pub recall: f64,
    pub mrr: f64,
    pub ilad: f64,
    pub cc: f64,
    pub requests: usize,
    /// Requests with at least one positive (the Recall/MRR denominator).
    pub eligible: usize,
    /// Requests skipped from Recall/MRR for lack of positives.
    pub without_positives: usize,
    pub per_request: Vec<RequestMetrics>,
    pub errors: Vec<RequestError>,
    pub wall_clock: WallClock,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores every request once, then reports each `(K, γ)` pair. A request
/// whose pool is smaller than `K` gets an error entry and the run continues.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    ks: &[usize],
    gammas: &[f64],
    threads: usize,
) -> Result<Vec<MetricReport>> {
    let start = Instant::now();
    let scored: Vec<Result<RequestScores>> = par_map(&dataset.requests, threads, |r| score_request(model, r));
    let scoring_ms = start.elapsed().as_secs_f64() * 1e3;
    let wall_clock = WallClock {
        scoring_ms,
        per_request_ms: scoring_ms / dataset.len().max(1) as f64,
    };
    let mut reports = Vec::with_capacity(ks.len() * gammas.len());
    for &k in ks {
        for &gamma in gammas {
            let mut per_request = Vec::new();
            let mut errors = Vec::new();
            let mut lists = Vec::new();
            for (r, s) in dataset.requests.iter().zip(&scored) {
                let outcome = s.as_ref().map_err(|e| e.to_string()).and_then(|s| {
                    let (top, _, _) = fuse_top_k(&s.acc, &s.y_stu, gamma, k).map_err(|e| e.to_string())?;
                    let embeddings: Vec<&[f64]> = top.iter().map(|&p| model.item_vec(r.candidates[p].item)).collect();
                    let ilad = ilad_at_k(&embeddings).map_err(|e| e.to_string())?;
                    Ok((top, ilad))
                });
                match outcome {
                    Ok((top, ilad)) => {
                        let positives = r.positives();
                        per_request.push(RequestMetrics {
                            request_id: r.request_id.clone(),
                            recall: recall_at_k(&top, &positives),
                            mrr: mrr_at_k(&top, &positives),
                            ilad,
                        });
                        lists.push(top.iter().map(|&p| model.vocab.category_of(r.candidates[p].item)).collect());
                    }
                    Err(error) => errors.push(RequestError { request_id: r.request_id.clone(), error }),
                }
            }
            let eligible = per_request.iter().filter(|m| m.recall.is_some()).count();
            reports.push(MetricReport {
                k,
                gamma,
                recall: mean(per_request.iter().filter_map(|m| m.recall)),
                mrr: mean(per_request.iter().filter_map(|m| m.mrr)),
                ilad: mean(per_request.iter().map(|m| m.ilad)),
                cc: cc_at_k(&lists, model.vocab.categories.len())?,
                requests: per_request.len(),
                eligible,
                without_positives: per_request.len() - eligible,
                per_request,
                errors,
                wall_clock: wall_clock.clone(),
            });
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn ilad_examples() {
        assert!(ilad_at_k(&[&[1.0, 2.0], &[1.0, 2.0]]).unwrap().abs() < 1e-12);
        assert_eq!(ilad_at_k(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), 1.0);
        let v = ilad_at_k(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert!(ilad_at_k(&[&[1.0, 0.0]]).is_err());
        assert!(ilad_at_k(&[&[1.0, 0.0], &[0.0, 0.0]]).is_err());
    }

    #[test]
    fn ilad_scale_and_order_invariance() {
        let a = ilad_at_k(&[&[1.0, 0.2], &[0.3, 1.0], &[-0.5, 0.5]]).unwrap();
        let b = ilad_at_k(&[&[-1.5, 1.5], &[7.0, 1.4], &[0.3, 1.0]]).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn cc_examples() {
        assert_eq!(cc_at_k(&[vec![2, 2, 2]], 4).unwrap(), 0.25);
        assert_eq!(cc_at_k(&[vec![0, 1], vec![1, 0]], 4).unwrap(), 0.5);
        assert_eq!(cc_at_k(&[vec![0, 1], vec![2, 3]], 4).unwrap(), 1.0);
        assert!(cc_at_k(&[], 0).is_err());
    }

    #[test]
    fn recall_mrr_examples() {
        assert_eq!(recall_at_k(&[0, 1, 2], &[1, 7]), Some(0.5));
        assert_eq!(mrr_at_k(&[4, 1, 2], &[1, 2]), Some(0.5));
        assert_eq!(mrr_at_k(&[4, 5], &[1]), Some(0.0));
        assert_eq!(recall_at_k(&[4, 5], &[]), None);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]), Some(0.75));
        assert_eq!(auc(&[0.5, 0.5], &[0.0, 1.0]), Some(0.5));
        assert_eq!(auc(&[0.5, 0.7], &[1.0, 1.0]), None);
    }

    #[test]
    fn gamma_zero_is_backbone_order() {
        let acc = [0.3, 0.9, 0.1, 0.5];
        let (top, scores, _) = fuse_top_k(&acc, &[0.9, 0.0, 0.2, 0.7], 0.0, 4).unwrap();
        assert_eq!(top, vec![1, 3, 0, 2]);
        assert_eq!(scores, vec![0.9, 0.5, 0.3, 0.1]);
        assert!(fuse_top_k(&acc, &acc, 0.1, 5).is_err());
    }

    proptest! {
        #[test]
        fn heap_equals_full_sort(
            acc in prop::collection::vec(0.0f64..1.0, 1..80),
            gamma in 0.0f64..0.3,
            k_seed in 0usize..100,
        ) {
            let y: Vec<f64> = acc.iter().map(|a| (a * 7.3).fract()).collect();
            let k = 1 + k_seed % acc.len();
            let (top, _, _) = fuse_top_k(&acc, &y, gamma, k).unwrap();
            let fused: Vec<f64> = acc.iter().zip(&y).map(|(a, b)| a + gamma * b).collect();
            prop_assert_eq!(top, crate::topk::sorted_top_k(&fused, k));
        }
    }
}
