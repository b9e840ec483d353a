//! Teacher-versus-student serving latency.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{CandidateEntry, Request};
use crate::cce::StudentScorer;
use crate::error::{Error, Result};
use crate::model::{Model, ITEM_EMB};
use crate::numeric::Tensor;
use crate::teacher::{mmr_select, MmrMode, TeacherInput};

use super::fuse_top_k;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub runs_ms: Vec<f64>,
}

impl Timing {
    fn from_runs(mut runs: Vec<f64>) -> Self {
        let raw = runs.clone();
        runs.sort_by(f64::total_cmp);
        let mid = runs.len() / 2;
        let median = if runs.len() % 2 == 1 { runs[mid] } else { (runs[mid - 1] + runs[mid]) / 2.0 };
        Self { median_ms: median, min_ms: runs[0], max_ms: runs[runs.len() - 1], runs_ms: raw }
    }
}

/// Operation counts at two problem sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub n: [usize; 2],
    pub k: [usize; 2],
    pub counts: [u64; 2],
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEnv {
    pub crate_version: String,
    pub debug_assertions: bool,
    pub target_arch: String,
    pub target_os: String,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub k: usize,
    pub repeats: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub teacher: Timing,
    pub student: Timing,
    /// Teacher median over student median.
    pub speedup: f64,
    pub teacher_similarity_evals: u64,
    pub student_comparisons: u64,
    /// Teacher similarity evaluations at `K/2` and `K`.
    pub teacher_scaling: Scaling,
    /// Student comparisons at `N/2` and `N`.
    pub student_scaling: Scaling,
    pub env: BenchEnv,
}

/// A model whose catalog has at least `n` items: extra items reuse trained
/// embedding rows with small Gaussian jitter.
fn bench_model(model: &Model, n: usize, seed: u64) -> Result<Model> {
    let have = model.vocab.items.len();
    if have >= n {
        return Ok(model.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = (*model.vocab).clone();
    let d = model.d();
    let old = model.params.get(ITEM_EMB)?;
    let mut rows = old.data().to_vec();
    let jitter = Tensor::randn(&[n - have, d], 0.01, &mut rng);
    for j in have..n {
        let name = format!("bench-item-{j}");
        let cat = vocab.categories.name(vocab.item_category[j % have]).to_string();
        vocab.intern_item(&name, &cat, None).map_err(Error::Contract)?;
        let src = old.row(j % have);
        rows.extend(src.iter().zip(jitter.row(j - have)).map(|(a, b)| a + b));
    }
    let mut params = model.params.clone();
    *params.get_mut(ITEM_EMB)? = Tensor::matrix(n, d, rows)?;
    Model::from_params(Arc::new(vocab), model.config.clone(), params)
}

fn bench_request(model: &Model, n: usize, seed: u64) -> Request {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<usize> = (0..model.vocab.items.len()).collect();
    items.shuffle(&mut rng);
    Request {
        request_id: format!("bench-{n}"),
        user: 0,
        candidates: items[..n].iter().map(|&item| CandidateEntry { item, label: None }).collect(),
    }
}

fn teacher_run(model: &Model, request: &Request, lambda: f64, k: usize) -> Result<u64> {
    let input = TeacherInput::from_model(model, request);
    Ok(mmr_select(&input, lambda, k, MmrMode::Recompute)?.similarity_evals)
}

fn student_run(model: &Model, request: &Request, gamma: f64, k: usize) -> Result<u64> {
    let acc = model.score_items(request.user, &request.items());
    let s = StudentScorer::new(model).score_request(request)?;
    let (_, _, c) = fuse_top_k(&acc, &s.y_stu, gamma, k)?;
    Ok(s.comparisons + c)
}

/// Times `a` and `b` in alternation after one warm-up call each, so that
/// drift in machine load hits both sides alike.
fn time_pair<A, B>(repeats: usize, mut a: A, mut b: B) -> Result<[(Timing, u64); 2]>
where
    A: FnMut() -> Result<u64>,
    B: FnMut() -> Result<u64>,
{
    let counts = [a()?, b()?];
    let mut runs = [Vec::with_capacity(repeats), Vec::with_capacity(repeats)];
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(a()?);
        runs[0].push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        std::hint::black_box(b()?);
        runs[1].push(t.elapsed().as_secs_f64() * 1e3);
    }
    let [ra, rb] = runs;
    Ok([(Timing::from_runs(ra), counts[0]), (Timing::from_runs(rb), counts[1])])
}

/// Single-threaded median latency of the MMR teacher (literal `O(N K²)`
/// recomputation) and of the student path (score all, heap Top-K) on one
/// synthetic request of `n` candidates, plus instrumented operation counts.
pub fn latency_bench(model: &Model, n: usize, k: usize, repeats: usize) -> Result<BenchReport> {
    if n < 2 || k == 0 || k > n || repeats == 0 {
        return Err(Error::Contract(format!("need 1 <= K <= N, N >= 2, repeats >= 1 (N = {n}, K = {k})")));
    }
    let (lambda, gamma) = (model.config.lambda, model.config.gamma);
    let big = bench_model(model, n, model.config.seed)?;
    let request = bench_request(&big, n, model.config.seed);

    let [(teacher, t_evals), (student, s_comps)] = time_pair(
        repeats,
        || teacher_run(&big, &request, lambda, k),
        || student_run(&big, &request, gamma, k),
    )?;

    let half_k = (k / 2).max(1);
    let t_half = teacher_run(&big, &request, lambda, half_k)?;
    let half_n = n / 2;
    let half_request = bench_request(&big, half_n.max(2), model.config.seed + 1);
    let s_half = student_run(&big, &half_request, gamma, k.min(half_n.max(2)))?;

    Ok(BenchReport {
        n,
        k,
        repeats,
        lambda,
        gamma,
        speedup: teacher.median_ms / student.median_ms,
        teacher,
        student,
        teacher_similarity_evals: t_evals,
        student_comparisons: s_comps,
        teacher_scaling: Scaling {
            n: [n, n],
            k: [half_k, k],
            counts: [t_half, t_evals],
            ratio: t_evals as f64 / t_half.max(1) as f64,
        },
        student_scaling: Scaling {
            n: [half_n, n],
            k: [k, k],
            counts: [s_half, s_comps],
            ratio: s_comps as f64 / s_half.max(1) as f64,
        },
        env: BenchEnv {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            debug_assertions: cfg!(debug_assertions),
            target_arch: std::env::consts::ARCH.to_string(),
            target_os: std::env::consts::OS.to_string(),
            threads: 1,
        },
    })
}
