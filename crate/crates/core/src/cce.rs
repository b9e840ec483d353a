//! Contrastive context encoder and the student win-probability head.
//!
//! For a target candidate `t` with projected query `q = e_t W_q`, attention
//! logits over the other candidates are `w_j = q · (e_j W_k) / √d`. A
//! positive context is drawn with Gumbel-Top-k on `log softmax(w)` and pooled
//! with attention weights, a negative context is drawn on `log softmax(−w)`
//! and pooled with anti-attention weights. Both are fused with the user vector
//! by a small FFN into `C`, and the student predicts `y = σ(q · C)`.
//!
//! Training goes through the tape ([`student_forward`]); serving goes through
//! plain code ([`StudentScorer`]) that drops the noise and takes hard top-k
//! draws, so a request costs `O(N · P · d)` for a context pool of `P`.

use rand::Rng;

use crate::catalog::Request;
use crate::error::{Error, Result};
use crate::model::{
    dense, dense_relu, maybe_dropout, Model, CCE_KEY, CCE_QUERY, CCE_VALUE, FFN_B1, FFN_B2, FFN_W1, FFN_W2,
    ITEM_EMB, USER_EMB,
};
use crate::numeric::{dot, sigmoid, softplus, Bound, Tape, Tensor, Var};
use crate::sampler::{perturb, relaxed_topk, sample_gumbel, relaxed_topk_log};
use crate::topk::Selector;

/// `w_j = q · key_j / √d` where `d = q.len()`.
pub fn scaled_scores(q: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    let s = (q.len() as f64).sqrt();
    keys.iter().map(|k| dot(q, k) / s).collect()
}

/// `x · W` for a row vector and a row-major `W` with `x.len()` rows.
fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (_, n) = w.rows_cols();
    let mut out = vec![0.0; n];
    dense(x, w.data(), &vec![0.0; n], &mut out);
    out
}

/// Context pool of target `t` among `n` candidates: every other position, or
/// an evenly strided subset of `cap` of them when `n − 1 > cap`. Never
/// contains `t`.
pub fn context_pool(n: usize, t: usize, cap: usize) -> Vec<usize> {
    let mut out = Vec::new();
    context_pool_into(n, t, cap, &mut out);
    out
}

/// [`context_pool`] into a reused buffer.
pub fn context_pool_into(n: usize, t: usize, cap: usize, out: &mut Vec<usize>) {
    PoolOffsets::new(n, cap).fill(t, out);
}

/// Pool positions relative to the target; the same for every target of a
/// request, so the strided case needs no division per entry.
struct PoolOffsets {
    n: usize,
    offsets: Vec<usize>,
}

impl PoolOffsets {
    fn new(n: usize, cap: usize) -> Self {
        let offsets = if n - 1 <= cap { (1..n).collect() } else { (0..cap).map(|j| 1 + j * (n - 1) / cap).collect() };
        Self { n, offsets }
    }

    fn fill(&self, t: usize, out: &mut Vec<usize>) {
        out.clear();
        out.extend(self.offsets.iter().map(|&o| if t + o >= self.n { t + o - self.n } else { t + o }));
        if self.offsets.len() == self.n - 1 {
            // full pool: keep position order
            out.sort_unstable();
        }
    }
}

/// Attention logits of candidate `target` against the whole request, with the
/// target's own entry set to `−∞`.
pub fn attention_scores(model: &Model, request: &Request, target: usize) -> Vec<f64> {
    let q = project(model.item_vec(request.candidates[target].item), model.params.get(CCE_QUERY).expect("param"));
    let wk = model.params.get(CCE_KEY).expect("param");
    let keys: Vec<Vec<f64>> = request
        .candidates
        .iter()
        .map(|c| project(model.item_vec(c.item), wk))
        .collect();
    let mut w = scaled_scores(&q, &keys);
    w[target] = f64::NEG_INFINITY;
    w
}

/// One sampled context: candidate positions and their perturbed weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextDraw {
    pub positions: Vec<usize>,
    pub perturbed: Vec<f64>,
    /// Relaxed k-hot vector over the finite entries of `w`, in position order.
    pub relaxed: Vec<f64>,
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn draw<R: Rng + ?Sized>(pool: &[usize], logits: &[f64], k: usize, tau: f64, rng: &mut R) -> Result<ContextDraw> {
    let perturbed = perturb(&log_softmax(logits), rng);
    let relaxed = relaxed_topk(&perturbed, k, tau)?;
    Ok(ContextDraw {
        positions: relaxed.hard.iter().map(|&h| pool[h]).collect(),
        perturbed: relaxed.hard.iter().map(|&h| perturbed[h]).collect(),
        relaxed: relaxed.a,
    })
}

/// Independent positive and negative Gumbel-Top-k draws from attention logits
/// `w` (entries equal to `−∞` are excluded, i.e. the target).
pub fn sample_contexts<R: Rng + ?Sized>(
    w: &[f64],
    k: usize,
    tau: f64,
    rng: &mut R,
) -> Result<(ContextDraw, ContextDraw)> {
    let pool: Vec<usize> = (0..w.len()).filter(|&j| w[j].is_finite()).collect();
    if 2 * k > pool.len() {
        return Err(Error::Contract(format!(
            "context size 2k = {} exceeds the {} candidates besides the target",
            2 * k,
            pool.len()
        )));
    }
    let logits: Vec<f64> = pool.iter().map(|&j| w[j]).collect();
    let neg: Vec<f64> = logits.iter().map(|v| -v).collect();
    let positive = draw(&pool, &logits, k, tau, rng)?;
    let negative = draw(&pool, &neg, k, tau, rng)?;
    Ok((positive, negative))
}

fn pool_rows(weights: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
    let m = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = weights.iter().map(|w| (w - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (ei, v) in e.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += ei / z * x;
        }
    }
    out
}

/// `softmax(w̃) · V` over the sampled value rows.
pub fn positive_context(perturbed: &[f64], values: &[Vec<f64>]) -> Result<Vec<f64>> {
    if perturbed.is_empty() || perturbed.len() != values.len() {
        return Err(Error::dim("positive_context", format!("{} weights, {} rows", perturbed.len(), values.len())));
    }
    Ok(pool_rows(perturbed, values))
}

/// `softmax(−w̃) · V` over the sampled value rows.
pub fn negative_context(perturbed: &[f64], values: &[Vec<f64>]) -> Result<Vec<f64>> {
    if perturbed.is_empty() || perturbed.len() != values.len() {
        return Err(Error::dim("negative_context", format!("{} weights, {} rows", perturbed.len(), values.len())));
    }
    let neg: Vec<f64> = perturbed.iter().map(|v| -v).collect();
    Ok(pool_rows(&neg, values))
}

/// `−log( e^{q·C⁺/t} / (e^{q·C⁺/t} + e^{q·C⁻/t}) )`.
pub fn infonce_loss(q: &[f64], c_pos: &[f64], c_neg: &[f64], t: f64) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::domain("infonce_loss", format!("temperature must be positive, got {t}")));
    }
    Ok(softplus((dot(q, c_neg) - dot(q, c_pos)) / t))
}

/// Eval-mode fusion `C = FFN(concat(u ⊙ C⁺, u ⊙ C⁻))`.
pub fn fuse_context(model: &Model, u: &[f64], c_pos: &[f64], c_neg: &[f64]) -> Vec<f64> {
    FuseBuffers::new(model).fuse(u, c_pos, c_neg).to_vec()
}

/// `σ(q · C)`.
pub fn win_probability(q: &[f64], c: &[f64]) -> f64 {
    sigmoid(dot(q, c))
}

/// Serving-time student outputs for one request.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StudentEval {
    pub y_stu: Vec<f64>,
    /// `q · C⁺` per candidate.
    pub pos_logit: Vec<f64>,
    /// `q · C⁻` per candidate.
    pub neg_logit: Vec<f64>,
    /// Score comparisons spent selecting contexts.
    pub comparisons: u64,
}

/// Deterministic serving path: no noise, hard top-k positive and bottom-k
/// negative contexts over each target's context pool.
pub struct StudentScorer<'m> {
    model: &'m Model,
    wq: &'m Tensor,
    wk: &'m Tensor,
    wv: &'m Tensor,
}

impl<'m> StudentScorer<'m> {
    pub fn new(model: &'m Model) -> Self {
        let p = |n| model.params.get(n).expect("param");
        Self { model, wq: p(CCE_QUERY), wk: p(CCE_KEY), wv: p(CCE_VALUE) }
    }

    pub fn score_request(&self, request: &Request) -> Result<StudentEval> {
        self.score_items(request.user, &request.items())
    }

    /// Student outputs for every candidate of a pool.
    pub fn score_items(&self, user: usize, items: &[usize]) -> Result<StudentEval> {
        let cfg = &self.model.config;
        let (n, d, k) = (items.len(), cfg.d, cfg.k);
        let pool_width = (n.max(1) - 1).min(cfg.context_pool);
        if 2 * k > pool_width {
            return Err(Error::Contract(format!(
                "context size 2k = {} exceeds the context pool of {pool_width} for N = {n}",
                2 * k
            )));
        }
        let mut queries = vec![0.0; n * d];
        let mut keys = vec![0.0; n * d];
        let mut values = vec![0.0; n * d];
        let zeros = vec![0.0; d];
        let emb = self.model.params.get(ITEM_EMB).expect("param");
        for (r, &i) in items.iter().enumerate() {
            let e = emb.row(i);
            let rows = r * d..(r + 1) * d;
            dense(e, self.wq.data(), &zeros, &mut queries[rows.clone()]);
            dense(e, self.wk.data(), &zeros, &mut keys[rows.clone()]);
            dense(e, self.wv.data(), &zeros, &mut values[rows]);
        }
        let u = self.model.user_vec(user);
        let scale = 1.0 / (d as f64).sqrt();
        let key_rows: Vec<&[f64]> = keys.chunks_exact(d).collect();
        let mut out = StudentEval {
            y_stu: Vec::with_capacity(n),
            pos_logit: Vec::with_capacity(n),
            neg_logit: Vec::with_capacity(n),
            comparisons: 0,
        };
        let offsets = PoolOffsets::new(n, cfg.context_pool);
        let mut pool = Vec::with_capacity(pool_width);
        let mut w = Vec::with_capacity(pool_width);
        let mut select = Selector::default();
        let mut c_pos = vec![0.0; d];
        let mut c_neg = vec![0.0; d];
        let mut fuse = FuseBuffers::new(self.model);
        for t in 0..n {
            let q = &queries[t * d..(t + 1) * d];
            offsets.fill(t, &mut pool);
            w.clear();
            w.extend(pool.iter().map(|&j| dot(q, key_rows[j]) * scale));
            // both draws pool with softmax(w) over their own selection
            out.comparisons += select.select(&w, k, true);
            pool_selected(&select.out, &w, &pool, &values, &mut c_pos);
            out.comparisons += select.select(&w, k, false);
            pool_selected(&select.out, &w, &pool, &values, &mut c_neg);
            let c = fuse.fuse(u, &c_pos, &c_neg);
            out.y_stu.push(win_probability(q, c));
            out.pos_logit.push(dot(q, &c_pos));
            out.neg_logit.push(dot(q, &c_neg));
        }
        Ok(out)
    }
}

/// `softmax(w[sel]) · V[pool[sel]]` into `out`.
fn pool_selected(sel: &[usize], w: &[f64], pool: &[usize], values: &[f64], out: &mut [f64]) {
    let d = out.len();
    let m = sel.iter().map(|&h| w[h]).fold(f64::NEG_INFINITY, f64::max);
    out.fill(0.0);
    let mut z = 0.0;
    for &h in sel {
        let a = (w[h] - m).exp();
        z += a;
        let j = pool[h];
        for (o, x) in out.iter_mut().zip(&values[j * d..(j + 1) * d]) {
            *o += a * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= z);
}

struct FuseBuffers<'m> {
    w1: &'m [f64],
    b1: &'m [f64],
    w2: &'m [f64],
    b2: &'m [f64],
    x: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
}

impl<'m> FuseBuffers<'m> {
    fn new(model: &'m Model) -> Self {
        let p = |n| model.params.get(n).expect("param").data();
        let d = model.d();
        Self {
            w1: p(FFN_W1),
            b1: p(FFN_B1),
            w2: p(FFN_W2),
            b2: p(FFN_B2),
            x: vec![0.0; 2 * d],
            h: vec![0.0; 2 * d],
            c: vec![0.0; d],
        }
    }

    fn fuse(&mut self, u: &[f64], c_pos: &[f64], c_neg: &[f64]) -> &[f64] {
        let d = self.c.len();
        for j in 0..d {
            self.x[j] = u[j] * c_pos[j];
            self.x[d + j] = u[j] * c_neg[j];
        }
        dense_relu(&self.x, self.w1, self.b1, &mut self.h);
        dense(&self.h, self.w2, self.b2, &mut self.c);
        &self.c
    }
}

/// Tape nodes produced by [`student_forward`] for the selected targets.
#[derive(Clone, Copy, Debug)]
pub struct StudentVars {
    /// `σ(q · C)` per target, shape `[T]`.
    pub y_stu: Var,
    /// Mean InfoNCE over targets (scalar).
    pub infonce: Var,
    /// `q · C⁺` and `q · C⁻` per target.
    pub pos_logit: Var,
    pub neg_logit: Var,
}

/// Noise used by the training-time sampler.
pub enum Noise<'r, R: Rng + ?Sized> {
    /// Fresh Gumbel noise from the stream.
    Gumbel(&'r mut R),
    /// No perturbation (deterministic draws, used by gradient checks).
    Zero,
}

/// Training forward pass of the context encoder for `targets` (candidate
/// positions) of one request.
///
/// The sampled contexts enter the pooling through the relaxed k-hot vector:
/// `C⁺ = softmax(w̃⁺ + log a⁺) · V` and `C⁻ = softmax(−w̃⁻ + log a⁻) · V`
/// over the target's context pool. With a hard `a` this is exactly attention
/// over the k sampled items; with a soft `a` the gradients reach the sampler.
#[allow(clippy::too_many_arguments)]
pub fn student_forward<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    bound: &Bound,
    model: &Model,
    request: &Request,
    targets: &[usize],
    tau: f64,
    noise: Noise<'_, R>,
    dropout_rng: Option<&mut R>,
) -> Result<StudentVars> {
    let cfg = &model.config;
    let (n, d, k) = (request.len(), cfg.d, cfg.k);
    let width = (n - 1).min(cfg.context_pool);
    if 2 * k > width {
        return Err(Error::Contract(format!(
            "context size 2k = {} exceeds the context pool of {width} for N = {n}",
            2 * k
        )));
    }
    if targets.is_empty() {
        return Err(Error::Contract("no target items".into()));
    }
    let items = request.items();
    let e = tape.gather_rows(bound.var(ITEM_EMB), &items)?;
    let e_t = tape.gather_rows(e, targets)?;
    let q = tape.matmul(e_t, bound.var(CCE_QUERY))?;
    let keys = tape.matmul(e, bound.var(CCE_KEY))?;
    let values = tape.matmul(e, bound.var(CCE_VALUE))?;
    let scores = tape.matmul_t(q, keys)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let mut pool_idx = Vec::with_capacity(targets.len() * width);
    let mut pool = Vec::with_capacity(width);
    for &t in targets {
        context_pool_into(n, t, cfg.context_pool, &mut pool);
        pool_idx.extend_from_slice(&pool);
    }
    let w = tape.gather_per_row(scores, &pool_idx, width)?;

    let gumbel = match noise {
        Noise::Gumbel(rng) => {
            let m = targets.len() * width;
            let g: Vec<f64> = (0..2 * m).map(|_| sample_gumbel(rng)).collect();
            Some((
                Tensor::matrix(targets.len(), width, g[..m].to_vec())?,
                Tensor::matrix(targets.len(), width, g[m..].to_vec())?,
            ))
        }
        Noise::Zero => None,
    };
    let perturbed = |tape: &mut Tape<'_>, logits: Var, second: bool| -> Result<Var> {
        let lp = tape.log_softmax_t(logits, 1.0)?;
        match gumbel.as_ref() {
            Some((g1, g2)) => {
                let g = if second { g2.clone() } else { g1.clone() };
                let g = tape.constant(g);
                tape.add(lp, g)
            }
            None => Ok(lp),
        }
    };

    let wt_pos = perturbed(tape, w, false)?;
    let (log_a_pos, _) = relaxed_topk_log(tape, wt_pos, k, tau)?;
    let logits_pos = tape.add(wt_pos, log_a_pos)?;
    let attn_pos = tape.softmax(logits_pos)?;
    let c_pos = tape.indexed_weighted_sum(attn_pos, values, &pool_idx)?;

    let neg_w = tape.neg(w);
    let wt_neg = perturbed(tape, neg_w, true)?;
    let (log_a_neg, _) = relaxed_topk_log(tape, wt_neg, k, tau)?;
    let anti = tape.neg(wt_neg);
    let logits_neg = tape.add(anti, log_a_neg)?;
    let attn_neg = tape.softmax(logits_neg)?;
    let c_neg = tape.indexed_weighted_sum(attn_neg, values, &pool_idx)?;

    let u = tape.gather_rows(bound.var(USER_EMB), &vec![request.user; targets.len()])?;
    let up = tape.mul(u, c_pos)?;
    let un = tape.mul(u, c_neg)?;
    let x = tape.concat_cols(up, un)?;
    let h = tape.matmul(x, bound.var(FFN_W1))?;
    let h = tape.add_row(h, bound.var(FFN_B1))?;
    let h = tape.relu(h);
    let h = maybe_dropout(tape, h, cfg.dropout, dropout_rng)?;
    let c = tape.matmul(h, bound.var(FFN_W2))?;
    let c = tape.add_row(c, bound.var(FFN_B2))?;

    let logit = tape.row_dot(q, c)?;
    let y_stu = tape.sigmoid(logit);
    let pos_logit = tape.row_dot(q, c_pos)?;
    let neg_logit = tape.row_dot(q, c_neg)?;
    let gap = tape.sub(neg_logit, pos_logit)?;
    let gap = tape.scale(gap, 1.0 / cfg.infonce_t);
    let nce = tape.softplus(gap);
    let infonce = tape.mean(nce);
    Ok(StudentVars { y_stu, infonce, pos_logit, neg_logit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_synthetic, SyntheticSpec};
    use crate::config::TrainConfig;
    use crate::numeric::grad_check_params;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn setup(n: usize, d: usize, k: usize) -> (Model, Request) {
        let spec = SyntheticSpec {
            num_users: 3,
            num_requests: 2,
            catalog_size: 60,
            num_categories: 4,
            candidates_per_request: n,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let config = TrainConfig { d, hidden: [6, 5], k, ..TrainConfig::default() };
        let model = Model::init(Arc::clone(&data.vocab), config, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        (model, data.requests[0].clone())
    }

    #[test]
    fn scaled_score_example() {
        let w = scaled_scores(&[1.0, 0.0], &[vec![2.0, 0.0]]);
        assert_relative_eq!(w[0], 2f64.sqrt(), epsilon = 1e-15);
        let w = scaled_scores(&[0.3, 0.4], &[vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(w[0], w[1]);
    }

    #[test]
    fn identity_projections_on_orthonormal_items() {
        let (mut m, r) = setup(4, 4, 1);
        for name in [CCE_QUERY, CCE_KEY] {
            *m.params.get_mut(name).unwrap() = Tensor::identity(4);
        }
        let t = m.params.get_mut(ITEM_EMB).unwrap();
        for (row, &item) in r.items().iter().enumerate() {
            let v = t.row_mut(item);
            v.fill(0.0);
            v[row] = 1.0;
        }
        let w = attention_scores(&m, &r, 0);
        assert_eq!(w[0], f64::NEG_INFINITY);
        assert!(w[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn context_pool_excludes_target() {
        for n in [2, 5, 40, 1000] {
            for t in [0, n / 2, n - 1] {
                let p = context_pool(n, t, 64);
                assert!(!p.contains(&t));
                assert_eq!(p.len(), (n - 1).min(64));
                let mut s = p.clone();
                s.sort();
                s.dedup();
                assert_eq!(s.len(), p.len());
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let v = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        assert_eq!(positive_context(&[0.4], &v[..1]).unwrap(), v[0]);
        let mean = positive_context(&[0.7, 0.7], &v).unwrap();
        assert_relative_eq!(mean[0], 2.0, epsilon = 1e-15);
        assert_relative_eq!(mean[1], 0.5, epsilon = 1e-15);
        let c = positive_context(&[5.0, 0.0], &v).unwrap();
        let w1 = 5f64.exp() / (5f64.exp() + 1.0);
        assert_relative_eq!(w1, 0.99331, epsilon = 1e-5);
        assert_relative_eq!(c[0], w1 * 1.0 + (1.0 - w1) * 3.0, epsilon = 1e-14);
        let n = negative_context(&[5.0, 0.0], &v).unwrap();
        assert_relative_eq!(n[0], (1.0 - w1) * 1.0 + w1 * 3.0, epsilon = 1e-14);
    }

    #[test]
    fn infonce_examples() {
        let q = [1.0, 0.0];
        assert_relative_eq!(infonce_loss(&q, &[0.3, 1.0], &[0.3, -2.0], 0.5).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(infonce_loss(&q, &[20.0, 0.0], &[0.0, 0.0], 1.0).unwrap() < 1e-8);
        assert_relative_eq!(infonce_loss(&q, &[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap(), 0.313_261_687_5, epsilon = 1e-10);
        assert!(infonce_loss(&q, &q, &q, 0.0).is_err());
    }

    #[test]
    fn fusion_examples() {
        let (mut m, _) = setup(6, 4, 1);
        let zero = [0.0; 4];
        let a = fuse_context(&m, &zero, &[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.5, 0.0, 2.0]);
        let b = fuse_context(&m, &zero, &[9.0, 9.0, 9.0, 9.0], &[0.0; 4]);
        assert_eq!(a, b);
        for name in [FFN_W1, FFN_B1, FFN_W2, FFN_B2] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        assert_eq!(fuse_context(&m, &[1.0; 4], &[1.0; 4], &[2.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn win_probability_examples() {
        assert_eq!(win_probability(&[1.0, 0.0], &[0.0, 5.0]), 0.5);
        assert_relative_eq!(win_probability(&[1.0, 1.0], &[2.0, 1.0]), 0.952_574_126_8, epsilon = 1e-10);
    }

    #[test]
    fn separated_clusters_split_cleanly() {
        let mut w = vec![f64::NEG_INFINITY];
        w.extend((0..10).map(|i| 10.0 + 0.01 * i as f64));
        w.extend((0..10).map(|i| -0.01 * i as f64));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ok = 0;
        for _ in 0..1000 {
            let (p, n) = sample_contexts(&w, 3, 0.05, &mut rng).unwrap();
            if p.positions.iter().all(|&j| (1..=10).contains(&j)) && n.positions.iter().all(|&j| j > 10) {
                ok += 1;
            }
        }
        assert!(ok >= 990, "{ok}");
    }

    #[test]
    fn full_pool_context() {
        let w = [f64::NEG_INFINITY, 0.3, -0.2, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, _) = sample_contexts(&w, 2, 0.5, &mut rng).unwrap();
        assert_eq!(p.positions.len(), 2);
        assert!(sample_contexts(&w, 3, 0.5, &mut rng).is_err());
        let w = [f64::NEG_INFINITY, 0.3, -0.2];
        let (p, _) = sample_contexts(&w, 1, 0.5, &mut rng).unwrap();
        assert!(p.positions[0] != 0);
    }

    #[test]
    fn uniform_logits_give_uniform_membership() {
        let w = vec![0.0; 11];
        let mut w = w;
        w[4] = f64::NEG_INFINITY;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 100_000;
        let mut counts = [0usize; 11];
        for _ in 0..draws {
            let (p, _) = sample_contexts(&w, 2, 1.0, &mut rng).unwrap();
            p.positions.iter().for_each(|&j| counts[j] += 1);
        }
        assert_eq!(counts[4], 0);
        for (j, &c) in counts.iter().enumerate().filter(|(j, _)| *j != 4) {
            let f = c as f64 / draws as f64;
            assert!((f - 0.2).abs() < 0.02, "position {j}: {f}");
        }
    }

    #[test]
    fn serving_matches_zero_noise_training_in_the_hard_limit() {
        let (m, r) = setup(12, 4, 2);
        let targets: Vec<usize> = (0..r.len()).collect();
        let mut tape = Tape::new();
        let b = m.params.bind_frozen(&mut tape);
        let v = student_forward::<ChaCha8Rng>(&mut tape, &b, &m, &r, &targets, 1e-9, Noise::Zero, None).unwrap();
        let eval = StudentScorer::new(&m).score_request(&r).unwrap();
        for (a, b) in tape.value(v.y_stu).data().iter().zip(&eval.y_stu) {
            assert_relative_eq!(*a, *b, epsilon = 1e-9);
        }
        for (a, b) in tape.value(v.pos_logit).data().iter().zip(&eval.pos_logit) {
            assert_relative_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn student_gradients_pass_check() {
        let (m, r) = setup(8, 4, 2);
        let targets = [0usize, 3, 5];
        let check = grad_check_params(
            &m.params,
            1e-6,
            |_| true,
            |tape, b| {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let v = student_forward(tape, b, &m, &r, &targets, 0.5, Noise::Gumbel(&mut rng), None)?;
                let y = tape.sum(v.y_stu);
                tape.add(y, v.infonce)
            },
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn permutation_equivariance() {
        let (m, r) = setup(9, 4, 2);
        let mut permuted = r.clone();
        permuted.candidates.reverse();
        let a = StudentScorer::new(&m).score_request(&r).unwrap();
        let b = StudentScorer::new(&m).score_request(&permuted).unwrap();
        for (x, y) in a.y_stu.iter().zip(b.y_stu.iter().rev()) {
            assert_relative_eq!(*x, *y, epsilon = 1e-12);
        }
    }
}
