//! The shared model: embedding tables, the point-wise backbone scorer and the
//! parameters of the context encoder, all held in one [`ParamStore`].

use std::sync::Arc;

use rand::Rng;

use crate::catalog::Vocab;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numeric::{dot, sigmoid, Bound, ParamStore, Tape, Tensor, Var};

pub const ITEM_EMB: &str = "item_emb";
pub const CAT_EMB: &str = "cat_emb";
pub const USER_EMB: &str = "user_emb";
pub const MLP_W1: &str = "mlp.w1";
pub const MLP_B1: &str = "mlp.b1";
pub const MLP_W2: &str = "mlp.w2";
pub const MLP_B2: &str = "mlp.b2";
pub const MLP_W3: &str = "mlp.w3";
pub const MLP_B3: &str = "mlp.b3";
pub const CCE_QUERY: &str = "cce.w_query";
pub const CCE_KEY: &str = "cce.w_key";
pub const CCE_VALUE: &str = "cce.w_value";
pub const FFN_W1: &str = "cce.ffn.w1";
pub const FFN_B1: &str = "cce.ffn.b1";
pub const FFN_W2: &str = "cce.ffn.w2";
pub const FFN_B2: &str = "cce.ffn.b2";

/// Parameters that only the point-wise scorer reads.
pub const BACKBONE_PARAMS: [&str; 9] =
    [ITEM_EMB, CAT_EMB, USER_EMB, MLP_W1, MLP_B1, MLP_W2, MLP_B2, MLP_W3, MLP_B3];

/// Full model state. The vocabulary travels with the weights so a checkpoint
/// can resolve string ids on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Arc<Vocab>,
    pub params: ParamStore,
}

/// Expected shape of every parameter for a vocabulary and config.
pub fn param_shapes(vocab: &Vocab, config: &TrainConfig) -> Vec<(&'static str, Vec<usize>)> {
    let d = config.d;
    let [h1, h2] = config.hidden;
    vec![
        (ITEM_EMB, vec![vocab.items.len().max(1), d]),
        (CAT_EMB, vec![vocab.categories.len().max(1), d]),
        (USER_EMB, vec![vocab.users.len().max(1), d]),
        (MLP_W1, vec![4 * d, h1]),
        (MLP_B1, vec![h1]),
        (MLP_W2, vec![h1, h2]),
        (MLP_B2, vec![h2]),
        (MLP_W3, vec![h2, 1]),
        (MLP_B3, vec![1]),
        (CCE_QUERY, vec![d, d]),
        (CCE_KEY, vec![d, d]),
        (CCE_VALUE, vec![d, d]),
        (FFN_W1, vec![2 * d, 2 * d]),
        (FFN_B1, vec![2 * d]),
        (FFN_W2, vec![2 * d, d]),
        (FFN_B2, vec![d]),
    ]
}

impl Model {
    /// Random initialization: Gaussian embeddings, He-scaled dense layers,
    /// zero biases, and near-identity attention projections.
    pub fn init<R: Rng + ?Sized>(vocab: Arc<Vocab>, config: TrainConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&vocab, &config) {
            let t = match name {
                ITEM_EMB | CAT_EMB | USER_EMB => Tensor::randn(&shape, config.init_std, rng),
                CCE_QUERY | CCE_KEY | CCE_VALUE => {
                    let mut t = Tensor::randn(&shape, 0.01, rng);
                    for i in 0..shape[0] {
                        t.data_mut()[i * shape[0] + i] += 1.0;
                    }
                    t
                }
                _ if shape.len() == 1 => Tensor::zeros(&shape),
                _ => Tensor::randn(&shape, (2.0 / shape[0] as f64).sqrt(), rng),
            };
            params.insert(name, t)?;
        }
        Ok(Self { config, vocab, params })
    }

    /// Builds a model around existing parameters, checking every shape.
    pub fn from_params(vocab: Arc<Vocab>, config: TrainConfig, params: ParamStore) -> Result<Self> {
        let expected = param_shapes(&vocab, &config);
        if params.len() != expected.len() {
            return Err(Error::Corrupt(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            let t = params
                .get(name)
                .map_err(|_| Error::Corrupt(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, vocab, params })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("shape-checked at construction")
    }

    /// Embedding row of an item by dense id.
    pub fn item_vec(&self, item: usize) -> &[f64] {
        self.p(ITEM_EMB).row(item)
    }

    pub fn user_vec(&self, user: usize) -> &[f64] {
        self.p(USER_EMB).row(user)
    }

    pub fn category_vec(&self, category: usize) -> &[f64] {
        self.p(CAT_EMB).row(category)
    }

    /// Embedding of an item by external id.
    pub fn embed_item(&self, item_id: &str) -> Result<Tensor> {
        let i = self.vocab.item_id(item_id)?;
        Ok(Tensor::vector(self.item_vec(i).to_vec()))
    }

    /// User interest vector by external id.
    pub fn embed_user(&self, user_id: &str) -> Result<Tensor> {
        let u = self.vocab.user_id(user_id)?;
        Ok(Tensor::vector(self.user_vec(u).to_vec()))
    }

    /// Eval-mode accuracy score `f(u, i)` in (0, 1).
    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.score_items(user, &[item])[0]
    }

    /// Eval-mode `f(u, i)` for several items of one user.
    pub fn score_items(&self, user: usize, items: &[usize]) -> Vec<f64> {
        let d = self.d();
        let [h1, h2] = self.config.hidden;
        let (w1, b1) = (self.p(MLP_W1).data(), self.p(MLP_B1).data());
        let (w2, b2) = (self.p(MLP_W2).data(), self.p(MLP_B2).data());
        let (w3, b3) = (self.p(MLP_W3).data(), self.p(MLP_B3).data());
        let u = self.user_vec(user);
        // the first layer is linear in [u, e, c, u ⊙ e], so for a fixed user
        // it folds into e · (W_e + diag(u) W_ue) plus a per-category offset
        let block = |b: usize| &w1[b * d * h1..(b + 1) * d * h1];
        let mut w_eff = block(1).to_vec();
        for (j, &uj) in u.iter().enumerate() {
            for (w, &x) in w_eff[j * h1..(j + 1) * h1].iter_mut().zip(&block(3)[j * h1..(j + 1) * h1]) {
                *w += uj * x;
            }
        }
        let mut base = vec![0.0; h1];
        dense(u, block(0), b1, &mut base);
        let mut offsets: Vec<Option<Vec<f64>>> = vec![None; self.vocab.categories.len()];
        let (emb, cats) = (self.p(ITEM_EMB), self.p(CAT_EMB));
        let mut a1 = vec![0.0; h1];
        let mut a2 = vec![0.0; h2];
        items
            .iter()
            .map(|&i| {
                let cat = self.vocab.category_of(i);
                let offset = offsets[cat].get_or_insert_with(|| {
                    let mut o = vec![0.0; h1];
                    dense(cats.row(cat), block(2), &base, &mut o);
                    o
                });
                dense_relu(emb.row(i), &w_eff, offset, &mut a1);
                dense_relu(&a1, w2, b2, &mut a2);
                sigmoid(dot(&a2, w3) + b3[0])
            })
            .collect()
    }

    /// Scores by external ids.
    pub fn score_ids(&self, user_id: &str, item_id: &str) -> Result<f64> {
        Ok(self.score(self.vocab.user_id(user_id)?, self.vocab.item_id(item_id)?))
    }
}

/// `out = relu(x · w + b)` for a row-major `w` of shape `x.len() × out.len()`.
pub(crate) fn dense_relu(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    dense(x, w, b, out);
    out.iter_mut().for_each(|v| *v = v.max(0.0));
}

pub(crate) fn dense(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    out.copy_from_slice(b);
    // four input rows per sweep over `out`
    let (xs, ws) = (x.chunks_exact(4), w.chunks_exact(4 * n));
    let (x_tail, w_tail) = (xs.remainder(), ws.remainder());
    for (xc, wc) in xs.zip(ws) {
        let (r0, rest) = wc.split_at(n);
        let (r1, rest) = rest.split_at(n);
        let (r2, r3) = rest.split_at(n);
        for j in 0..n {
            out[j] += (xc[0] * r0[j] + xc[1] * r1[j]) + (xc[2] * r2[j] + xc[3] * r3[j]);
        }
    }
    for (&xi, row) in x_tail.iter().zip(w_tail.chunks_exact(n)) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - rate)`.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Applies dropout on the tape when an RNG is supplied (training mode).
pub(crate) fn maybe_dropout<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    rate: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let mask = dropout_mask(tape.value(x).numel(), rate, rng);
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

/// Backbone forward pass on a tape: probabilities `f(u, i)` for `items`, as an
/// `n × 1` matrix. Passing an RNG turns on dropout.
pub fn backbone_forward<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    bound: &Bound,
    model: &Model,
    user: usize,
    items: &[usize],
    rng: Option<&mut R>,
) -> Result<Var> {
    let e = tape.gather_rows(bound.var(ITEM_EMB), items)?;
    let cats: Vec<usize> = items.iter().map(|&i| model.vocab.category_of(i)).collect();
    let c = tape.gather_rows(bound.var(CAT_EMB), &cats)?;
    let u = tape.gather_rows(bound.var(USER_EMB), &vec![user; items.len()])?;
    let ue = tape.mul(u, e)?;
    let left = tape.concat_cols(u, e)?;
    let right = tape.concat_cols(c, ue)?;
    let x = tape.concat_cols(left, right)?;
    let rate = model.config.dropout;
    let mut rng = rng;
    let z1 = tape.matmul(x, bound.var(MLP_W1))?;
    let z1 = tape.add_row(z1, bound.var(MLP_B1))?;
    let h1 = tape.relu(z1);
    let h1 = maybe_dropout(tape, h1, rate, rng.as_deref_mut())?;
    let z2 = tape.matmul(h1, bound.var(MLP_W2))?;
    let z2 = tape.add_row(z2, bound.var(MLP_B2))?;
    let h2 = tape.relu(z2);
    let h2 = maybe_dropout(tape, h2, rate, rng.as_deref_mut())?;
    let z3 = tape.matmul(h2, bound.var(MLP_W3))?;
    let z3 = tape.add_row(z3, bound.var(MLP_B3))?;
    Ok(tape.sigmoid(z3))
}

/// Mean binary cross-entropy over labeled entries.
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dim("bce_loss", format!("{} vs {}", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Contract("bce_loss over an empty labeled set".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(predictions.to_vec()));
    let l = tape.bce(p, labels)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_synthetic, SyntheticSpec};
    use crate::numeric::{grad_check_params, GradBuffer};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model {
        let spec = SyntheticSpec {
            num_users: 5,
            num_requests: 6,
            catalog_size: 40,
            num_categories: 4,
            candidates_per_request: 10,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let config = TrainConfig { d: 4, hidden: [6, 5], k: 2, ..TrainConfig::default() };
        Model::init(data.vocab, config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn lookups() {
        let m = tiny();
        let name = m.vocab.items.name(3).to_string();
        assert_eq!(m.embed_item(&name).unwrap(), m.embed_item(&name).unwrap());
        assert!(matches!(m.embed_item("nope"), Err(Error::OutOfVocabulary { kind: "item", .. })));
        assert!(matches!(m.embed_user("nope"), Err(Error::OutOfVocabulary { kind: "user", .. })));
    }

    #[test]
    fn zero_scorer_gives_half() {
        let mut m = tiny();
        for name in [MLP_W3, MLP_B3] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        for i in 0..m.vocab.items.len() {
            assert_eq!(m.score(0, i), 0.5);
        }
    }

    #[test]
    fn plain_and_tape_scores_agree() {
        let m = tiny();
        let items: Vec<usize> = (0..10).collect();
        let plain = m.score_items(1, &items);
        let mut tape = Tape::new();
        let b = m.params.bind_frozen(&mut tape);
        let out = backbone_forward::<ChaCha8Rng>(&mut tape, &b, &m, 1, &items, None).unwrap();
        for (a, b) in plain.iter().zip(tape.value(out).data()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-14);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0 - 1e-12], &[1.0]).unwrap() < 1e-11);
        assert_relative_eq!(bce_loss(&[0.5], &[1.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let expected = (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0;
        assert_relative_eq!(bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap(), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.164252, epsilon = 1e-6);
        assert!(bce_loss(&[], &[]).is_err());
    }

    #[test]
    fn bce_gradients_pass_check() {
        let m = tiny();
        let items = [0usize, 2, 5, 7];
        let labels = [1.0, 0.0, 0.0, 1.0];
        let check = grad_check_params(
            &m.params,
            1e-5,
            |name| BACKBONE_PARAMS.contains(&name),
            |tape, b| {
                let p = backbone_forward::<ChaCha8Rng>(tape, b, &m, 2, &items, None)?;
                tape.bce(p, &labels)
            },
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn one_step_touches_only_used_rows() {
        let mut m = tiny();
        let before = m.params.get(ITEM_EMB).unwrap().clone();
        let mut buf = GradBuffer::new();
        {
            let mut tape = Tape::new();
            let b = m.params.bind(&mut tape);
            let p = backbone_forward::<ChaCha8Rng>(&mut tape, &b, &m, 0, &[4], None).unwrap();
            let l = tape.bce(p, &[1.0]).unwrap();
            let g = tape.backward(l).unwrap();
            buf.add(&b, &g);
        }
        m.params.sgd_step(&buf, 0.5);
        let after = m.params.get(ITEM_EMB).unwrap();
        for r in 0..after.rows_cols().0 {
            assert_eq!(after.row(r) != before.row(r), r == 4, "row {r}");
        }
    }
}
