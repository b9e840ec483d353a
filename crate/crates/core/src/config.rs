use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every knob of model construction, training and fused inference.
///
/// Field names double as CLI flag names (`learning_rate` ↔ `--learning-rate`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Embedding dimension shared by the item, category and user tables.
    pub d: usize,
    /// Widths of the two hidden layers of the point-wise scorer.
    pub hidden: [usize; 2],
    pub init_std: f64,
    pub learning_rate: f64,
    /// Requests per gradient step.
    pub batch_size: usize,
    /// Accuracy/diversity trade-off of the MMR teacher.
    pub lambda: f64,
    /// Weight of the student score at inference: `f + gamma * y_stu`.
    pub gamma: f64,
    /// Weight of the distillation loss.
    pub beta1: f64,
    /// Weight of the contrastive loss.
    pub beta2: f64,
    /// Size of each sampled context (positive and negative).
    pub k: usize,
    /// Teacher list size; `None` means `ceil(teacher_fraction * N)` per request.
    pub k_teacher: Option<usize>,
    pub teacher_fraction: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_decay: f64,
    /// Temperature of the contrastive loss.
    pub infonce_t: f64,
    pub dropout: f64,
    pub patience: usize,
    /// Backbone-only epochs before joint training.
    pub warm_epochs: usize,
    /// Joint-training epochs (upper bound; early stopping may end sooner).
    pub epochs: usize,
    pub seed: u64,
    /// Target items drawn per request per joint step; 0 uses every candidate.
    pub targets_per_request: usize,
    /// Most candidates a target attends over; larger pools are strided down.
    pub context_pool: usize,
    /// Fraction of training requests held out for early stopping.
    pub valid_fraction: f64,
    /// Gradients with a larger global L2 norm are rescaled to it; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 16,
            hidden: [32, 16],
            init_std: 0.1,
            learning_rate: 2.0,
            batch_size: 16,
            lambda: 0.2,
            gamma: 0.1,
            beta1: 1.0,
            beta2: 0.1,
            k: 8,
            k_teacher: None,
            teacher_fraction: 0.2,
            tau_start: 1.0,
            tau_end: 0.05,
            tau_decay: 0.85,
            infonce_t: 1.0,
            dropout: 0.25,
            patience: 10,
            warm_epochs: 5,
            epochs: 20,
            seed: 0,
            targets_per_request: 16,
            context_pool: 64,
            valid_fraction: 0.1,
            max_grad_norm: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("hidden", self.hidden[0].min(self.hidden[1])),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("context_pool", self.context_pool),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let non_negative = [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("init_std", self.init_std),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (field, v) in [("learning_rate", self.learning_rate), ("infonce_t", self.infonce_t)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end && self.tau_start.is_finite()) {
            return Err(Error::config("tau_start", "need tau_start >= tau_end > 0"));
        }
        if !(self.tau_decay > 0.0 && self.tau_decay <= 1.0) {
            return Err(Error::config("tau_decay", "must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if !(self.teacher_fraction > 0.0 && self.teacher_fraction < 1.0) {
            return Err(Error::config("teacher_fraction", "must be in (0, 1)"));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::config("valid_fraction", "must be in (0, 1)"));
        }
        if self.k_teacher == Some(0) {
            return Err(Error::config("k_teacher", "must be positive"));
        }
        Ok(())
    }

    /// Checks the constraints that depend on pool sizes: `2k <= N - 1` and
    /// `K_teacher < N` for the smallest pool.
    pub fn validate_for_pool(&self, min_candidates: usize) -> Result<()> {
        self.validate()?;
        if 2 * self.k + 1 > min_candidates {
            return Err(Error::config(
                "k",
                format!("2k = {} exceeds N - 1 = {} for the smallest request", 2 * self.k, min_candidates.saturating_sub(1)),
            ));
        }
        if self.teacher_k(min_candidates) >= min_candidates {
            return Err(Error::config("k_teacher", format!("must be < N = {min_candidates}")));
        }
        Ok(())
    }

    /// Teacher list size for a pool of `n` candidates.
    pub fn teacher_k(&self, n: usize) -> usize {
        self.k_teacher
            .unwrap_or_else(|| (self.teacher_fraction * n as f64).ceil() as usize)
            .max(1)
    }
}
