//! Distillation losses and the two-phase training loop.

mod checkpoint;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{split_train_eval, Dataset, Request};
use crate::cce::{student_forward, Noise, StudentScorer};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::model::{backbone_forward, Model};
use crate::numeric::{softplus, Bound, GradBuffer, ParamStore, Tape, Tensor, Var, LOG_EPS};
use crate::parallel::par_map;
use crate::sampler::AnnealSchedule;
use crate::teacher::{mmr_select, MmrMode, TeacherInput};

pub use checkpoint::{load, load_history, save, save_history, Manifest, TensorEntry};

fn bce_term(p: f64, y: f64) -> f64 {
    -y * p.max(LOG_EPS).ln() - (1.0 - y) * (1.0 - p).max(LOG_EPS).ln()
}

/// Mean binary cross-entropy of student probabilities against teacher labels.
pub fn kd_loss(y_stu: &[f64], y_tea: &[f64]) -> Result<f64> {
    if y_stu.len() != y_tea.len() || y_stu.is_empty() {
        return Err(Error::dim("kd_loss", format!("{} vs {}", y_stu.len(), y_tea.len())));
    }
    Ok(y_stu.iter().zip(y_tea).map(|(&p, &y)| bce_term(p, y)).sum::<f64>() / y_stu.len() as f64)
}

/// The three loss terms of one request (or their means over several).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub bce: f64,
    pub kd: f64,
    pub infonce: f64,
    pub total: f64,
}

impl LossComponents {
    fn combine(bce: f64, kd: f64, infonce: f64, cfg: &TrainConfig) -> Self {
        Self { bce, kd, infonce, total: bce + cfg.beta1 * kd + cfg.beta2 * infonce }
    }

    fn accumulate(&mut self, other: &Self) {
        self.bce += other.bce;
        self.kd += other.kd;
        self.infonce += other.infonce;
        self.total += other.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.bce *= s;
        self.kd *= s;
        self.infonce *= s;
        self.total *= s;
        self
    }
}

/// Loss nodes of one request on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub bce: Option<Var>,
    pub kd: Var,
    pub infonce: Var,
}

/// `L = L_BCE + β1 L_KD + β2 L_InfoNCE` for one request on a tape.
///
/// BCE covers the shown candidates; KD and InfoNCE cover `targets`. The
/// teacher labels enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn request_loss(
    tape: &mut Tape<'_>,
    bound: &Bound,
    model: &Model,
    request: &Request,
    y_tea: &[f64],
    targets: &[usize],
    tau: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossVars> {
    let cfg = &model.config;
    if y_tea.len() != request.len() {
        return Err(Error::dim("request_loss", format!("{} labels for {} candidates", y_tea.len(), request.len())));
    }
    let mut rng = rng;
    let shown = request.shown();
    let bce = if shown.is_empty() {
        None
    } else {
        let items: Vec<usize> = shown.iter().map(|&(p, _)| request.candidates[p].item).collect();
        let labels: Vec<f64> = shown.iter().map(|&(_, y)| y).collect();
        let f = backbone_forward(tape, bound, model, request.user, &items, rng.as_deref_mut())?;
        Some(tape.bce(f, &labels)?)
    };
    let student = match rng {
        Some(r) => {
            // separate stream so dropout draws do not shift the Gumbel noise
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(r.random());
            student_forward(tape, bound, model, request, targets, tau, Noise::Gumbel(r), Some(&mut dropout_rng))?
        }
        None => student_forward::<ChaCha8Rng>(tape, bound, model, request, targets, tau, Noise::Zero, None)?,
    };
    let kd_labels: Vec<f64> = targets.iter().map(|&t| y_tea[t]).collect();
    let kd = tape.bce(student.y_stu, &kd_labels)?;
    let kd_w = tape.scale(kd, cfg.beta1);
    let nce_w = tape.scale(student.infonce, cfg.beta2);
    let mut total = tape.add(kd_w, nce_w)?;
    if let Some(b) = bce {
        total = tape.add(total, b)?;
    }
    Ok(LossVars { total, bce, kd, infonce: student.infonce })
}

/// Loss of one request evaluated on a throwaway tape: frozen parameters,
/// deterministic (zero-noise) draws, no dropout.
pub fn total_loss(
    request: &Request,
    model: &Model,
    y_tea: &[f64],
    tau: f64,
) -> Result<LossComponents> {
    let targets: Vec<usize> = (0..request.len()).collect();
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let v = request_loss(&mut tape, &bound, model, request, y_tea, &targets, tau, None)?;
    let get = |x: Var| tape.value(x).item();
    Ok(LossComponents {
        bce: v.bce.map_or(0.0, get),
        kd: get(v.kd),
        infonce: get(v.infonce),
        total: get(v.total),
    })
}

/// Teacher labels for every request from a frozen model snapshot.
pub fn teacher_labels(model: &Model, requests: &[Request], threads: usize) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    par_map(requests, threads, |r| {
        let input = TeacherInput::from_model(model, r);
        mmr_select(&input, cfg.lambda, cfg.teacher_k(r.len()), MmrMode::Cached).map(|l| l.labels)
    })
    .into_iter()
    .collect()
}

/// Serving-path evaluation of the three losses plus ranking quality of the
/// student against the teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: LossComponents,
    /// Mean over requests of the within-request AUC of `y_stu` against `y_tea`.
    pub student_auc: f64,
    /// Mean within-request AUC of `f` against the observed labels.
    pub backbone_auc: f64,
}

/// Validation with the deterministic serving path and fresh teacher labels.
pub fn validate(model: &Model, requests: &[Request], threads: usize) -> Result<Validation> {
    let labels = teacher_labels(model, requests, threads)?;
    validate_with_labels(model, requests, &labels, threads)
}

pub fn validate_with_labels(
    model: &Model,
    requests: &[Request],
    labels: &[Vec<f64>],
    threads: usize,
) -> Result<Validation> {
    let cfg = &model.config;
    let pairs: Vec<(&Request, &Vec<f64>)> = requests.iter().zip(labels).collect();
    let per: Vec<Result<(LossComponents, Option<f64>, Option<f64>)>> = par_map(&pairs, threads, |(r, y_tea)| {
        let s = StudentScorer::new(model).score_request(r)?;
        let shown = r.shown();
        let (bce, backbone_auc) = if shown.is_empty() {
            (0.0, None)
        } else {
            let items: Vec<usize> = shown.iter().map(|&(p, _)| r.candidates[p].item).collect();
            let y: Vec<f64> = shown.iter().map(|&(_, y)| y).collect();
            let f = model.score_items(r.user, &items);
            (kd_loss(&f, &y)?, auc(&f, &y))
        };
        let kd = kd_loss(&s.y_stu, y_tea)?;
        let nce = s
            .pos_logit
            .iter()
            .zip(&s.neg_logit)
            .map(|(p, n)| softplus((n - p) / cfg.infonce_t))
            .sum::<f64>()
            / r.len() as f64;
        Ok((LossComponents::combine(bce, kd, nce, cfg), auc(&s.y_stu, y_tea), backbone_auc))
    });
    let mut loss = LossComponents::default();
    let (mut s_auc, mut s_n, mut b_auc, mut b_n) = (0.0, 0usize, 0.0, 0usize);
    for p in per {
        let (l, sa, ba) = p?;
        loss.accumulate(&l);
        if let Some(a) = sa {
            s_auc += a;
            s_n += 1;
        }
        if let Some(a) = ba {
            b_auc += a;
            b_n += 1;
        }
    }
    Ok(Validation {
        loss: loss.scaled(1.0 / requests.len().max(1) as f64),
        student_auc: s_auc / s_n.max(1) as f64,
        backbone_auc: b_auc / b_n.max(1) as f64,
    })
}

/// Early stopping on a validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub stale: usize,
}

/// What to do after a validation epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    /// Starts from an already-evaluated baseline.
    pub fn with_baseline(patience: usize, loss: f64) -> Self {
        Self { best: loss, ..Self::new(patience) }
    }

    /// Records one validation loss. Stops once `patience` consecutive epochs
    /// fail to improve on the best loss.
    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warm,
    Joint,
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub tau: Option<f64>,
    pub train: LossComponents,
    pub valid: Validation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Joint epoch of the returned snapshot; `None` when the phase-1 model won.
    pub best_joint_epoch: Option<usize>,
    pub stopped_early: bool,
    pub train_requests: usize,
    pub valid_requests: usize,
}

fn check_finite(loss: f64, grads: &GradBuffer, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged { epoch, step, loss });
    }
    Ok(())
}

fn warm_step(model: &mut Model, batch: &[&Request], rng: &mut ChaCha8Rng, epoch: usize, step: usize) -> Result<f64> {
    let mut grads = GradBuffer::new();
    let (loss, count) = {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut terms = Vec::new();
        for r in batch {
            let shown = r.shown();
            if shown.is_empty() {
                continue;
            }
            let items: Vec<usize> = shown.iter().map(|&(p, _)| r.candidates[p].item).collect();
            let labels: Vec<f64> = shown.iter().map(|&(_, y)| y).collect();
            let f = backbone_forward(&mut tape, &bound, model, r.user, &items, Some(&mut *rng))?;
            terms.push(tape.bce(f, &labels)?);
        }
        if terms.is_empty() {
            return Ok(0.0);
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = tape.add(sum, t)?;
        }
        let loss = tape.scale(sum, 1.0 / terms.len() as f64);
        let g = tape.backward(loss)?;
        grads.add(&bound, &g);
        (tape.value(loss).item(), terms.len())
    };
    check_finite(loss, &grads, epoch, step)?;
    if model.config.max_grad_norm > 0.0 {
        grads.clip_norm(model.config.max_grad_norm);
    }
    model.params.sgd_step(&grads, model.config.learning_rate);
    Ok(loss * count as f64)
}

fn joint_step(
    model: &mut Model,
    batch: &[(&Request, &Vec<f64>)],
    tau: f64,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    step: usize,
) -> Result<LossComponents> {
    let cfg = model.config.clone();
    let mut grads = GradBuffer::new();
    let mut sums = LossComponents::default();
    {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut totals = Vec::with_capacity(batch.len());
        let mut parts = Vec::with_capacity(batch.len());
        for (r, y_tea) in batch {
            let targets: Vec<usize> = if cfg.targets_per_request == 0 || cfg.targets_per_request >= r.len() {
                (0..r.len()).collect()
            } else {
                let mut t = index::sample(rng, r.len(), cfg.targets_per_request).into_vec();
                t.sort_unstable();
                t
            };
            let v = request_loss(&mut tape, &bound, model, r, y_tea, &targets, tau, Some(&mut *rng))?;
            totals.push(v.total);
            parts.push(v);
        }
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = tape.add(sum, t)?;
        }
        let loss = tape.scale(sum, 1.0 / totals.len() as f64);
        let g = tape.backward(loss)?;
        grads.add(&bound, &g);
        for v in parts {
            let get = |x: Var| tape.value(x).item();
            sums.accumulate(&LossComponents {
                bce: v.bce.map_or(0.0, get),
                kd: get(v.kd),
                infonce: get(v.infonce),
                total: get(v.total),
            });
        }
        check_finite(tape.value(loss).item(), &grads, epoch, step)?;
    }
    if cfg.max_grad_norm > 0.0 {
        grads.clip_norm(cfg.max_grad_norm);
    }
    model.params.sgd_step(&grads, cfg.learning_rate);
    Ok(sums)
}

/// Progress callback: receives each finished epoch record.
pub type Progress<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Two-phase training on `dataset`; a `valid_fraction` of requests is held
/// out for early stopping. Returns the best-validation snapshot.
pub fn train(dataset: &Dataset, config: &TrainConfig, threads: usize) -> Result<(Model, History)> {
    train_with_progress(dataset, config, threads, &mut |_| {})
}

pub fn train_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    threads: usize,
    progress: Progress<'_>,
) -> Result<(Model, History)> {
    config.validate_for_pool(dataset.min_candidates())?;
    let (train_set, valid_set) = split_train_eval(dataset, config.valid_fraction, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(dataset.vocab.clone(), config.clone(), &mut rng)?;
    let mut history = History {
        train_requests: train_set.len(),
        valid_requests: valid_set.len(),
        ..History::default()
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.warm_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Request> = chunk.iter().map(|&i| &train_set.requests[i]).collect();
            sum += warm_step(&mut model, &batch, &mut rng, epoch, step)?;
            count += batch.iter().filter(|r| !r.shown().is_empty()).count();
        }
        let bce = sum / count.max(1) as f64;
        let record = EpochRecord {
            phase: Phase::Warm,
            epoch,
            tau: None,
            train: LossComponents { bce, total: bce, ..LossComponents::default() },
            valid: validate(&model, &valid_set.requests, threads)?,
        };
        progress(&record);
        history.epochs.push(record);
    }

    let schedule = AnnealSchedule::new(config.tau_start, config.tau_end, config.tau_decay)?;
    let baseline = validate(&model, &valid_set.requests, threads)?;
    let mut stopper = EarlyStopper::with_baseline(config.patience, baseline.loss.total);
    let mut best: ParamStore = model.params.clone();

    for epoch in 0..config.epochs {
        let tau = schedule.tau(epoch);
        let labels = teacher_labels(&model, &train_set.requests, threads)?;
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(&Request, &Vec<f64>)> =
                chunk.iter().map(|&i| (&train_set.requests[i], &labels[i])).collect();
            sums.accumulate(&joint_step(&mut model, &batch, tau, &mut rng, epoch, step)?);
        }
        let valid = validate(&model, &valid_set.requests, threads)?;
        let record = EpochRecord {
            phase: Phase::Joint,
            epoch,
            tau: Some(tau),
            train: sums.scaled(1.0 / train_set.len() as f64),
            valid,
        };
        progress(&record);
        history.epochs.push(record);
        match stopper.update(epoch, valid.loss.total) {
            StopDecision::Improved => best = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.best_joint_epoch = stopper.best_epoch;
    model.params = best;
    Ok((model, history))
}

/// Gradient of a weighted loss with respect to every parameter, as one flat
/// tensor per parameter name (used by tests and tooling).
pub fn loss_gradients(
    model: &Model,
    request: &Request,
    y_tea: &[f64],
    targets: &[usize],
    tau: f64,
    seed: u64,
) -> Result<Vec<(String, Tensor)>> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = request_loss(&mut tape, &bound, model, request, y_tea, targets, tau, Some(&mut rng))?;
    let mut g = tape.backward(v.total)?;
    Ok(bound
        .iter()
        .map(|(n, var)| (n.to_string(), g.take(var).expect("leaf gradient")))
        .collect())
}

#[cfg(test)]
mod tests;
