use std::sync::Arc;

use divrank::catalog::{generate_synthetic, split_train_eval, SyntheticSpec};
use divrank::cce::StudentScorer;
use divrank::distill::{train, validate, Phase};
use divrank::model::{CCE_KEY, CCE_QUERY, CCE_VALUE, FFN_B1, FFN_B2, FFN_W1, FFN_W2};
use divrank::{Model, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn default_training_run() {
    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train_set, eval) = split_train_eval(&data, 1.0 / 6.0, 0).unwrap();
    let config = TrainConfig::default();
    let (model, history) = train(&train_set, &config, 1).unwrap();

    let warm: Vec<f64> = history.epochs.iter().filter(|e| e.phase == Phase::Warm).map(|e| e.train.bce).collect();
    assert!(warm.windows(2).all(|w| w[1] < w[0]), "{warm:?}");
    assert!(history.best_joint_epoch.is_some());

    let trained = validate(&model, &eval.requests, 1).unwrap();
    assert!(trained.backbone_auc > 0.7, "{trained:?}");

    // student weights as initialised, backbone as trained: the teacher labels match
    let fresh = Model::init(Arc::clone(&data.vocab), config, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let mut untrained = model.clone();
    for name in [CCE_QUERY, CCE_KEY, CCE_VALUE, FFN_W1, FFN_B1, FFN_W2, FFN_B2] {
        *untrained.params.get_mut(name).unwrap() = fresh.params.get(name).unwrap().clone();
    }
    let before = validate(&untrained, &eval.requests, 1).unwrap();
    assert!(trained.loss.kd <= 0.7 * before.loss.kd, "kd {} vs untrained {}", trained.loss.kd, before.loss.kd);

    let scorer = StudentScorer::new(&model);
    let (mut pos, mut neg, mut n) = (0.0, 0.0, 0usize);
    for r in &eval.requests {
        let s = scorer.score_request(r).unwrap();
        pos += s.pos_logit.iter().sum::<f64>();
        neg += s.neg_logit.iter().sum::<f64>();
        n += r.len();
    }
    assert!(pos / n as f64 > neg / n as f64, "mean q.C+ {} vs q.C- {}", pos / n as f64, neg / n as f64);
}
