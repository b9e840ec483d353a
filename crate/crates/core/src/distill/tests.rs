use super::*;
use crate::catalog::{generate_synthetic, CandidateEntry, SyntheticSpec};
use crate::cce::win_probability;
use crate::model::{FFN_W2, MLP_W1, MLP_W3};
use crate::numeric::grad_check_params;
use approx::assert_relative_eq;
use std::sync::Arc;

fn micro() -> (Model, Request) {
    let spec = SyntheticSpec {
        num_users: 3,
        num_requests: 2,
        catalog_size: 40,
        num_categories: 4,
        candidates_per_request: 8,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let config = TrainConfig { d: 4, hidden: [5, 3], k: 2, k_teacher: Some(3), ..TrainConfig::default() };
    let model = Model::init(Arc::clone(&data.vocab), config, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    (model, data.requests[0].clone())
}

fn small_data(requests: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        num_users: 20,
        num_requests: requests,
        catalog_size: 300,
        num_categories: 8,
        candidates_per_request: 24,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        d: 6,
        hidden: [8, 4],
        k: 3,
        warm_epochs: 2,
        epochs: 2,
        batch_size: 8,
        targets_per_request: 8,
        valid_fraction: 0.25,
        ..TrainConfig::default()
    }
}

#[test]
fn kd_examples() {
    assert!(kd_loss(&[1.0 - 1e-12], &[1.0]).unwrap() < 1e-9);
    assert_relative_eq!(kd_loss(&[0.5], &[1.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
    let want = -(0.8f64.ln() + 0.7f64.ln() + 0.9f64.ln()) / 3.0;
    assert_relative_eq!(kd_loss(&[0.8, 0.3, 0.1], &[1.0, 0.0, 0.0]).unwrap(), want, epsilon = 1e-15);
    assert_relative_eq!(want, 0.228393, epsilon = 1e-6);
    assert!(kd_loss(&[0.5], &[]).is_err());
}

#[test]
fn win_probability_examples() {
    assert_eq!(win_probability(&[0.0, 1.0], &[1.0, 0.0]), 0.5);
    assert_relative_eq!(win_probability(&[3.0], &[1.0]), 0.952574, epsilon = 1e-6);
    assert!(win_probability(&[10.0], &[-10.0]) > 0.0);
    assert!(win_probability(&[10.0], &[3.0]) < 1.0);
}

#[test]
fn zero_betas_leave_bce() {
    let (mut model, r) = micro();
    model.config.beta1 = 0.0;
    model.config.beta2 = 0.0;
    let y = teacher_labels(&model, std::slice::from_ref(&r), 1).unwrap().remove(0);
    let c = total_loss(&r, &model, &y, 0.5).unwrap();
    assert_eq!(c.total, c.bce);
    assert!(c.bce > 0.0 && c.kd >= 0.0 && c.infonce >= 0.0);
}

#[test]
fn teacher_labels_have_k_winners() {
    let (model, r) = micro();
    let y = teacher_labels(&model, std::slice::from_ref(&r), 1).unwrap().remove(0);
    assert_eq!(y.iter().filter(|&&v| v == 1.0).count(), 3);
    assert_eq!(y.iter().filter(|&&v| v == 0.0).count(), 5);
}

#[test]
fn full_loss_gradcheck() {
    let (model, r) = micro();
    let y = teacher_labels(&model, std::slice::from_ref(&r), 1).unwrap().remove(0);
    let targets: Vec<usize> = (0..r.len()).collect();
    let check = grad_check_params(&model.params, 1e-5, |_| true, |tape, bound| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Ok(request_loss(tape, bound, &model, &r, &y, &targets, 0.5, Some(&mut rng))?.total)
    })
    .unwrap();
    assert!(check.max_rel_error < 1e-4, "{check:?}");
}

#[test]
fn kd_alone_does_not_reach_the_scorer_mlp() {
    let (mut model, mut r) = micro();
    model.config.beta2 = 0.0;
    for c in &mut r.candidates {
        c.label = None;
    }
    let y = teacher_labels(&model, std::slice::from_ref(&r), 1).unwrap().remove(0);
    let targets: Vec<usize> = (0..r.len()).collect();
    let grads = loss_gradients(&model, &r, &y, &targets, 0.5, 5).unwrap();
    for (name, g) in &grads {
        let zero = g.data().iter().all(|&v| v == 0.0);
        if name.starts_with("mlp.") || name == crate::model::CAT_EMB {
            assert!(zero, "{name} received gradient");
        }
    }
    assert!(grads.iter().any(|(n, g)| n == FFN_W2 && g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn absent_labels_skip_bce() {
    let (model, mut r) = micro();
    r.candidates = r.candidates.iter().map(|c| CandidateEntry { label: None, ..*c }).collect();
    let y = vec![0.0; r.len()];
    assert_eq!(total_loss(&r, &model, &y, 1.0).unwrap().bce, 0.0);
}

#[test]
fn early_stop_patience() {
    let mut s = EarlyStopper::with_baseline(10, 1.0);
    assert_eq!(s.update(0, 0.9), StopDecision::Improved);
    for e in 1..10 {
        assert_eq!(s.update(e, 0.95), StopDecision::Continue, "epoch {e}");
    }
    assert_eq!(s.update(10, 0.9), StopDecision::Stop);
    assert_eq!(s.best_epoch, Some(0));
}

#[test]
fn training_is_deterministic() {
    let data = small_data(40);
    let (a, ha) = train(&data, &small_config(), 1).unwrap();
    let (b, hb) = train(&data, &small_config(), 2).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params, b.params);
    assert_eq!(serde_json::to_string(&ha).unwrap(), serde_json::to_string(&hb).unwrap());
}

#[test]
fn zero_joint_epochs_keep_phase_one() {
    let data = small_data(40);
    let config = TrainConfig { epochs: 0, ..small_config() };
    let (m, h) = train(&data, &config, 1).unwrap();
    assert!(h.epochs.iter().all(|e| e.phase == Phase::Warm));
    assert_eq!(h.best_joint_epoch, None);
    let joint = TrainConfig { epochs: 1, patience: 1, ..small_config() };
    let (_, h1) = train(&data, &joint, 1).unwrap();
    assert_eq!(h.epochs[..], h1.epochs[..config.warm_epochs]);
    assert!(m.params.get(MLP_W3).unwrap().all_finite());
}

#[test]
fn warm_loss_decreases() {
    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let config = TrainConfig { warm_epochs: 5, epochs: 0, ..TrainConfig::default() };
    let (_, h) = train(&data, &config, 1).unwrap();
    let losses: Vec<f64> = h.epochs.iter().map(|e| e.train.bce).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn divergence_is_reported() {
    let data = small_data(40);
    let config = TrainConfig { learning_rate: 1e200, ..small_config() };
    match train(&data, &config, 1) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|(_, h)| h)),
    }
}

#[test]
fn checkpoint_round_trip() {
    let data = small_data(20);
    let model = tiny_model(&data);
    let dir = tempfile::tempdir().unwrap();
    save(&model, dir.path()).unwrap();
    let blob = std::fs::read(dir.path().join("weights.bin")).unwrap();
    let loaded = load(dir.path()).unwrap();
    assert_eq!(loaded.params, model.params);
    assert_eq!(*loaded.vocab, *model.vocab);
    assert_eq!(loaded.config, model.config);
    let again = tempfile::tempdir().unwrap();
    save(&loaded, again.path()).unwrap();
    assert_eq!(std::fs::read(again.path().join("weights.bin")).unwrap(), blob);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let u = rng.random_range(0..model.vocab.users.len());
        let i = rng.random_range(0..model.vocab.items.len());
        assert_eq!(model.score(u, i).to_bits(), loaded.score(u, i).to_bits());
    }
}

fn tiny_model(data: &Dataset) -> Model {
    let config = TrainConfig { d: 5, hidden: [7, 3], k: 2, ..TrainConfig::default() };
    Model::init(Arc::clone(&data.vocab), config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let data = small_data(20);
    let model = tiny_model(&data);
    let dir = tempfile::tempdir().unwrap();
    save(&model, dir.path()).unwrap();
    let weights = dir.path().join("weights.bin");
    let blob = std::fs::read(&weights).unwrap();
    std::fs::write(&weights, &blob[..blob.len() - 3]).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Corrupt(_))));
    std::fs::write(&weights, &blob).unwrap();

    let manifest_path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    std::fs::write(&manifest_path, text.replace(FFN_W2, "cce.ffn.w9")).unwrap();
    match load(dir.path()) {
        Err(Error::Corrupt(msg)) => assert!(msg.contains("unknown tensor"), "{msg}"),
        other => panic!("{:?}", other.map(|_| ())),
    }
    std::fs::write(&manifest_path, &text).unwrap();

    let mut m: Manifest = serde_json::from_str(&text).unwrap();
    m.tensors.retain(|t| t.name != MLP_W1);
    std::fs::write(&manifest_path, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Corrupt(_))));
}

#[test]
fn history_round_trip() {
    let data = small_data(40);
    let config = TrainConfig { epochs: 1, ..small_config() };
    let (_, h) = train(&data, &config, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_history(&h, dir.path()).unwrap();
    assert_eq!(load_history(dir.path()).unwrap(), h);
}
