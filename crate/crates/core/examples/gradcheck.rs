//! Finite-difference check of the full distillation loss against every
//! parameter of a small model.

use divrank::catalog::{generate_synthetic, SyntheticSpec};
use divrank::distill::{request_loss, teacher_labels};
use divrank::numeric::grad_check_params;
use divrank::{Model, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> divrank::Result<()> {
    let spec = SyntheticSpec {
        num_users: 3,
        num_requests: 2,
        catalog_size: 40,
        num_categories: 4,
        candidates_per_request: 8,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    let config = TrainConfig { d: 4, hidden: [5, 3], k: 2, k_teacher: Some(3), ..TrainConfig::default() };
    let model = Model::init(data.vocab.clone(), config, &mut ChaCha8Rng::seed_from_u64(11))?;
    let request = &data.requests[0];
    let y = teacher_labels(&model, std::slice::from_ref(request), 1)?.remove(0);
    let targets: Vec<usize> = (0..request.len()).collect();
    let check = grad_check_params(&model.params, 1e-5, |_| true, |tape, bound| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Ok(request_loss(tape, bound, &model, request, &y, &targets, 0.5, Some(&mut rng))?.total)
    })?;
    println!(
        "{} coordinates, max relative error {:.2e} ({}[{}])",
        check.coordinates, check.max_rel_error, check.worst_param, check.worst_index
    );
    Ok(())
}
