//! Runs the interest-aware MMR teacher on one request of an untrained model
//! and prints the greedy trace for a few values of λ.

use divrank::catalog::{generate_synthetic, SyntheticSpec};
use divrank::teacher::{mmr_select, MmrMode, TeacherInput};
use divrank::{Model, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> divrank::Result<()> {
    let spec = SyntheticSpec { num_requests: 4, candidates_per_request: 30, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec)?;
    let model = Model::init(data.vocab.clone(), TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))?;
    let request = &data.requests[0];
    let input = TeacherInput::from_model(&model, request);
    for lambda in [0.0, 0.2, 1.0] {
        let recompute = mmr_select(&input, lambda, 6, MmrMode::Recompute)?;
        let cached = mmr_select(&input, lambda, 6, MmrMode::Cached)?;
        assert_eq!(recompute.winners, cached.winners);
        println!("lambda = {lambda}");
        for (step, s) in recompute.trace.iter().enumerate() {
            let item = request.candidates[s.position].item;
            println!(
                "  {step}: position {:3} item {:>10} category {:>6} acc {:.4} gain {:.4}",
                s.position,
                model.vocab.items.name(item),
                model.vocab.categories.name(model.vocab.category_of(item)),
                input.acc[s.position],
                s.gain
            );
        }
        println!(
            "  similarity evaluations: {} (recompute), {} (cached)",
            recompute.similarity_evals, cached.similarity_evals
        );
    }
    Ok(())
}
