//! Trains on synthetic data and reports accuracy and diversity of the fused
//! ranking `f + γ · y_stu` across γ.
//!
//! cargo run --release --example gamma_sweep -- [requests] [seed]

use divrank::catalog::{generate_synthetic, split_train_eval, SyntheticSpec};
use divrank::distill::train;
use divrank::eval::evaluate;
use divrank::TrainConfig;

fn main() -> divrank::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let requests = args.first().copied().unwrap_or(800) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    let data = generate_synthetic(&SyntheticSpec { num_requests: requests, seed, ..SyntheticSpec::default() })?;
    let (train_set, eval_set) = split_train_eval(&data, 0.2, seed)?;
    let config = TrainConfig { seed, epochs: 10, ..TrainConfig::default() };
    let (model, history) = train(&train_set, &config, 1)?;
    println!("trained {} epochs (best joint {:?})", history.epochs.len(), history.best_joint_epoch);
    let gammas = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.5, 1.0];
    println!("gamma  recall@20  mrr@20  ilad@20  cc@20");
    for r in evaluate(&model, &eval_set, &[20], &gammas, 1)? {
        println!("{:5.2}  {:9.4}  {:6.4}  {:7.4}  {:5.4}", r.gamma, r.recall, r.mrr, r.ilad, r.cc);
    }
    Ok(())
}
