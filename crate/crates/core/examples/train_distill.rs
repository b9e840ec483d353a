//! Trains the backbone and the distilled student on a synthetic catalog and
//! prints the per-epoch history.
//!
//! cargo run --release --example train_distill -- requests=600 epochs=8 learning_rate=0.5
//!
//! Any `TrainConfig` field can be overridden as `name=value`.

use std::time::Instant;

use divrank::catalog::{generate_synthetic, SyntheticSpec};
use divrank::distill::{train_with_progress, EpochRecord, Phase};
use divrank::TrainConfig;

fn main() -> divrank::Result<()> {
    let mut spec = SyntheticSpec { num_requests: 600, ..SyntheticSpec::default() };
    let mut config = serde_json::to_value(TrainConfig { epochs: 8, ..TrainConfig::default() })?;
    for arg in std::env::args().skip(1) {
        let Some((key, value)) = arg.split_once('=') else {
            eprintln!("ignoring `{arg}` (expected name=value)");
            continue;
        };
        if key == "requests" {
            spec.num_requests = value.parse().expect("request count");
        } else {
            config[key] = serde_json::from_str(value)?;
        }
    }
    let config: TrainConfig = serde_json::from_value(config)?;
    let data = generate_synthetic(&spec)?;
    let start = Instant::now();
    let mut report = |r: &EpochRecord| {
        let phase = match r.phase {
            Phase::Warm => "warm",
            Phase::Joint => "joint",
        };
        println!(
            "{phase:5} {:2} tau={:.3} train={:.4} (bce {:.4} kd {:.4} nce {:.4}) valid={:.4} auc_stu={:.3} auc_f={:.3} [{:.1}s]",
            r.epoch,
            r.tau.unwrap_or(f64::NAN),
            r.train.total,
            r.train.bce,
            r.train.kd,
            r.train.infonce,
            r.valid.loss.total,
            r.valid.student_auc,
            r.valid.backbone_auc,
            start.elapsed().as_secs_f64()
        );
    };
    let (_, history) = train_with_progress(&data, &config, 1, &mut report)?;
    println!("best joint epoch: {:?}, stopped early: {}", history.best_joint_epoch, history.stopped_early);
    Ok(())
}
