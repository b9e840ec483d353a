//! Teacher (MMR, `O(N K²)`) versus student (score all + heap Top-K) latency
//! on one large synthetic request.
//!
//! cargo run --release --example latency_bench -- [N] [K] [repeats]

use divrank::catalog::{generate_synthetic, SyntheticSpec};
use divrank::eval::latency_bench;
use divrank::{Model, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> divrank::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(10_000);
    let k = args.get(1).copied().unwrap_or(100);
    let repeats = args.get(2).copied().unwrap_or(5);

    let spec = SyntheticSpec { num_requests: 10, candidates_per_request: 50, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec)?;
    let model = Model::init(data.vocab.clone(), TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let r = latency_bench(&model, n, k, repeats)?;
    println!(
        "N={n} K={k}: teacher {:.1} ms, student {:.2} ms, speedup {:.1}x",
        r.teacher.median_ms, r.student.median_ms, r.speedup
    );
    println!(
        "teacher similarity evals K/2 -> K: {} -> {} ({:.3}x)",
        r.teacher_scaling.counts[0], r.teacher_scaling.counts[1], r.teacher_scaling.ratio
    );
    println!(
        "student comparisons N/2 -> N: {} -> {} ({:.3}x)",
        r.student_scaling.counts[0], r.student_scaling.counts[1], r.student_scaling.ratio
    );
    Ok(())
}
