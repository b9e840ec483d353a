//! Gumbel-Top-k subset sampling: empirical inclusion frequencies against the
//! sampling weights, and the relaxed k-hot vector as τ shrinks.

use divrank::sampler::{perturb, relaxed_topk};
use divrank::topk::top_k;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> divrank::Result<()> {
    let weights = [0.4, 0.3, 0.2, 0.1];
    let log_w: Vec<f64> = weights.iter().map(|w: &f64| w.ln()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = 200_000;
    let mut first = [0usize; 4];
    let mut member = [0usize; 4];
    for _ in 0..draws {
        let p = perturb(&log_w, &mut rng);
        let top = top_k(&p, 2);
        first[top[0]] += 1;
        top.iter().for_each(|&i| member[i] += 1);
    }
    println!("item  weight  first-pick  in top-2");
    for i in 0..4 {
        println!(
            "{i:4}  {:6.2}  {:10.4}  {:8.4}",
            weights[i],
            first[i] as f64 / draws as f64,
            member[i] as f64 / draws as f64
        );
    }

    let p = perturb(&log_w, &mut rng);
    println!("\nperturbed {p:.3?}, hard top-2 {:?}", top_k(&p, 2));
    for tau in [1.0, 0.3, 0.1, 0.01] {
        let r = relaxed_topk(&p, 2, tau)?;
        println!("tau {tau:5}: a = {:.4?}", r.a);
    }
    Ok(())
}
