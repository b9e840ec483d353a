//! Generates a synthetic request file and prints a short summary.
//!
//! cargo run --release --example gen_data -- out.jsonl [requests] [seed]

use divrank::catalog::{generate_synthetic, write_jsonl, SyntheticSpec};

fn main() -> divrank::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map(String::as_str).unwrap_or("synthetic.jsonl");
    let mut spec = SyntheticSpec::default();
    if let Some(n) = args.get(1) {
        spec.num_requests = n.parse().expect("request count");
    }
    if let Some(s) = args.get(2) {
        spec.seed = s.parse().expect("seed");
    }
    let data = generate_synthetic(&spec)?;
    write_jsonl(&data, out)?;
    let shown: usize = data.requests.iter().map(|r| r.shown().len()).sum();
    let positives: usize = data.requests.iter().map(|r| r.positives().len()).sum();
    println!(
        "{} requests, {} candidates each, {} items over {} categories",
        data.len(),
        spec.candidates_per_request,
        data.vocab.items.len(),
        data.vocab.categories.len()
    );
    println!("{shown} shown candidates, {positives} positives -> {out}");
    Ok(())
}
