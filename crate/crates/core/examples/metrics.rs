//! The ranking metrics on small hand-made inputs.

use divrank::eval::{auc, cc_at_k, ilad_at_k, mrr_at_k, recall_at_k};

fn main() -> divrank::Result<()> {
    let a = [1.0, 0.0];
    let b = [0.0, 1.0];
    let c = [1.0, 1.0];
    println!("ILAD of two orthogonal items: {:.4}", ilad_at_k(&[&a, &b])?);
    println!("ILAD of {{a, b, a+b}}: {:.4}", ilad_at_k(&[&a, &b, &c])?);
    println!("CC of lists covering 2 of 4 categories: {:.4}", cc_at_k(&[vec![0, 1, 1, 0]], 4)?);
    let top = [7, 3, 9];
    println!("Recall@3 with positives {{3, 5}}: {:?}", recall_at_k(&top, &[3, 5]));
    println!("MRR@3 with positives {{3, 5}}: {:?}", mrr_at_k(&top, &[3, 5]));
    println!("MRR@3 with positives {{5}}: {:?}", mrr_at_k(&top, &[5]));
    println!("AUC of a perfect scorer: {:?}", auc(&[0.9, 0.8, 0.2], &[1.0, 1.0, 0.0]));
    println!("AUC with ties: {:?}", auc(&[0.5, 0.5], &[1.0, 0.0]));
    Ok(())
}
