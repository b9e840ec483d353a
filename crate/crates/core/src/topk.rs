//! Bounded min-heap Top-K selection with an instrumented comparison counter.
//!
//! Order: higher score first, equal scores broken by the smaller index.

use std::cmp::Ordering;

/// `true` when `(sa, ia)` ranks strictly below `(sb, ib)`.
#[inline]
fn worse(sa: f64, ia: usize, sb: f64, ib: usize) -> bool {
    match sa.partial_cmp(&sb) {
        Some(Ordering::Less) => true,
        Some(Ordering::Greater) => false,
        _ => ia > ib,
    }
}

/// Min-heap of `(key, index)` entries; the root is the worst kept entry.
struct Heap<'b> {
    slots: &'b mut Vec<(f64, usize)>,
    comparisons: u64,
}

impl Heap<'_> {
    #[inline]
    fn worse(&mut self, a: usize, b: usize) -> bool {
        self.comparisons += 1;
        let ((sa, ia), (sb, ib)) = (self.slots[a], self.slots[b]);
        worse(sa, ia, sb, ib)
    }

    fn run(&mut self, keys: impl Iterator<Item = f64>, k: usize, out: &mut Vec<usize>) {
        let mut keys = keys.enumerate();
        for (i, v) in keys.by_ref().take(k) {
            self.slots.push((v, i));
            self.sift_up(i);
        }
        let mut root = self.slots[0].0;
        for (i, v) in keys {
            // a later index never wins a tie, so only a strictly larger key
            // displaces the root
            self.comparisons += 1;
            if v > root {
                self.slots[0] = (v, i);
                self.sift_down(0);
                root = self.slots[0].0;
            }
        }
        // pop the root (worst) repeatedly to emit worst-to-best, then reverse
        while let Some(&(_, i)) = self.slots.first() {
            out.push(i);
            let last = self.slots.pop().expect("non-empty");
            if !self.slots.is_empty() {
                self.slots[0] = last;
                self.sift_down(0);
            }
        }
        out.reverse();
    }

    fn sift_up(&mut self, mut pos: usize) {
        while pos > 0 {
            let parent = (pos - 1) / 2;
            if self.worse(pos, parent) {
                self.slots.swap(pos, parent);
                pos = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut pos: usize) {
        let n = self.slots.len();
        loop {
            let (l, r) = (2 * pos + 1, 2 * pos + 2);
            let mut low = pos;
            if l < n && self.worse(l, low) {
                low = l;
            }
            if r < n && self.worse(r, low) {
                low = r;
            }
            if low == pos {
                break;
            }
            self.slots.swap(pos, low);
            pos = low;
        }
    }
}

/// Up to this many winners a sorted buffer with insertion beats the heap.
const SMALL_K: usize = 16;

/// Keeps the best `k` entries in a buffer sorted best first; a new key is
/// compared against the worst kept entry and then walked up to its place.
fn insertion_select(
    keys: impl Iterator<Item = f64>,
    k: usize,
    kept: &mut Vec<(f64, usize)>,
    out: &mut Vec<usize>,
) -> u64 {
    let mut comparisons = 0;
    for (i, v) in keys.enumerate() {
        if kept.len() == k {
            comparisons += 1;
            // ties go to the earlier index, which is already kept
            if !(v > kept[k - 1].0) {
                continue;
            }
            kept.pop();
        }
        kept.push((v, i));
        let mut pos = kept.len() - 1;
        // every kept index is smaller than `i`, so only a strictly smaller
        // key ranks below the newcomer
        while pos > 0 {
            comparisons += 1;
            if !(kept[pos - 1].0 < v) {
                break;
            }
            kept[pos] = kept[pos - 1];
            pos -= 1;
        }
        kept[pos] = (v, i);
    }
    out.extend(kept.iter().map(|&(_, i)| i));
    comparisons
}

/// Reusable buffers for repeated selections.
#[derive(Debug, Default)]
pub struct Selector {
    slots: Vec<(f64, usize)>,
    /// Result of the last selection, best first.
    pub out: Vec<usize>,
}

impl Selector {
    /// Selects the `k` largest (`largest = true`) or smallest scores into
    /// `self.out`, best first, and returns the comparisons spent.
    pub fn select(&mut self, scores: &[f64], k: usize, largest: bool) -> u64 {
        self.out.clear();
        self.slots.clear();
        let k = k.min(scores.len());
        if k == 0 {
            return 0;
        }
        if k <= SMALL_K {
            return if largest {
                insertion_select(scores.iter().copied(), k, &mut self.slots, &mut self.out)
            } else {
                insertion_select(scores.iter().map(|s| -s), k, &mut self.slots, &mut self.out)
            };
        }
        let mut heap = Heap { slots: &mut self.slots, comparisons: 0 };
        if largest {
            heap.run(scores.iter().copied(), k, &mut self.out);
        } else {
            heap.run(scores.iter().map(|s| -s), k, &mut self.out);
        }
        heap.comparisons
    }
}

/// Indices of the `k` best scores, best first, and the number of score
/// comparisons spent. Costs `O(N log K)` comparisons.
pub fn top_k_counted(scores: &[f64], k: usize) -> (Vec<usize>, u64) {
    let mut s = Selector::default();
    let c = s.select(scores, k, true);
    (s.out, c)
}

/// Indices of the `k` lowest scores, lowest first (ties to the smaller index),
/// and the comparisons spent.
pub fn bottom_k_counted(scores: &[f64], k: usize) -> (Vec<usize>, u64) {
    let mut s = Selector::default();
    let c = s.select(scores, k, false);
    (s.out, c)
}

/// Indices of the `k` best scores, best first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    top_k_counted(scores, k).0
}

/// Indices of the `k` lowest scores, lowest first; equal scores keep the
/// smaller index first.
pub fn bottom_k(scores: &[f64], k: usize) -> Vec<usize> {
    bottom_k_counted(scores, k).0
}

/// Reference ordering by full sort.
pub fn sorted_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        if worse(scores[a], a, scores[b], b) {
            Ordering::Greater
        } else if worse(scores[b], b, scores[a], a) {
            Ordering::Less
        } else {
            Ordering::Equal
        }
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_cases() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k(&[3.0, 1.0, 2.0], 3), vec![0, 2, 1]);
        assert_eq!(bottom_k(&[3.0, 1.0, 2.0, 1.0], 2), vec![1, 3]);
        assert!(top_k(&[1.0], 0).is_empty());
    }

    proptest! {
        #[test]
        fn bottom_matches_negated_top(scores in prop::collection::vec(-3i32..3, 1..60), k in 1usize..20) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert_eq!(bottom_k_counted(&scores, k), top_k_counted(&neg, k));
        }

        #[test]
        fn heap_matches_sort(scores in prop::collection::vec(-3i32..3, 1..60), k in 1usize..20) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let k = k.min(scores.len());
            prop_assert_eq!(top_k(&scores, k), sorted_top_k(&scores, k));
        }
    }

    #[test]
    fn comparisons_scale_with_n() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s1: Vec<f64> = (0..50_000).map(|_| rng.random()).collect();
        let s2: Vec<f64> = (0..100_000).map(|_| rng.random()).collect();
        let (_, c1) = top_k_counted(&s1, 10);
        let (_, c2) = top_k_counted(&s2, 10);
        let ratio = c2 as f64 / c1 as f64;
        assert!((1.8..2.2).contains(&ratio), "{ratio}");
    }
}
