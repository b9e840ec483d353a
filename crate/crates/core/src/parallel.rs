//! Order-preserving parallel map over scoped threads.

use std::thread;

/// Applies `f` to every element using up to `threads` workers. Output order
/// matches input order, so results do not depend on the worker count.
pub fn par_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Worker count from an explicit value, else `DIVRANK_THREADS`, else 1.
pub fn resolve_threads(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var("DIVRANK_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_kept() {
        let v: Vec<u64> = (0..1000).collect();
        let one = par_map(&v, 1, |x| x * x);
        let four = par_map(&v, 4, |x| x * x);
        assert_eq!(one, four);
        assert!(par_map(&Vec::<u8>::new(), 3, |x| *x).is_empty());
    }
}
