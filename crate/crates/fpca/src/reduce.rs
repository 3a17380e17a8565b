//! Deterministic pairwise summation.
//!
//! Per-subject contributions are always reduced with a fixed binary tree so
//! that results are bitwise reproducible regardless of how the terms were
//! produced (sequentially or by a thread pool writing into an indexed buffer).

/// Reduces `items` with a balanced binary tree; `None` when empty.
///
/// The tree shape depends only on `items.len()`, so the floating-point
/// rounding pattern is fixed for a given input order.
pub(crate) fn tree_reduce<T, F>(items: &[T], combine: &F) -> Option<T>
where
    T: Clone,
    F: Fn(&T, &T) -> T,
{
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        n => {
            let mid = n.div_ceil(2);
            let left = tree_reduce(&items[..mid], combine)?;
            let right = tree_reduce(&items[mid..], combine)?;
            Some(combine(&left, &right))
        }
    }
}

/// Pairwise sum of scalars; 0.0 when empty.
pub(crate) fn tree_sum(xs: &[f64]) -> f64 {
    tree_reduce(xs, &|a, b| a + b).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_sequential_sum_closely() {
        let xs: Vec<f64> = (1..=1000).map(|i| 1.0 / i as f64).collect();
        let seq: f64 = xs.iter().sum();
        assert!((tree_sum(&xs) - seq).abs() < 1e-12);
    }

    #[test]
    fn empty_and_singleton() {
        assert_eq!(tree_sum(&[]), 0.0);
        assert_eq!(tree_sum(&[2.5]), 2.5);
    }

    #[test]
    fn reduction_is_reproducible() {
        let xs: Vec<f64> = (0..257).map(|i| (i as f64).sin() * 1e8).collect();
        assert_eq!(tree_sum(&xs).to_bits(), tree_sum(&xs).to_bits());
    }
}
