//! Seeded train/test partition.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// A seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Shuffle with `seed` and put the first `floor(train_fraction · N)` items in the training set.
/// Both halves keep the shuffled order.
pub fn dataset_split<T>(records: Vec<T>, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if records.len() < 2 {
        bail!(Invalid, "need at least 2 records to split, got {}", records.len());
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        bail!(Config, "train fraction must lie in (0, 1), got {}", train_fraction);
    }
    let n = records.len();
    let order = shuffled_indices(n, seed);
    let n_train = (train_fraction * n as f64) as usize;
    let mut slots: Vec<Option<T>> = records.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index appears once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let test = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        let (tr, te) = dataset_split((0..400).collect(), 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (320, 80));
        let (tr, te) = dataset_split(alloc::vec![1, 2], 0.5, 0).unwrap();
        assert_eq!(tr.len() + te.len(), 2);
        assert_ne!(tr, te);
        assert!(dataset_split(alloc::vec![1], 0.5, 0).is_err());
        assert!(dataset_split(alloc::vec![1, 2], 1.0, 0).is_err());
    }
}
