use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::rng::Rng;

/// Index batches over `n` samples. With `shuffle_seed` the order is a seeded
/// permutation; the last batch may be short.
pub fn batch_iter(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_with_short_last_batch() {
        let sizes: Vec<usize> = batch_iter(10, 3, Some(1)).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn unshuffled_keeps_order() {
        let flat: Vec<usize> = batch_iter(7, 2, None).concat();
        assert_eq!(flat, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn shuffled_batches_form_a_permutation() {
        for seed in 0..20 {
            let mut flat = batch_iter(37, 5, Some(seed)).concat();
            flat.sort_unstable();
            assert_eq!(flat, (0..37).collect::<Vec<_>>());
        }
        assert_ne!(batch_iter(37, 5, Some(1)), batch_iter(37, 5, Some(2)));
    }
}
