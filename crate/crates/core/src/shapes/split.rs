use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::ShapesError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitMode {
    /// `A` is the first `a_count` ids.
    Fixed { a_count: usize },
    /// `A` is a seeded random subset of size `a_count`.
    Random { a_count: usize, seed: u64 },
}

/// Partition of the vocabulary into mask-annotated `A` and box-only `B`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SplitConfig {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub mode: SplitMode,
}

impl SplitConfig {
    pub fn num_classes(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn in_a(&self, class: usize) -> bool {
        self.a.binary_search(&class).is_ok()
    }

    /// Split with every class in `A`.
    pub fn all_supervised(num_classes: usize) -> Self {
        SplitConfig { a: (0..num_classes).collect(), b: Vec::new(), mode: SplitMode::Fixed { a_count: num_classes } }
    }

    /// Short hex digest identifying the partition.
    pub fn hash(&self) -> String {
        let text = format!("A={:?};B={:?}", self.a, self.b);
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

pub fn split_classes(num_classes: usize, mode: SplitMode) -> Result<SplitConfig, ShapesError> {
    let a_count = match mode {
        SplitMode::Fixed { a_count } | SplitMode::Random { a_count, .. } => a_count,
    };
    if a_count == 0 || a_count >= num_classes {
        return Err(ShapesError::Split(format!(
            "|A| = {a_count} must satisfy 1 <= |A| < {num_classes}"
        )));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    if let SplitMode::Random { seed, .. } = mode {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut a = ids[..a_count].to_vec();
    let mut b = ids[a_count..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok(SplitConfig { a, b, mode })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_takes_first_ids() {
        let s = split_classes(10, SplitMode::Fixed { a_count: 5 }).unwrap();
        assert_eq!(s.a, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.b, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn random_is_deterministic_and_partitions() {
        for seed in 0..50 {
            let mode = SplitMode::Random { a_count: 4, seed };
            let s = split_classes(10, mode).unwrap();
            assert_eq!(s, split_classes(10, mode).unwrap());
            let mut all: Vec<usize> = s.a.iter().chain(&s.b).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
            assert!(s.a.iter().all(|c| !s.b.contains(c)));
            assert_eq!(s.a.len(), 4);
        }
    }

    #[test]
    fn infeasible_sizes() {
        assert!(split_classes(10, SplitMode::Fixed { a_count: 0 }).is_err());
        assert!(split_classes(10, SplitMode::Fixed { a_count: 10 }).is_err());
    }
}
