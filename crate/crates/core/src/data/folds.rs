use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold split over sample labels.
///
/// Each class is shuffled with the seed and dealt round-robin over the folds;
/// the dealing position carries over between classes so fold totals stay
/// within one of each other as well. Index lists are returned sorted.
pub fn stratified_kfold(labels: &[usize], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < n_folds {
            return Err(Error::Config(format!(
                "class {c} has {} samples, fewer than {n_folds} folds",
                m.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut next = 0usize;
    for m in members.iter_mut() {
        m.shuffle(&mut rng);
        for &i in m.iter() {
            fold_of[i] = next;
            next = (next + 1) % n_folds;
        }
    }
    Ok((0..n_folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..labels.len()).partition(|&i| fold_of[i] == f);
            FoldSplit { train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn too_small_class_is_rejected() {
        let labels = [0, 0, 0, 1, 1, 1, 1, 1];
        assert!(matches!(stratified_kfold(&labels, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_split() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        assert_eq!(
            stratified_kfold(&labels, 5, 42).unwrap(),
            stratified_kfold(&labels, 5, 42).unwrap()
        );
    }

    proptest! {
        #[test]
        fn folds_partition_and_stratify(
            counts in proptest::collection::vec(5usize..40, 2..4),
            seed in any::<u64>(),
        ) {
            let labels: Vec<usize> = counts
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
                .collect();
            let folds = stratified_kfold(&labels, 5, seed).unwrap();
            let mut seen = vec![0usize; labels.len()];
            for f in &folds {
                for &i in &f.test { seen[i] += 1; }
                prop_assert_eq!(f.train.len() + f.test.len(), labels.len());
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            for c in 0..counts.len() {
                let per: Vec<usize> = folds
                    .iter()
                    .map(|f| f.test.iter().filter(|&&i| labels[i] == c).count())
                    .collect();
                let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}
