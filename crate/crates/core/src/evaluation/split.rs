use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index partitions over `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitPlan {
    Holdout {
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
    KFold {
        folds: Vec<Vec<usize>>,
    },
}

impl SplitPlan {
    /// Test folds in order (a holdout plan has a single one).
    pub fn test_sets(&self) -> Vec<&[usize]> {
        match self {
            SplitPlan::Holdout { test, .. } => vec![test],
            SplitPlan::KFold { folds } => folds.iter().map(Vec::as_slice).collect(),
        }
    }

    /// Training indices for fold `k`: every other fold, in fold order.
    pub fn kfold_train(&self, k: usize) -> Option<Vec<usize>> {
        let SplitPlan::KFold { folds } = self else { return None };
        if k >= folds.len() {
            return None;
        }
        Some(
            folds
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .flat_map(|(_, f)| f.iter().copied())
                .collect(),
        )
    }
}

/// Splits `total` into parts proportional to `weights`: floor every share,
/// then hand the leftover units to the largest fractional remainders
/// (earlier parts win ties).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let left = total - sizes.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        sizes[i] += 1;
    }
    sizes
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

pub const HOLDOUT_MIN: usize = 10;

/// 80% train; the remaining 20% goes 6% / 94% to validation / test.
pub fn holdout_split(n: usize, seed: u64) -> Result<SplitPlan> {
    if n < HOLDOUT_MIN {
        return Err(Error::invalid("holdout split", format!("need at least {HOLDOUT_MIN} samples, got {n}")));
    }
    let outer = largest_remainder(n, &[0.8, 0.2]);
    let inner = largest_remainder(outer[1], &[0.06, 0.94]);
    let idx = shuffled(n, seed);
    let (train, rest) = idx.split_at(outer[0]);
    let (val, test) = rest.split_at(inner[0]);
    Ok(SplitPlan::Holdout {
        train: train.to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    })
}

/// `k` shuffled folds; the first `n % k` folds get one extra sample.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 || n < k {
        return Err(Error::invalid("k-fold split", format!("need 2 <= k <= n, got k={k}, n={n}")));
    }
    let idx = shuffled(n, seed);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        folds.push(idx[start..start + size].to_vec());
        start += size;
    }
    Ok(SplitPlan::KFold { folds })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sizes(plan: &SplitPlan) -> (usize, usize, usize) {
        match plan {
            SplitPlan::Holdout { train, val, test } => (train.len(), val.len(), test.len()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn holdout_sizes() {
        assert_eq!(sizes(&holdout_split(3153, 0).unwrap()), (2522, 38, 593));
        assert_eq!(sizes(&holdout_split(100, 0).unwrap()), (80, 1, 19));
        assert!(holdout_split(9, 0).is_err());
        assert_eq!(holdout_split(50, 7).unwrap(), holdout_split(50, 7).unwrap());
        assert_ne!(holdout_split(50, 7).unwrap(), holdout_split(50, 8).unwrap());
    }

    #[test]
    fn kfold_sizes() {
        let SplitPlan::KFold { folds } = kfold_split(23, 10, 1).unwrap() else { unreachable!() };
        let mut s: Vec<usize> = folds.iter().map(Vec::len).collect();
        s.sort();
        assert_eq!(s, [2, 2, 2, 2, 2, 2, 2, 3, 3, 3]);
        let SplitPlan::KFold { folds } = kfold_split(20, 10, 1).unwrap() else { unreachable!() };
        assert!(folds.iter().all(|f| f.len() == 2));
        assert!(kfold_split(9, 10, 0).is_err());
    }

    #[test]
    fn kfold_train_is_the_complement() {
        let plan = kfold_split(11, 3, 2).unwrap();
        let mut t = plan.kfold_train(1).unwrap();
        t.extend_from_slice(plan.test_sets()[1]);
        t.sort();
        assert_eq!(t, (0..11).collect::<Vec<_>>());
        assert!(plan.kfold_train(3).is_none());
    }

    proptest! {
        #[test]
        fn holdout_is_a_partition(n in 10usize..2000, seed in any::<u64>()) {
            let plan = holdout_split(n, seed).unwrap();
            let SplitPlan::Holdout { train, val, test } = &plan else { unreachable!() };
            let mut all: Vec<usize> = train.iter().chain(val).chain(test).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let nf = n as f64;
            prop_assert!((train.len() as f64 - 0.8 * nf).abs() <= 1.0);
            prop_assert!((val.len() as f64 - 0.012 * nf).abs() <= 1.0);
            prop_assert!((test.len() as f64 - 0.188 * nf).abs() <= 1.0);
        }

        #[test]
        fn kfold_is_a_partition(n in 2usize..500, k in 2usize..12, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let plan = kfold_split(n, k, seed).unwrap();
            let tests = plan.test_sets();
            let lens: Vec<usize> = tests.iter().map(|f| f.len()).collect();
            prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
            let mut all: Vec<usize> = tests.concat();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
