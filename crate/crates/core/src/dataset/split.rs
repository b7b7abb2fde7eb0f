use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::rng::{domain, stream};

/// Train/test partition plus validation folds over the train subset.
/// Indices refer to manifest entries and are kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
    pub k: usize,
    pub seed: u64,
}

impl SplitPlan {
    /// Validation indices of fold `f`.
    pub fn fold_val(&self, f: usize) -> &[usize] {
        &self.folds[f]
    }

    /// Train indices minus fold `f`.
    pub fn fold_train(&self, f: usize) -> Vec<usize> {
        let val = &self.folds[f];
        self.train_indices
            .iter()
            .copied()
            .filter(|i| val.binary_search(i).is_err())
            .collect()
    }
}

fn class_members(labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

fn round_half_away(x: f64) -> i64 {
    // tolerate representation error such as 31.499999999999996
    (x + 0.5 + 1e-9).floor() as i64
}

/// Per-class test counts for `fraction`.
///
/// Each class gets `round(fraction · n_c)`. If the sum misses
/// `round(fraction · N)`, classes are ranked by fractional quota
/// (ties: lower class index ranks higher). Surplus is removed from the
/// lowest-ranked classes that were not rounded down; a deficit is filled from
/// the highest-ranked classes that were not rounded up. Every class keeps at
/// least one clip on each side.
pub fn allocate_test_counts(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let exact: Vec<f64> = counts.iter().map(|&n| fraction * n as f64).collect();
    let mut alloc: Vec<i64> = counts
        .iter()
        .zip(&exact)
        .map(|(&n, &e)| round_half_away(e).clamp(1, n as i64 - 1))
        .collect();
    let target = round_half_away(fraction * total as f64);
    let mut diff = target - alloc.iter().sum::<i64>();

    let rem = |c: usize| {
        let r = exact[c] - exact[c].floor();
        if r > 1.0 - 1e-9 {
            0.0
        } else {
            r
        }
    };
    // ascending rank: smallest remainder first, later index first on ties
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| rem(a).total_cmp(&rem(b)).then(b.cmp(&a)));

    for preferred in [true, false] {
        if diff < 0 {
            for &c in &order {
                if diff == 0 {
                    break;
                }
                let ok = alloc[c] > 1 && (!preferred || alloc[c] as f64 >= exact[c] - 1e-9);
                if ok {
                    alloc[c] -= 1;
                    diff += 1;
                }
            }
        } else if diff > 0 {
            for &c in order.iter().rev() {
                if diff == 0 {
                    break;
                }
                let ok = alloc[c] < counts[c] as i64 - 1 && (!preferred || alloc[c] as f64 <= exact[c] + 1e-9);
                if ok {
                    alloc[c] += 1;
                    diff -= 1;
                }
            }
        }
    }
    alloc.into_iter().map(|a| a as usize).collect()
}

/// Stratified train/test split. `labels[i]` is the class index of clip `i`.
pub fn stratified_split(labels: &[usize], classes: &[String], test_fraction: f64, seed: u64) -> Result<SplitPlan, DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::InvalidArgument(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let members = class_members(labels, classes.len());
    for (c, m) in members.iter().enumerate() {
        if m.len() < 2 {
            return Err(DatasetError::TooFewSamples {
                class: classes[c].clone(),
                count: m.len(),
                needed: 2,
            });
        }
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let n_test = allocate_test_counts(&counts, test_fraction);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut m) in members.into_iter().enumerate() {
        m.shuffle(&mut stream(seed, &[domain::SPLIT, c as u64]));
        test.extend_from_slice(&m[..n_test[c]]);
        train.extend_from_slice(&m[n_test[c]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        train_indices: train,
        test_indices: test,
        folds: Vec::new(),
        k: 0,
        seed,
    })
}

/// Fills `k` stratified validation folds over the train subset. Each class
/// contributes `⌊n_c/k⌋` clips per fold; its remainder clips go to folds
/// chosen round-robin with an offset carried across classes, so fold sizes
/// differ by at most one.
pub fn kfold(mut plan: SplitPlan, labels: &[usize], classes: &[String], k: usize, seed: u64) -> Result<SplitPlan, DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidArgument(format!("k = {k}, need at least 2")));
    }
    let mut members = vec![Vec::new(); classes.len()];
    for &i in &plan.train_indices {
        members[labels[i]].push(i);
    }
    if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| m.len() < k) {
        return Err(DatasetError::TooFewSamples {
            class: classes[c].clone(),
            count: m.len(),
            needed: k,
        });
    }
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for (c, mut m) in members.into_iter().enumerate() {
        m.shuffle(&mut stream(seed, &[domain::KFOLD, c as u64]));
        let base = m.len() / k;
        let extra = m.len() % k;
        let mut pos = 0;
        for f in 0..k {
            let size = base + usize::from((f + k - offset % k) % k < extra);
            folds[f].extend_from_slice(&m[pos..pos + size]);
            pos += size;
        }
        offset += extra;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    plan.folds = folds;
    plan.k = k;
    plan.seed = seed;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn labels_from_counts(counts: &[usize]) -> Vec<usize> {
        counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
    }

    #[test]
    fn two_per_class_half_split() {
        let labels = labels_from_counts(&[2, 2, 2]);
        let plan = stratified_split(&labels, &names(3), 0.5, 7).unwrap();
        assert_eq!(plan.test_indices.len(), 3);
        for c in 0..3 {
            assert_eq!(plan.test_indices.iter().filter(|&&i| labels[i] == c).count(), 1);
        }
    }

    #[test]
    fn singleton_class_rejected() {
        let labels = labels_from_counts(&[5, 1]);
        assert!(matches!(
            stratified_split(&labels, &names(2), 0.1, 1),
            Err(DatasetError::TooFewSamples { count: 1, .. })
        ));
        assert!(stratified_split(&labels_from_counts(&[5, 5]), &names(2), 1.0, 1).is_err());
    }

    #[test]
    fn deficit_goes_to_largest_remainders() {
        // 0.4 + 0.4 + 0.4 = 1.2 → one extra clip; class 0 wins the tie
        assert_eq!(allocate_test_counts(&[4, 4, 4], 0.1), [1, 1, 1]);
        assert_eq!(allocate_test_counts(&[14, 14, 14], 0.1), [2, 1, 1]);
    }

    #[test]
    fn kfold_toy_symmetry() {
        let labels = labels_from_counts(&[4, 4]);
        let plan = SplitPlan {
            train_indices: (0..8).collect(),
            test_indices: vec![],
            folds: vec![],
            k: 0,
            seed: 0,
        };
        let plan = kfold(plan, &labels, &names(2), 2, 3).unwrap();
        for f in &plan.folds {
            assert_eq!(f.iter().filter(|&&i| labels[i] == 0).count(), 2);
            assert_eq!(f.iter().filter(|&&i| labels[i] == 1).count(), 2);
        }
        assert_eq!(plan.fold_train(0), plan.folds[1]);
    }

    #[test]
    fn kfold_rejects_small_class() {
        let labels = labels_from_counts(&[10, 3]);
        let plan = stratified_split(&labels, &names(2), 0.2, 1).unwrap();
        assert!(kfold(plan.clone(), &labels, &names(2), 5, 1).is_err());
        assert!(kfold(plan, &labels, &names(2), 1, 1).is_err());
    }
}
