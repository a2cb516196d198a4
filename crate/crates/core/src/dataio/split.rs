use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sleepssl_nn::Tensor;

use super::record::{class_counts, Stage, SubjectRecord, N_STAGES};
use crate::error::{Result, SslError};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Test subjects of each fold.
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    /// Shuffles `subjects` with `seed` and deals them round-robin into `k`
    /// test sets.
    pub fn new(subjects: &[String], k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(SslError::FoldPlan(format!("k = {k} must be at least 2")));
        }
        if k > subjects.len() {
            return Err(SslError::FoldPlan(format!("k = {k} exceeds {} subjects", subjects.len())));
        }
        let unique: HashSet<&String> = subjects.iter().collect();
        if unique.len() != subjects.len() {
            return Err(SslError::FoldPlan("duplicate subject ids".into()));
        }
        let mut order = subjects.to_vec();
        order.shuffle(&mut seed::rng(seed, &[seed::tag("folds")]));
        let mut folds = vec![Vec::new(); k];
        for (i, s) in order.into_iter().enumerate() {
            folds[i % k].push(s);
        }
        Ok(FoldPlan { k, seed, folds })
    }

    pub fn test_subjects(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// All subjects not held out in `fold`, in fold-plan order.
    pub fn train_subjects(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

pub fn make_fold_plan(manifest: &super::DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    FoldPlan::new(&manifest.subject_ids(), k, seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpochRef {
    pub subject_id: String,
    pub index: usize,
}

/// Epochs pooled from one or more subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub epoch_len: usize,
    /// Row-major `[len, epoch_len]`.
    pub samples: Vec<f32>,
    pub labels: Vec<Stage>,
    pub origin: Vec<EpochRef>,
}

impl EpochSet {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SubjectRecord>) -> Result<Self> {
        let mut set: Option<EpochSet> = None;
        for r in records {
            let s = set.get_or_insert_with(|| EpochSet {
                epoch_len: r.epoch_len,
                samples: Vec::new(),
                labels: Vec::new(),
                origin: Vec::new(),
            });
            if s.epoch_len != r.epoch_len {
                return Err(SslError::InvalidArgument(format!(
                    "subject {} has epoch_len {}, expected {}",
                    r.subject_id, r.epoch_len, s.epoch_len
                )));
            }
            s.samples.extend_from_slice(&r.epochs);
            s.labels.extend_from_slice(&r.labels);
            s.origin
                .extend((0..r.n_epochs()).map(|index| EpochRef { subject_id: r.subject_id.clone(), index }));
        }
        set.ok_or_else(|| SslError::InvalidArgument("no subjects given".into()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn epoch(&self, i: usize) -> &[f32] {
        &self.samples[i * self.epoch_len..(i + 1) * self.epoch_len]
    }

    pub fn class_counts(&self) -> [usize; N_STAGES] {
        class_counts(&self.labels)
    }

    /// Rows at `indices` (duplicates allowed), in that order.
    pub fn subset(&self, indices: &[usize]) -> EpochSet {
        let mut samples = Vec::with_capacity(indices.len() * self.epoch_len);
        for &i in indices {
            samples.extend_from_slice(self.epoch(i));
        }
        EpochSet {
            epoch_len: self.epoch_len,
            samples,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            origin: indices.iter().map(|&i| self.origin[i].clone()).collect(),
        }
    }

    /// `[indices.len(), epoch_len]` tensor of the selected rows.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.epoch_len);
        for &i in indices {
            data.extend_from_slice(self.epoch(i));
        }
        Tensor::from_vec(data, &[indices.len(), self.epoch_len]).expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i].index()).collect()
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for o in &self.origin {
            if !seen.contains(&o.subject_id) {
                seen.push(o.subject_id.clone());
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBudget {
    pub fraction: f64,
    pub seed: u64,
    /// Positions in the pooled train set, ascending.
    pub indices: Vec<usize>,
    pub selected: Vec<EpochRef>,
}

/// Number of epochs drawn from a class of size `n` (at least one when the
/// class is present).
pub fn per_class_quota(n: usize, fraction: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n)
    }
}

/// Stratified sampling without replacement. Each class is shuffled with a
/// stream that depends only on `(seed, class)` and a prefix is taken, so
/// budgets with the same seed are nested across fractions.
pub fn select_label_fraction(set: &EpochSet, fraction: f64, seed: u64) -> Result<LabelBudget> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SslError::InvalidArgument(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut indices = Vec::new();
    for stage in Stage::ALL {
        let mut members: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == stage).collect();
        let quota = per_class_quota(members.len(), fraction);
        members.shuffle(&mut seed::rng(seed, &[seed::tag("label-budget"), stage.index() as u64]));
        indices.extend_from_slice(&members[..quota]);
    }
    indices.sort_unstable();
    Ok(LabelBudget {
        fraction,
        seed,
        selected: indices.iter().map(|&i| set.origin[i].clone()).collect(),
        indices,
    })
}

/// Indices of `labels` resampled so every class matches the majority count:
/// all originals first, then seeded draws with replacement for the minority
/// classes.
pub fn oversample_indices(labels: &[Stage], seed: u64) -> Result<Vec<usize>> {
    let counts = class_counts(labels);
    if let Some(empty) = Stage::ALL.into_iter().find(|s| counts[s.index()] == 0) {
        return Err(SslError::EmptyClass(empty.name()));
    }
    let target = *counts.iter().max().expect("five classes");
    let mut rng = seed::rng(seed, &[seed::tag("oversample")]);
    let mut out: Vec<usize> = (0..labels.len()).collect();
    for stage in Stage::ALL {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == stage).collect();
        for _ in members.len()..target {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    Ok(out)
}

pub fn oversample_balanced(set: &EpochSet, seed: u64) -> Result<EpochSet> {
    Ok(set.subset(&oversample_indices(&set.labels, seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    fn labelled(counts: [usize; 5]) -> EpochSet {
        let labels: Vec<Stage> = Stage::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&s, n)| std::iter::repeat_n(s, n))
            .collect();
        EpochSet {
            epoch_len: 1,
            samples: (0..labels.len()).map(|i| i as f32).collect(),
            origin: (0..labels.len()).map(|index| EpochRef { subject_id: "a".into(), index }).collect(),
            labels,
        }
    }

    #[test]
    fn fold_plan_deals_evenly() {
        for (n, per) in [(20, 4), (10, 2)] {
            let p = FoldPlan::new(&ids(n), 5, 3).unwrap();
            assert!(p.folds.iter().all(|f| f.len() == per));
            let mut all: Vec<String> = p.folds.concat();
            all.sort();
            assert_eq!(all, ids(n));
            assert_eq!(p, FoldPlan::new(&ids(n), 5, 3).unwrap());
        }
        assert!(FoldPlan::new(&ids(4), 5, 0).is_err());
        assert!(FoldPlan::new(&ids(4), 1, 0).is_err());
    }

    #[test]
    fn balanced_one_percent() {
        let b = select_label_fraction(&labelled([200; 5]), 0.01, 1).unwrap();
        assert_eq!(b.indices.len(), 10);
        let full = select_label_fraction(&labelled([3, 1, 4, 1, 5]), 1.0, 1).unwrap();
        assert_eq!(full.indices, (0..14).collect::<Vec<_>>());
        assert!(select_label_fraction(&labelled([3; 5]), 0.0, 1).is_err());
        assert!(select_label_fraction(&labelled([3; 5]), 1.5, 1).is_err());
    }

    #[test]
    fn oversampling_levels_counts() {
        let set = labelled([100, 20, 50, 1, 100]);
        let idx = oversample_indices(&set.labels, 4).unwrap();
        let out = set.subset(&idx);
        assert_eq!(out.class_counts(), [100; 5]);
        assert_eq!(&idx[..set.len()], (0..set.len()).collect::<Vec<_>>().as_slice());
        assert_eq!(idx, oversample_indices(&set.labels, 4).unwrap());
        assert!(oversample_indices(&labelled([1, 0, 1, 1, 1]).labels, 0).is_err());
    }
}
