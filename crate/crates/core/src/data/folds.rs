//! Stratified 3-fold assignment plus the per-split validation subset
//! (15% of the active training samples).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive, rng_from};

pub const N_FOLDS: usize = 3;
pub const VALIDATION_FRACTION: f64 = 0.15;

/// Fold assignment of every sample id, with one validation subset per
/// choice of test fold. A pure function of `(seed, dataset)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
    /// `validation[f]` is drawn from the training ids of the split whose
    /// test fold is `f`.
    pub validation: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold plan serializes")
    }

    pub fn from_json(s: &str) -> Result<FoldPlan> {
        serde_json::from_str(s).map_err(|e| Error::Load(format!("fold plan: {e}")))
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|x| x == id))
    }

    /// Resolve the split for `test_fold` into dataset indices:
    /// `(train, validation, test)`. Validation ids are excluded from train.
    pub fn split(&self, dataset: &Dataset, test_fold: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        if test_fold >= N_FOLDS {
            return Err(Error::Index(format!("test fold {test_fold} out of range")));
        }
        let index_of: std::collections::HashMap<&str, usize> = dataset
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let resolve = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    index_of
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Load(format!("fold plan references unknown id {id}")))
                })
                .collect()
        };
        let test = resolve(&self.folds[test_fold])?;
        let val = resolve(&self.validation[test_fold])?;
        let val_set: std::collections::HashSet<usize> = val.iter().copied().collect();
        let mut train = Vec::new();
        for (f, fold) in self.folds.iter().enumerate() {
            if f == test_fold {
                continue;
            }
            for idx in resolve(fold)? {
                if !val_set.contains(&idx) {
                    train.push(idx);
                }
            }
        }
        Ok((train, val, test))
    }
}

/// Stratified fold assignment: per class the (sorted) ids are shuffled and
/// dealt round-robin, so every fold receives `floor(n/3)` or `ceil(n/3)`
/// samples of every class regardless of input file ordering.
pub fn make_folds(dataset: &Dataset, seed: u64) -> Result<FoldPlan> {
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); dataset.classes.len()];
    for s in &dataset.samples {
        by_class[s.label].push(&s.id);
    }
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); N_FOLDS];
    for (class_idx, ids) in by_class.iter_mut().enumerate() {
        if ids.len() < N_FOLDS {
            return Err(Error::Stratification(format!(
                "class {} has {} samples, need at least {N_FOLDS}",
                dataset.classes[class_idx],
                ids.len()
            )));
        }
        ids.sort_unstable();
        let mut rng = rng_from(derive(seed, class_idx as u64));
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            // Rotating by class balances total fold sizes.
            folds[(i + class_idx) % N_FOLDS].push((*id).to_string());
        }
    }

    let mut validation = Vec::with_capacity(N_FOLDS);
    for test_fold in 0..N_FOLDS {
        let mut train_ids: Vec<String> = folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != test_fold)
            .flat_map(|(_, fold)| fold.iter().cloned())
            .collect();
        train_ids.sort_unstable();
        let mut rng = rng_from(derive(seed, 0x0f0f_0000 + test_fold as u64));
        train_ids.shuffle(&mut rng);
        let n_val = (train_ids.len() as f64 * VALIDATION_FRACTION).floor() as usize;
        let mut val: Vec<String> = train_ids.into_iter().take(n_val).collect();
        val.sort_unstable();
        validation.push(val);
    }

    Ok(FoldPlan {
        seed,
        folds,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Raster, SketchSample};

    fn toy_dataset(n_classes: usize, per_class: usize) -> Dataset {
        let mut samples = Vec::new();
        let classes: Vec<String> = (0..n_classes).map(|c| format!("c{c}")).collect();
        for c in 0..n_classes {
            for i in 0..per_class {
                samples.push(SketchSample {
                    raster: Raster::filled(8, 1.0),
                    label: c,
                    id: format!("c{c}/{i:04}"),
                });
            }
        }
        Dataset {
            samples,
            classes,
            skipped: 0,
        }
    }

    #[test]
    fn folds_partition_the_dataset() {
        let ds = toy_dataset(5, 10);
        let plan = make_folds(&ds, 7).unwrap();
        let mut all: Vec<String> = plan.folds.iter().flatten().cloned().collect();
        all.sort();
        let mut expect: Vec<String> = ds.samples.iter().map(|s| s.id.clone()).collect();
        expect.sort();
        assert_eq!(all, expect);
        // Pairwise disjoint by construction: the union has no duplicates.
        all.dedup();
        assert_eq!(all.len(), ds.len());
    }

    #[test]
    fn stratification_is_balanced_per_class() {
        let ds = toy_dataset(250, 80);
        let plan = make_folds(&ds, 3).unwrap();
        for fold in &plan.folds {
            let mut per_class = vec![0usize; 250];
            for id in fold {
                let c: usize = id[1..id.find('/').unwrap()].parse().unwrap();
                per_class[c] += 1;
            }
            for &n in &per_class {
                assert!(n == 26 || n == 27, "per-class fold share {n}");
            }
        }
    }

    #[test]
    fn same_seed_reproduces_the_plan() {
        let ds = toy_dataset(4, 9);
        assert_eq!(make_folds(&ds, 11).unwrap(), make_folds(&ds, 11).unwrap());
    }

    #[test]
    fn plan_is_invariant_to_input_ordering() {
        let ds = toy_dataset(4, 9);
        let mut shuffled = ds.clone();
        shuffled.samples.reverse();
        assert_eq!(make_folds(&ds, 5).unwrap(), make_folds(&shuffled, 5).unwrap());
    }

    #[test]
    fn undersized_class_is_a_stratification_error() {
        let ds = toy_dataset(2, 2);
        assert!(matches!(make_folds(&ds, 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn validation_is_a_subset_of_training() {
        let ds = toy_dataset(6, 12);
        let plan = make_folds(&ds, 13).unwrap();
        for test_fold in 0..N_FOLDS {
            let test_set: std::collections::HashSet<&String> = plan.folds[test_fold].iter().collect();
            for id in &plan.validation[test_fold] {
                assert!(!test_set.contains(id));
            }
            let (train, val, test) = plan.split(&ds, test_fold).unwrap();
            assert_eq!(train.len() + val.len() + test.len(), ds.len());
        }
    }

    #[test]
    fn plan_round_trips_through_json() {
        let ds = toy_dataset(3, 6);
        let plan = make_folds(&ds, 17).unwrap();
        assert_eq!(FoldPlan::from_json(&plan.to_json()).unwrap(), plan);
    }
}
