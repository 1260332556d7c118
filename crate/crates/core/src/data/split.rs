use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use crate::error::{Error, Result};

/// Reference ids per partition. `val` is empty for k-fold plans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn fold_count(&self) -> usize {
        self.folds.len()
    }

    /// The manifest entries of one partition of one fold.
    pub fn select(&self, manifest: &Manifest, fold: usize, part: Part) -> Result<Manifest> {
        let f = self
            .folds
            .get(fold)
            .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} out of range")))?;
        let refs = match part {
            Part::Train => &f.train,
            Part::Val => &f.val,
            Part::Test => &f.test,
        };
        Ok(manifest.filter_refs(refs))
    }

    /// True when no reference appears in two partitions of the same fold.
    pub fn is_content_disjoint(&self) -> bool {
        self.folds.iter().all(|f| {
            let mut all: Vec<&String> = f.train.iter().chain(&f.val).chain(&f.test).collect();
            let n = all.len();
            all.sort();
            all.dedup();
            all.len() == n
        })
    }
}

fn shuffled_refs(manifest: &Manifest, seed: u64) -> Vec<String> {
    let mut refs = manifest.reference_ids();
    refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    refs
}

/// K-fold plan over reference contents. `ratio` is `(train, test)` in any
/// units (counts like 7:2 or proportions like 4:1); the test share is rounded
/// to whole references. References are shuffled once and fold `f` takes the
/// `n_test` references starting at offset `f·n_test`, wrapping around, so
/// each reference is tested at most `ceil(folds·n_test / n)` times.
pub fn split_kfold(
    manifest: &Manifest,
    folds: usize,
    ratio: (usize, usize),
    seed: u64,
) -> Result<SplitPlan> {
    let refs = shuffled_refs(manifest, seed);
    let n = refs.len();
    let (tr, te) = ratio;
    if folds == 0 || te == 0 || tr == 0 {
        return Err(Error::InfeasibleSplit(format!(
            "folds {folds} and ratio {tr}:{te} must be positive"
        )));
    }
    let n_test = ((n * te) as f64 / (tr + te) as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::InfeasibleSplit(format!(
            "ratio {tr}:{te} over {n} references leaves an empty partition"
        )));
    }
    let folds = (0..folds)
        .map(|f| {
            let test: Vec<String> = (0..n_test)
                .map(|j| refs[(f * n_test + j) % n].clone())
                .collect();
            let train = refs.iter().filter(|r| !test.contains(r)).cloned().collect();
            Fold {
                train,
                val: Vec::new(),
                test,
            }
        })
        .collect();
    Ok(SplitPlan { seed, folds })
}

/// Single train/val/test plan at `ratio` (e.g. 8:1:1). Validation and test
/// each receive at least one reference.
pub fn split_holdout(
    manifest: &Manifest,
    ratio: (usize, usize, usize),
    seed: u64,
) -> Result<SplitPlan> {
    let refs = shuffled_refs(manifest, seed);
    let n = refs.len();
    let total = ratio.0 + ratio.1 + ratio.2;
    if ratio.0 == 0 || ratio.1 == 0 || ratio.2 == 0 {
        return Err(Error::InfeasibleSplit("holdout ratio parts must be positive".into()));
    }
    let share = |p: usize| (((n * p) as f64 / total as f64).round() as usize).max(1);
    let n_val = share(ratio.1);
    let n_test = share(ratio.2);
    if n_val + n_test >= n {
        return Err(Error::InfeasibleSplit(format!(
            "{n} references cannot fill a {}:{}:{} split",
            ratio.0, ratio.1, ratio.2
        )));
    }
    let test = refs[..n_test].to_vec();
    let val = refs[n_test..n_test + n_val].to_vec();
    let train = refs[n_test + n_val..].to_vec();
    Ok(SplitPlan {
        seed,
        folds: vec![Fold { train, val, test }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestEntry;

    fn manifest(n_refs: usize) -> Manifest {
        let entries = (0..n_refs)
            .flat_map(|r| {
                (0..3).map(move |k| ManifestEntry {
                    sample_id: format!("r{r}_d{k}"),
                    distorted_path: "x.ply".into(),
                    reference_path: None,
                    reference_id: format!("r{r}"),
                    mos: Some(k as f64),
                    distortion_type: "geom-noise".into(),
                    level: k + 1,
                })
            })
            .collect();
        Manifest::new(entries).unwrap()
    }

    #[test]
    fn sjtu_shape() {
        let m = manifest(9);
        let plan = split_kfold(&m, 5, (7, 2), 3).unwrap();
        assert_eq!(plan.fold_count(), 5);
        for f in &plan.folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.train.len(), 7);
        }
        assert!(plan.is_content_disjoint());
        assert_eq!(plan, split_kfold(&m, 5, (7, 2), 3).unwrap());
        let test = plan.select(&m, 0, Part::Test).unwrap();
        assert_eq!(test.len(), 6);
    }

    #[test]
    fn infeasible_ratios() {
        let m = manifest(2);
        assert!(split_kfold(&m, 5, (7, 2), 0).is_err());
        assert!(split_holdout(&m, (8, 1, 1), 0).is_err());
        assert!(split_kfold(&manifest(5), 0, (4, 1), 0).is_err());
    }

    #[test]
    fn holdout_ten() {
        let plan = split_holdout(&manifest(10), (8, 1, 1), 1).unwrap();
        let f = &plan.folds[0];
        assert_eq!((f.train.len(), f.val.len(), f.test.len()), (8, 1, 1));
        assert!(plan.is_content_disjoint());
    }
}
