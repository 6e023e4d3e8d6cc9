use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cohort::{Label, PatientRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Train,
    Val,
    Test,
}

/// Patient-level fold assignment. For fold `f` the test set is fold `f`,
/// validation is fold `(f + 1) mod k`, and training is everything else.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: BTreeMap<String, usize>,
}

/// Stratified round-robin: each class is shuffled, resistant patients are
/// dealt first, and one running counter assigns `fold = position mod k`.
pub fn make_split(records: &[PatientRecord], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let mut pos = 0;
    for label in [Label::Resistant, Label::Sensitive] {
        let mut ids: Vec<&str> = records
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.patient_id.as_str())
            .collect();
        if ids.len() < k {
            return Err(Error::Config(format!(
                "{k} folds need at least {k} {} patients, found {}",
                label.as_str(),
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids {
            if folds.insert(id.to_string(), pos % k).is_some() {
                return Err(Error::Data(format!("duplicate patient id {id}")));
            }
            pos += 1;
        }
    }
    Ok(SplitPlan { k, seed, folds })
}

impl SplitPlan {
    pub fn subset_of(&self, fold: usize, patient_fold: usize) -> Subset {
        if patient_fold == fold {
            Subset::Test
        } else if patient_fold == (fold + 1) % self.k {
            Subset::Val
        } else {
            Subset::Train
        }
    }

    pub fn ids(&self, fold: usize, subset: Subset) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| self.subset_of(fold, f) == subset)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }
}
