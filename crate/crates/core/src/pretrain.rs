//! Population pretraining with subject-wise folds and optional per-subject
//! alignment of the training data.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{PopulationDataset, Subject, Trial};
use crate::models::{Model, ModelConfig, Scope};
use crate::seed::{rng_for, tag};
use crate::uda::{align_trial, mean_covariance, whitening_transform, DEFAULT_EIG_FLOOR};
use crate::{Error, Result};

/// Subject-to-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<u32, usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Subjects held out in `fold`, in ascending id order.
    pub fn test_subjects(&self, fold: usize) -> Vec<u32> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Subjects used for training when `fold` is held out.
    pub fn train_subjects(&self, fold: usize) -> Vec<u32> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// Shuffles the subjects and deals them round-robin into `k` folds.
pub fn make_subject_folds(subject_ids: &[u32], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > subject_ids.len() {
        return Err(Error::TooFew {
            what: "subjects for the requested folds",
            needed: k,
            got: subject_ids.len(),
        });
    }
    let mut ids = subject_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != subject_ids.len() {
        return Err(Error::Config("duplicate subject ids".into()));
    }
    ids.shuffle(&mut rng_for(&[seed, tag("folds")]));
    let assignments = ids.iter().enumerate().map(|(pos, &id)| (id, pos % k)).collect();
    Ok(FoldPlan { k, assignments, seed })
}

/// Whitens one subject's trials with the inverse square root of their mean
/// covariance.
pub fn align_subject_block(trials: &[Trial]) -> Result<Vec<Trial>> {
    if trials.len() < 2 {
        return Err(Error::TooFew {
            what: "trials to align a subject",
            needed: 2,
            got: trials.len(),
        });
    }
    let mean = mean_covariance(trials.iter().map(|t| &t.data))?;
    let m = whitening_transform(&mean, DEFAULT_EIG_FLOOR)?;
    trials
        .iter()
        .map(|t| {
            Ok(Trial {
                data: align_trial(&m, &t.data)?,
                label: t.label,
            })
        })
        .collect()
}

/// Aligns every subject of a dataset independently.
pub fn align_population(data: &PopulationDataset) -> Result<PopulationDataset> {
    let subjects = data
        .subjects
        .iter()
        .map(|s| {
            Ok(Subject {
                id: s.id,
                trials: align_subject_block(&s.trials)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PopulationDataset {
        subjects,
        ..data.empty_like()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Align each training subject with its own mean covariance first.
    pub align: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-4,
            align: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: Model,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a freshly initialized model on the pooled trials of `train`.
/// Shuffling and dropout are seeded from `config.seed`.
pub fn pretrain_model(config: ModelConfig, train: &PopulationDataset, pcfg: &PretrainConfig) -> Result<Pretrained> {
    if pcfg.batch_size == 0 || pcfg.epochs == 0 {
        return Err(Error::Config(
            "pretraining epochs and batch size must be positive".into(),
        ));
    }
    if (train.n_channels, train.n_timepoints) != (config.n_channels, config.n_timepoints)
        || train.n_classes != config.n_classes
    {
        return Err(Error::Config(format!(
            "dataset dims (C={}, T={}, K={}) do not match the model (C={}, T={}, K={})",
            train.n_channels,
            train.n_timepoints,
            train.n_classes,
            config.n_channels,
            config.n_timepoints,
            config.n_classes
        )));
    }
    let aligned;
    let data = if pcfg.align {
        aligned = align_population(train)?;
        &aligned
    } else {
        train
    };
    let pool: Vec<&Trial> = data.subjects.iter().flat_map(|s| &s.trials).collect();
    if pool.is_empty() {
        return Err(Error::TooFew {
            what: "training trials",
            needed: 1,
            got: 0,
        });
    }
    let mut model = Model::build(config)?;
    let mut opt = model.new_optimizer(pcfg.lr);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut epoch_losses = Vec::with_capacity(pcfg.epochs);
    for epoch in 0..pcfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(&[config.seed, tag("epoch"), epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(pcfg.batch_size) {
            let trials: Vec<_> = batch.iter().map(|&i| &pool[i].data).collect();
            let labels: Vec<_> = batch.iter().map(|&i| pool[i].label).collect();
            total += model.train_batch(&mut opt, &trials, &labels, Scope::Full)? * batch.len() as f64;
        }
        epoch_losses.push(total / pool.len() as f64);
    }
    Ok(Pretrained { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_sizes_and_determinism() {
        let ids: Vec<u32> = (0..9).collect();
        let plan = make_subject_folds(&ids, 2, 3).unwrap();
        let mut sizes = [plan.test_subjects(0).len(), plan.test_subjects(1).len()];
        sizes.sort();
        assert_eq!(sizes, [4, 5]);
        assert_eq!(plan, make_subject_folds(&ids, 2, 3).unwrap());
        let even = make_subject_folds(&(0..10).collect::<Vec<_>>(), 2, 3).unwrap();
        assert_eq!(even.test_subjects(0).len(), 5);
        for f in 0..2 {
            let test = plan.test_subjects(f);
            assert!(plan.train_subjects(f).iter().all(|id| !test.contains(id)));
        }
    }

    #[test]
    fn fold_errors() {
        assert!(matches!(make_subject_folds(&[1, 2], 3, 0), Err(Error::TooFew { .. })));
        assert!(make_subject_folds(&[1, 2, 3], 1, 0).is_err());
        assert!(make_subject_folds(&[1, 1, 3], 2, 0).is_err());
    }
}
