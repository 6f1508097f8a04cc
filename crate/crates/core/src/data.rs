//! Epoch-level dataset types shared by the generator, the container format
//! and the training code.

use crate::tensor::Tensor;

/// One `(channels, timepoints)` epoch and its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub data: Tensor,
    pub label: usize,
}

/// All trials of one subject, in session order.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: u32,
    pub trials: Vec<Trial>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationDataset {
    pub subjects: Vec<Subject>,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub n_classes: usize,
    pub sampling_rate: f32,
}

impl PopulationDataset {
    pub fn subject(&self, id: u32) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.subjects.iter().map(|s| s.id).collect()
    }

    pub fn n_trials(&self) -> usize {
        self.subjects.iter().map(|s| s.trials.len()).sum()
    }

    /// Copy restricted to the given subjects (in the order given).
    pub fn select(&self, ids: &[u32]) -> PopulationDataset {
        PopulationDataset {
            subjects: ids.iter().filter_map(|&id| self.subject(id).cloned()).collect(),
            ..self.empty_like()
        }
    }

    /// Copy keeping at most `n` trials per subject (the earliest ones).
    pub fn truncate_trials(&self, n: usize) -> PopulationDataset {
        PopulationDataset {
            subjects: self
                .subjects
                .iter()
                .map(|s| Subject {
                    id: s.id,
                    trials: s.trials.iter().take(n).cloned().collect(),
                })
                .collect(),
            ..self.empty_like()
        }
    }

    pub fn empty_like(&self) -> PopulationDataset {
        PopulationDataset {
            subjects: Vec::new(),
            n_channels: self.n_channels,
            n_timepoints: self.n_timepoints,
            n_classes: self.n_classes,
            sampling_rate: self.sampling_rate,
        }
    }
}
