//! Supervised continual finetuning: a bounded replay window of labeled
//! trials and the per-trial finetune step gated by a warm-up period.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::models::{Model, Scope};
use crate::tensor::{Adam, Tensor};
use crate::uda::align_trial;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CftConfig {
    pub warmup_trials: usize,
    pub epochs_per_trial: usize,
    pub batch_size: usize,
    pub window_size: usize,
    pub lr: f64,
    pub scope: Scope,
    /// Buffer trials after alignment instead of re-aligning raw trials with
    /// the current whitening transform at finetune time.
    pub stores_aligned: bool,
}

impl Default for CftConfig {
    fn default() -> Self {
        Self {
            warmup_trials: 20,
            epochs_per_trial: 3,
            batch_size: 50,
            window_size: 50,
            lr: 1e-4,
            scope: Scope::Full,
            stores_aligned: false,
        }
    }
}

impl CftConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs_per_trial", self.epochs_per_trial),
            ("batch_size", self.batch_size),
            ("window_size", self.window_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("cft.{name} must be positive")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "cft.lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// FIFO of the most recent labeled trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayWindow {
    capacity: usize,
    entries: VecDeque<(Tensor, usize)>,
    pub stores_aligned: bool,
}

impl ReplayWindow {
    pub fn new(capacity: usize, stores_aligned: bool) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
            stores_aligned,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a trial, evicting the oldest entry when full.
    pub fn push(&mut self, trial: Tensor, label: usize) -> Result<()> {
        if let Some((first, _)) = self.entries.front() {
            if first.shape() != trial.shape() {
                return Err(Error::Shape {
                    expected: first.shape().to_vec(),
                    got: trial.shape().to_vec(),
                });
            }
        }
        self.entries.push_back((trial, label));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.entries.iter().map(|(t, l)| (t, *l))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, l)| *l).collect()
    }

    /// The most recent `n` entries, oldest first.
    fn recent(&self, n: usize) -> impl Iterator<Item = &(Tensor, usize)> {
        self.entries.iter().skip(self.entries.len().saturating_sub(n))
    }
}

/// Finetuning state carried across trials: the optimizer persists for the
/// whole session.
#[derive(Debug, Clone)]
pub struct Finetuner {
    pub config: CftConfig,
    optimizer: Adam,
    steps: u64,
}

impl Finetuner {
    pub fn new(model: &Model, config: CftConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            optimizer: model.new_optimizer(config.lr),
            steps: 0,
        })
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Runs the per-trial finetune step once the warm-up is over.
    ///
    /// `trial_index` counts trials seen so far, including the current one.
    /// When `transform` is given it is applied to every buffered trial
    /// before training. Returns whether the model was updated.
    pub fn maybe_finetune(
        &mut self,
        model: &mut Model,
        window: &ReplayWindow,
        trial_index: usize,
        transform: Option<&DMatrix<f64>>,
    ) -> Result<bool> {
        if trial_index <= self.config.warmup_trials {
            return Ok(false);
        }
        if window.is_empty() {
            return Err(Error::EmptyWindow(trial_index));
        }
        let n = window.len().min(self.config.batch_size);
        let aligned: Vec<Tensor>;
        let trials: Vec<&Tensor> = match transform {
            Some(m) => {
                aligned = window
                    .recent(n)
                    .map(|(t, _)| align_trial(m, t))
                    .collect::<Result<_>>()?;
                aligned.iter().collect()
            }
            None => window.recent(n).map(|(t, _)| t).collect(),
        };
        let labels: Vec<usize> = window.recent(n).map(|(_, l)| *l).collect();
        for _ in 0..self.config.epochs_per_trial {
            model.train_batch(&mut self.optimizer, &trials, &labels, self.config.scope)?;
            self.steps += 1;
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(v: f32) -> Tensor {
        Tensor::full(&[2, 3], v)
    }

    #[test]
    fn window_is_fifo() {
        let mut w = ReplayWindow::new(50, false);
        w.push(trial(0.0), 0).unwrap();
        assert_eq!(w.len(), 1);
        for i in 1..51 {
            w.push(trial(i as f32), i % 2).unwrap();
        }
        assert_eq!(w.len(), 50);
        assert!(w.iter().all(|(t, _)| t.data()[0] != 0.0));
        assert_eq!(w.iter().next().unwrap().0.data()[0], 1.0);
        assert_eq!(w.labels(), (1..51).map(|i| i % 2).collect::<Vec<_>>());
    }

    #[test]
    fn window_rejects_shape_change() {
        let mut w = ReplayWindow::new(4, false);
        w.push(trial(1.0), 0).unwrap();
        assert!(matches!(w.push(Tensor::zeros(&[3, 3]), 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn recent_takes_the_tail() {
        let mut w = ReplayWindow::new(10, false);
        for i in 0..6 {
            w.push(trial(i as f32), 0).unwrap();
        }
        let tail: Vec<f32> = w.recent(2).map(|(t, _)| t.data()[0]).collect();
        assert_eq!(tail, vec![4.0, 5.0]);
    }

    #[test]
    fn config_validation() {
        assert!(CftConfig::default().validate().is_ok());
        let bad = CftConfig {
            epochs_per_trial: 0,
            ..CftConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
