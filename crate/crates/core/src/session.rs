//! The closed-loop online session: for each incoming trial, optional
//! covariance alignment, prediction, label reveal and optional finetuning,
//! with streaming accuracy metrics.
//!
//! Labels reach the session only through [`TrialSource::reveal_label`],
//! which requires the prediction already committed for that trial.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cft::{CftConfig, Finetuner, ReplayWindow};
use crate::data::Subject;
use crate::models::{Model, Scope};
use crate::tensor::Tensor;
use crate::uda::{align_trial, regularized_covariance, CovReference, Metric, DEFAULT_BETA};
use crate::{Error, Result};

/// Default centered smoothing window for reported curves.
pub const SMOOTHING_WINDOW: usize = 20;

/// An ordered stream of trials whose labels are withheld until predicted.
pub trait TrialSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn trial(&mut self, index: usize) -> Result<&Tensor>;

    /// Label of trial `index`, released in exchange for the prediction
    /// made for it.
    fn reveal_label(&mut self, index: usize, prediction: usize) -> Result<usize>;
}

/// Streams one subject's trials in session order. Labels are released
/// strictly in order and only for trials whose data was already read.
#[derive(Debug)]
pub struct SubjectStream<'a> {
    subject: &'a Subject,
    read: usize,
    revealed: usize,
}

impl<'a> SubjectStream<'a> {
    pub fn new(subject: &'a Subject) -> Self {
        Self {
            subject,
            read: 0,
            revealed: 0,
        }
    }
}

impl TrialSource for SubjectStream<'_> {
    fn len(&self) -> usize {
        self.subject.trials.len()
    }

    fn trial(&mut self, index: usize) -> Result<&Tensor> {
        let t = self
            .subject
            .trials
            .get(index)
            .ok_or_else(|| Error::Protocol(format!("trial {index} is past the end of the stream")))?;
        self.read = self.read.max(index + 1);
        Ok(&t.data)
    }

    fn reveal_label(&mut self, index: usize, _prediction: usize) -> Result<usize> {
        if index != self.revealed || index >= self.read {
            return Err(Error::Protocol(format!(
                "label {index} requested out of order (next {}, read {})",
                self.revealed, self.read
            )));
        }
        self.revealed += 1;
        Ok(self.subject.trials[index].label)
    }
}

/// The named adaptation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    PreZs,
    CftOnly,
    PreUda,
    UdaCftOnly,
    PreCft,
    PreUdaCft,
    PreUdaCftDec,
    PreCovAlignCft,
    PreUdaRiemCft,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::PreZs,
        Preset::CftOnly,
        Preset::PreUda,
        Preset::UdaCftOnly,
        Preset::PreCft,
        Preset::PreUdaCft,
        Preset::PreUdaCftDec,
        Preset::PreCovAlignCft,
        Preset::PreUdaRiemCft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PreZs => "PRE-ZS",
            Preset::CftOnly => "CFT-only",
            Preset::PreUda => "PRE+UDA",
            Preset::UdaCftOnly => "UDA+CFT-only",
            Preset::PreCft => "PRE+CFT",
            Preset::PreUdaCft => "PRE+UDA+CFT",
            Preset::PreUdaCftDec => "PRE+UDA+CFT-Dec",
            Preset::PreCovAlignCft => "PRE+CovAlign+CFT",
            Preset::PreUdaRiemCft => "PRE+UDA-Riem+CFT",
        }
    }

    /// Whether the session starts from a pretrained checkpoint rather than
    /// a fresh random initialization.
    pub fn pretrained(self) -> bool {
        !matches!(self, Preset::CftOnly | Preset::UdaCftOnly)
    }

    /// Whether the checkpoint should come from subject-aligned pretraining,
    /// matching the covariance alignment applied during the session.
    pub fn aligned_pretraining(self) -> bool {
        self.pretrained() && self.config(CftConfig::default()).use_cov_align
    }

    pub fn config(self, cft: CftConfig) -> SessionConfig {
        let (use_cft, use_adabn, use_cov_align, metric, scope) = match self {
            Preset::PreZs => (false, false, false, Metric::Euclidean, Scope::Full),
            Preset::CftOnly | Preset::PreCft => (true, false, false, Metric::Euclidean, Scope::Full),
            Preset::PreUda => (false, true, true, Metric::Euclidean, Scope::Full),
            Preset::UdaCftOnly | Preset::PreUdaCft => (true, true, true, Metric::Euclidean, Scope::Full),
            Preset::PreUdaCftDec => (true, true, true, Metric::Euclidean, Scope::DecisionOnly),
            Preset::PreCovAlignCft => (true, false, true, Metric::Euclidean, Scope::Full),
            Preset::PreUdaRiemCft => (true, true, true, Metric::Riemannian, Scope::Full),
        };
        SessionConfig {
            use_cft,
            use_uda: use_adabn || use_cov_align,
            use_adabn,
            use_cov_align,
            metric,
            beta: DEFAULT_BETA,
            cft: CftConfig { scope, ..cft },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

impl Serialize for Preset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Preset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub use_cft: bool,
    pub use_uda: bool,
    pub use_adabn: bool,
    pub use_cov_align: bool,
    pub metric: Metric,
    pub beta: f64,
    pub cft: CftConfig,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_uda != (self.use_adabn || self.use_cov_align) {
            return Err(Error::Config(
                "use_uda must be set exactly when AdaBN or covariance alignment is enabled".into(),
            ));
        }
        if self.use_cft {
            self.cft.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionMetrics {
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub per_trial_correct: Vec<bool>,
    pub cumulative_accuracy: Vec<f64>,
    pub cumulative_balanced_accuracy: Vec<f64>,
    pub final_accuracy: f64,
    pub balanced_accuracy: f64,
    pub zero_shot_accuracy: Option<f64>,
    pub smoothed_curve: Vec<f64>,
    /// Optimizer steps taken by continual finetuning.
    pub finetune_steps: u64,
}

impl SessionMetrics {
    pub fn from_predictions(labels: Vec<usize>, predictions: Vec<usize>, n_classes: usize) -> Self {
        let per_trial_correct: Vec<bool> = labels.iter().zip(&predictions).map(|(l, p)| l == p).collect();
        let mut hits = 0usize;
        let cumulative_accuracy = per_trial_correct
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                hits += usize::from(c);
                hits as f64 / (i + 1) as f64
            })
            .collect::<Vec<_>>();
        let mut seen = vec![0usize; n_classes];
        let mut right = vec![0usize; n_classes];
        let cumulative_balanced_accuracy = labels
            .iter()
            .zip(&per_trial_correct)
            .map(|(&l, &c)| {
                if l < n_classes {
                    seen[l] += 1;
                    right[l] += usize::from(c);
                }
                balanced(&seen, &right)
            })
            .collect::<Vec<_>>();
        Self {
            final_accuracy: cumulative_accuracy.last().copied().unwrap_or(0.0),
            balanced_accuracy: cumulative_balanced_accuracy.last().copied().unwrap_or(0.0),
            smoothed_curve: smoothed_curve(&per_trial_correct, SMOOTHING_WINDOW),
            labels,
            predictions,
            per_trial_correct,
            cumulative_accuracy,
            cumulative_balanced_accuracy,
            zero_shot_accuracy: None,
            finetune_steps: 0,
        }
    }

    /// One CSV row per trial.
    pub fn write_csv<W: Write>(&self, subject_id: u32, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "subject_id",
            "trial_index",
            "label",
            "prediction",
            "correct",
            "cumulative_accuracy",
            "balanced_accuracy",
        ])?;
        for i in 0..self.labels.len() {
            w.write_record([
                subject_id.to_string(),
                (i + 1).to_string(),
                self.labels[i].to_string(),
                self.predictions[i].to_string(),
                u8::from(self.per_trial_correct[i]).to_string(),
                self.cumulative_accuracy[i].to_string(),
                self.cumulative_balanced_accuracy[i].to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Mean recall over the classes seen so far.
fn balanced(seen: &[usize], right: &[usize]) -> f64 {
    let recalls: Vec<f64> = seen
        .iter()
        .zip(right)
        .filter(|(s, _)| **s > 0)
        .map(|(s, r)| *r as f64 / *s as f64)
        .collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

/// Centered moving average over `window` samples (`(window - 1) / 2` on the
/// left), truncated at the boundaries.
pub fn smoothed_curve(correct: &[bool], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let left = (window - 1) / 2;
    let right = window - 1 - left;
    let mut prefix = Vec::with_capacity(correct.len() + 1);
    prefix.push(0usize);
    for &c in correct {
        prefix.push(prefix.last().unwrap() + usize::from(c));
    }
    (0..correct.len())
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right + 1).min(correct.len());
            (prefix[hi] - prefix[lo]) as f64 / (hi - lo) as f64
        })
        .collect()
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Output of the alignment stage for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Whitening transform after updating the reference with the trial.
    pub transform: DMatrix<f64>,
    pub aligned: Tensor,
}

/// Per-trial state of the online loop, split into the three timed stages.
#[derive(Debug, Clone)]
pub struct OnlineAdapter {
    config: SessionConfig,
    reference: Option<CovReference>,
    window: Option<ReplayWindow>,
    finetuner: Option<Finetuner>,
}

impl OnlineAdapter {
    pub fn new(model: &Model, config: SessionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            reference: config
                .use_cov_align
                .then(|| CovReference::new(config.beta, config.metric))
                .transpose()?,
            window: config
                .use_cft
                .then(|| ReplayWindow::new(config.cft.window_size, config.cft.stores_aligned)),
            finetuner: config.use_cft.then(|| Finetuner::new(model, config.cft)).transpose()?,
            config,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn window(&self) -> Option<&ReplayWindow> {
        self.window.as_ref()
    }

    pub fn finetune_steps(&self) -> u64 {
        self.finetuner.as_ref().map_or(0, Finetuner::steps)
    }

    /// UDA stage: updates the reference with the raw trial and aligns it.
    /// `None` when covariance alignment is off.
    pub fn uda_update(&mut self, raw: &Tensor) -> Result<Option<Alignment>> {
        let Some(reference) = &mut self.reference else {
            return Ok(None);
        };
        reference.update(&regularized_covariance(raw)?)?;
        let transform = reference.whitening()?;
        let aligned = align_trial(&transform, raw)?;
        Ok(Some(Alignment { transform, aligned }))
    }

    /// Prediction stage: class probabilities for the (aligned) input.
    pub fn predict(&self, model: &mut Model, input: &Tensor) -> Result<Vec<f64>> {
        model.predict_proba(input, self.config.use_adabn)
    }

    /// CFT stage: buffers the labeled trial and finetunes once past the
    /// warm-up. `trial_number` counts trials seen, including this one.
    /// Returns whether the model changed.
    pub fn cft_update(
        &mut self,
        model: &mut Model,
        raw: Tensor,
        alignment: Option<&Alignment>,
        label: usize,
        trial_number: usize,
    ) -> Result<bool> {
        let (Some(window), Some(finetuner)) = (&mut self.window, &mut self.finetuner) else {
            return Ok(false);
        };
        let (stored, transform) = match alignment {
            Some(a) if window.stores_aligned => (a.aligned.clone(), None),
            Some(a) => (raw, Some(&a.transform)),
            None => (raw, None),
        };
        window.push(stored, label)?;
        finetuner.maybe_finetune(model, window, trial_number, transform)
    }

    /// One full trial: align, predict, reveal the label, finetune.
    /// Returns `(label, prediction)`.
    pub fn step<S: TrialSource + ?Sized>(
        &mut self,
        model: &mut Model,
        source: &mut S,
        index: usize,
    ) -> Result<(usize, usize)> {
        let raw = source.trial(index)?.clone();
        let alignment = self.uda_update(&raw)?;
        let input = alignment.as_ref().map_or(&raw, |a| &a.aligned);
        let prediction = argmax(&self.predict(model, input)?);
        let label = source.reveal_label(index, prediction)?;
        self.cft_update(model, raw, alignment.as_ref(), label, index + 1)?;
        Ok((label, prediction))
    }
}

/// Runs the online loop over every trial of `source`, mutating `model` as
/// continual finetuning dictates.
pub fn run_session<S: TrialSource + ?Sized>(
    model: &mut Model,
    source: &mut S,
    config: &SessionConfig,
) -> Result<SessionMetrics> {
    if source.is_empty() {
        return Err(Error::TooFew {
            what: "trials in the stream",
            needed: 1,
            got: 0,
        });
    }
    let mut adapter = OnlineAdapter::new(model, *config)?;
    let mut labels = Vec::with_capacity(source.len());
    let mut predictions = Vec::with_capacity(source.len());
    for index in 0..source.len() {
        let (label, prediction) = adapter.step(model, source, index).map_err(|e| e.at_trial(index))?;
        labels.push(label);
        predictions.push(prediction);
    }
    let mut metrics = SessionMetrics::from_predictions(labels, predictions, model.config().n_classes);
    metrics.finetune_steps = adapter.finetune_steps();
    Ok(metrics)
}

/// Accuracy of the frozen model over every trial, with no adaptation.
pub fn zero_shot_eval(model: &mut Model, subject: &Subject) -> Result<f64> {
    if subject.trials.is_empty() {
        return Err(Error::TooFew {
            what: "trials in the stream",
            needed: 1,
            got: 0,
        });
    }
    let mut hits = 0usize;
    for (i, t) in subject.trials.iter().enumerate() {
        let p = model.predict_proba(&t.data, false).map_err(|e| e.at_trial(i))?;
        hits += usize::from(argmax(&p) == t.label);
    }
    Ok(hits as f64 / subject.trials.len() as f64)
}
