//! Synthetic multi-subject EEG with controllable subject variability and
//! within-session drift.
//!
//! A trial is `A_s · R(t) · (template + noise)`: class-conditional source
//! activity plus channel-correlated pink noise, pushed through a per-subject
//! mixing matrix `A_s` and a slowly rotating drift `R(t) = exp(t·rate·G)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PopulationDataset, Subject, Trial};
use crate::seed::{derive_seed, rng_for, tag};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Upper bound on the condition number of a subject mixing matrix.
pub const MAX_MIXING_CONDITION: f64 = 100.0;
/// Weight of the rotational part of a subject's mixing relative to its
/// symmetric (stretching) part.
pub const MIXING_ROTATION: f64 = 0.25;
/// Relative band-power increase of the active source group in MI trials.
pub const MI_MODULATION: f64 = 1.0;
/// Range of the subject P300 latency in milliseconds; drawn uniformly when
/// subjects vary, the midpoint otherwise.
pub const P300_LATENCY_MS: (f64, f64) = (250.0, 600.0);
/// Latency creep per unit of accumulated drift.
pub const P300_CREEP_MS: f64 = 100.0;
const P300_WIDTH_MS: f64 = 60.0;
const SSVEP_BASE_HZ: [f64; 8] = [8.0, 10.0, 12.0, 15.0, 9.0, 11.0, 13.0, 14.0];
const OSCILLATOR_PARTIALS: usize = 10;
const PINK_BURN_IN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Mi,
    P300,
    Ssvep,
}

impl std::str::FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mi" => Ok(Paradigm::Mi),
            "p300" => Ok(Paradigm::P300),
            "ssvep" => Ok(Paradigm::Ssvep),
            other => Err(Error::Config(format!("unknown paradigm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub paradigm: Paradigm,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub sampling_rate: f64,
    pub n_classes: usize,
    pub snr_db: f64,
    pub subject_variability: f64,
    /// Drift rotation angle accumulated per trial, in radians.
    pub drift_rate: f64,
    pub class_balance: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::new(Paradigm::Mi)
    }
}

impl SynthConfig {
    /// Defaults for a paradigm: 8 channels, 128 samples at 128 Hz.
    pub fn new(paradigm: Paradigm) -> Self {
        let (n_classes, class_balance) = match paradigm {
            Paradigm::Mi => (2, vec![0.5, 0.5]),
            Paradigm::P300 => (2, vec![5.0 / 6.0, 1.0 / 6.0]),
            Paradigm::Ssvep => (4, vec![0.25; 4]),
        };
        Self {
            paradigm,
            n_channels: 8,
            n_timepoints: 128,
            sampling_rate: 128.0,
            n_classes,
            snr_db: -5.0,
            subject_variability: 0.5,
            drift_rate: 0.003,
            class_balance,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_channels == 0 || self.n_timepoints < 2 {
            return fail(format!(
                "need at least 1 channel and 2 timepoints, got {}x{}",
                self.n_channels, self.n_timepoints
            ));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return fail(format!("sampling rate must be positive, got {}", self.sampling_rate));
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.class_balance.len() != self.n_classes {
            return fail(format!(
                "class_balance has {} entries for {} classes",
                self.class_balance.len(),
                self.n_classes
            ));
        }
        if self.class_balance.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return fail("class_balance entries must be positive".into());
        }
        let total: f64 = self.class_balance.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return fail(format!("class_balance must sum to 1, got {total}"));
        }
        for (name, v) in [
            ("snr_db", self.snr_db),
            ("subject_variability", self.subject_variability),
            ("drift_rate", self.drift_rate),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        if self.subject_variability < 0.0 || self.drift_rate < 0.0 {
            return fail("subject_variability and drift_rate must be non-negative".into());
        }
        match self.paradigm {
            Paradigm::Mi if self.n_channels < self.n_classes => fail(format!(
                "MI needs one source group per class: {} channels for {} classes",
                self.n_channels, self.n_classes
            )),
            Paradigm::P300 if self.n_classes != 2 => fail("P300 is a two-class paradigm".into()),
            Paradigm::Ssvep => {
                let freqs = self.ssvep_frequencies()?;
                if freqs.iter().any(|f| 2.0 * f >= self.sampling_rate / 2.0) {
                    return fail(format!("SSVEP harmonics exceed Nyquist at {} Hz", self.sampling_rate));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn mi_band(&self) -> (f64, f64) {
        let scale = (self.sampling_rate / 128.0).min(1.0);
        (8.0 * scale, 13.0 * scale)
    }

    /// Stimulation frequency of each SSVEP class.
    pub fn ssvep_frequencies(&self) -> Result<Vec<f64>> {
        if self.n_classes > SSVEP_BASE_HZ.len() {
            return Err(Error::Config(format!(
                "SSVEP supports at most {} classes",
                SSVEP_BASE_HZ.len()
            )));
        }
        Ok(SSVEP_BASE_HZ[..self.n_classes].to_vec())
    }
}

/// Everything that distinguishes one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectParams {
    pub id: u32,
    pub seed: u64,
    pub mixing: DMatrix<f64>,
    /// Skew-symmetric generator of the drift rotation, unit spectral norm.
    pub drift_generator: DMatrix<f64>,
    /// Lower-triangular factor that correlates the noise across sources.
    pub coloring: DMatrix<f64>,
    /// Per-class source amplitudes of the band-limited rhythm.
    pub class_gains: Vec<Vec<f64>>,
    pub band_hz: (f64, f64),
    pub p300_latency_ms: f64,
    pub p300_weights: Vec<f64>,
    pub ssvep_phases: Vec<f64>,
    pub ssvep_weights: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn shared_coloring(config: &SynthConfig) -> Result<DMatrix<f64>> {
    let c = config.n_channels;
    let mut rng = rng_for(&[config.seed, tag("coloring")]);
    let b = gaussian_matrix(&mut rng, c);
    let p = &b * b.transpose() / c as f64 + DMatrix::identity(c, c) * 0.5;
    let d = DMatrix::from_diagonal(&p.diagonal().map(|v| 1.0 / v.sqrt()));
    let corr = &d * p * &d;
    corr.cholesky()
        .map(|ch| ch.l())
        .ok_or_else(|| Error::Linalg("noise coloring is not positive definite".into()))
}

fn jitter(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    sigma * rng.sample::<f64, _>(StandardNormal)
}

/// Draws the parameters of subject `id` of the population defined by `config`.
pub fn gen_subject(config: &SynthConfig, id: u32) -> Result<SubjectParams> {
    config.validate()?;
    let c = config.n_channels;
    let k = config.n_classes;
    let sigma = config.subject_variability;
    let seed = derive_seed(&[config.seed, tag("subject"), id as u64]);
    let mut rng = rng_for(&[seed, tag("params")]);

    let g = gaussian_matrix(&mut rng, c) / (c as f64).sqrt();
    let w = (&g + g.transpose()) * 0.5 + (&g - g.transpose()) * (0.5 * MIXING_ROTATION);
    let mut scale = sigma;
    let mixing = loop {
        let a = (&w * scale).exp();
        if condition_number(&a) <= MAX_MIXING_CONDITION {
            break a;
        }
        scale *= 0.5;
    };

    let g = gaussian_matrix(&mut rng, c);
    let skew = (&g - g.transpose()) * 0.5;
    let norm = skew.singular_values().max();
    let drift_generator = if norm > 0.0 { skew / norm } else { skew };

    let depth = MI_MODULATION * jitter(&mut rng, 0.3 * sigma).exp();
    let class_gains = (0..k)
        .map(|class| {
            (0..c)
                .map(|src| if src * k / c == class { 1.0 + depth } else { 1.0 })
                .collect()
        })
        .collect();
    let (lo, hi) = config.mi_band();
    let shift = jitter(&mut rng, sigma).clamp(-2.0, 2.0) * (hi - lo) / 5.0;
    let band_hz = (lo + shift, hi + shift);

    let (l0, l1) = P300_LATENCY_MS;
    let draw: f64 = rng.random_range(l0..=l1);
    let p300_latency_ms = if sigma > 0.0 { draw } else { (l0 + l1) / 2.0 };
    let centre = (c as f64 - 1.0) / 2.0;
    let spread = (c as f64 / 3.0).max(1.0);
    let p300_weights = (0..c)
        .map(|src| {
            let base = (-((src as f64 - centre) / spread).powi(2)).exp();
            (base * (1.0 + jitter(&mut rng, 0.3 * sigma))).max(0.0)
        })
        .collect();

    let mut shared = rng_for(&[config.seed, tag("ssvep-phase")]);
    let ssvep_phases = (0..k)
        .map(|_| shared.random_range(0.0..2.0 * PI) + jitter(&mut rng, sigma))
        .collect();
    let ssvep_weights = (0..c)
        .map(|src| {
            if 2 * src >= c {
                (1.0 + jitter(&mut rng, 0.3 * sigma)).max(0.0)
            } else {
                0.0
            }
        })
        .collect();

    Ok(SubjectParams {
        id,
        seed,
        mixing,
        drift_generator,
        coloring: shared_coloring(config)?,
        class_gains,
        band_hz,
        p300_latency_ms,
        p300_weights,
        ssvep_phases,
        ssvep_weights,
    })
}

/// Paul Kellet's refined pink-noise filter.
#[derive(Default)]
struct PinkFilter([f64; 7]);

impl PinkFilter {
    fn next(&mut self, white: f64) -> f64 {
        let b = &mut self.0;
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let out = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + white * 0.5362;
        b[6] = white * 0.115926;
        out
    }
}

/// Unit-variance pink noise of length `n`.
pub fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut filter = PinkFilter::default();
    for _ in 0..PINK_BURN_IN {
        filter.next(rng.sample(StandardNormal));
    }
    let mut x: Vec<f64> = (0..n).map(|_| filter.next(rng.sample(StandardNormal))).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    for v in &mut x {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
    x
}

/// Random-phase sum of sinusoids in `band`, unit variance in expectation.
fn narrowband(rng: &mut ChaCha8Rng, band: (f64, f64), fs: f64, n: usize) -> Vec<f64> {
    let amp = (2.0 / OSCILLATOR_PARTIALS as f64).sqrt();
    let partials: Vec<(f64, f64)> = (0..OSCILLATOR_PARTIALS)
        .map(|_| (rng.random_range(band.0..band.1), rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..n)
        .map(|t| {
            let time = t as f64 / fs;
            partials
                .iter()
                .map(|(f, ph)| amp * (2.0 * PI * f * time + ph).sin())
                .sum()
        })
        .collect()
}

/// The drift rotation at `trial_index`.
pub fn drift_rotation(params: &SubjectParams, config: &SynthConfig, trial_index: usize) -> DMatrix<f64> {
    (&params.drift_generator * (config.drift_rate * trial_index as f64)).exp()
}

/// P300 latency at `trial_index`, including drift creep.
pub fn p300_latency_at(params: &SubjectParams, config: &SynthConfig, trial_index: usize) -> f64 {
    params.p300_latency_ms + P300_CREEP_MS * config.drift_rate * trial_index as f64
}

fn source_template(params: &SubjectParams, config: &SynthConfig, label: usize, trial_index: usize) -> DMatrix<f64> {
    let (c, n, fs) = (config.n_channels, config.n_timepoints, config.sampling_rate);
    let amp = 10f64.powf(config.snr_db / 20.0);
    let mut rng = rng_for(&[params.seed, tag("signal"), trial_index as u64]);
    let mut s = DMatrix::zeros(c, n);
    match config.paradigm {
        Paradigm::Mi => {
            for src in 0..c {
                let osc = narrowband(&mut rng, params.band_hz, fs, n);
                let gain = amp * params.class_gains[label][src];
                for (t, v) in osc.into_iter().enumerate() {
                    s[(src, t)] = gain * v;
                }
            }
        }
        Paradigm::P300 => {
            if label == 1 {
                let latency = p300_latency_at(params, config, trial_index);
                let peak = latency + jitter(&mut rng, 20.0);
                for t in 0..n {
                    let ms = t as f64 * 1000.0 / fs;
                    let bump = (-0.5 * ((ms - peak) / P300_WIDTH_MS).powi(2)).exp();
                    for src in 0..c {
                        s[(src, t)] = amp * params.p300_weights[src] * bump;
                    }
                }
            }
        }
        Paradigm::Ssvep => {
            let f = SSVEP_BASE_HZ[label];
            let phase = params.ssvep_phases[label] + jitter(&mut rng, 0.2);
            let norm = (2.0 / 1.25f64).sqrt();
            for t in 0..n {
                let arg = 2.0 * PI * f * t as f64 / fs + phase;
                let wave = norm * (arg.sin() + 0.5 * (2.0 * arg).sin());
                for src in 0..c {
                    s[(src, t)] = amp * params.ssvep_weights[src] * wave;
                }
            }
        }
    }
    s
}

fn source_noise(params: &SubjectParams, config: &SynthConfig, trial_index: usize) -> DMatrix<f64> {
    let (c, n) = (config.n_channels, config.n_timepoints);
    let mut rng = rng_for(&[params.seed, tag("noise"), trial_index as u64]);
    let mut pink = DMatrix::zeros(c, n);
    for src in 0..c {
        for (t, v) in pink_noise(&mut rng, n).into_iter().enumerate() {
            pink[(src, t)] = v;
        }
    }
    &params.coloring * pink
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (c, n) = m.shape();
    let data = (0..c)
        .flat_map(|i| (0..n).map(move |t| (i, t)))
        .map(|(i, t)| m[(i, t)] as f32)
        .collect();
    Tensor::new(vec![c, n], data).expect("shape matches data length")
}

/// The signal and noise parts of a trial, both already mixed into sensor space.
pub fn trial_components(
    params: &SubjectParams,
    config: &SynthConfig,
    label: usize,
    trial_index: usize,
) -> Result<(Tensor, Tensor)> {
    if label >= config.n_classes {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            config.n_classes
        )));
    }
    if params.mixing.nrows() != config.n_channels {
        return Err(Error::Dim {
            expected: config.n_channels,
            got: params.mixing.nrows(),
        });
    }
    let projection = &params.mixing * drift_rotation(params, config, trial_index);
    let signal = &projection * source_template(params, config, label, trial_index);
    let noise = &projection * source_noise(params, config, trial_index);
    Ok((to_tensor(&signal), to_tensor(&noise)))
}

/// One `(channels, timepoints)` trial of class `label`.
pub fn gen_trial(params: &SubjectParams, config: &SynthConfig, label: usize, trial_index: usize) -> Result<Tensor> {
    let (signal, noise) = trial_components(params, config, label, trial_index)?;
    let data = signal.data().iter().zip(noise.data()).map(|(s, n)| s + n).collect();
    Ok(Tensor::new(signal.shape().to_vec(), data)?)
}

/// Session label sequence of a subject; prefixes agree across lengths.
pub fn gen_labels(params: &SubjectParams, config: &SynthConfig, n_trials: usize) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(&config.class_balance).map_err(|e| Error::Config(format!("class_balance: {e}")))?;
    let mut rng = rng_for(&[params.seed, tag("labels")]);
    Ok((0..n_trials).map(|_| dist.sample(&mut rng)).collect())
}

/// A full session of subject `id`.
pub fn gen_subject_session(config: &SynthConfig, id: u32, n_trials: usize) -> Result<Subject> {
    let params = gen_subject(config, id)?;
    let labels = gen_labels(&params, config, n_trials)?;
    let trials = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            Ok(Trial {
                data: gen_trial(&params, config, label, i)?,
                label,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Subject { id, trials })
}

/// Subjects with the given ids, each with `trials_per_subject` trials.
pub fn gen_population(
    config: &SynthConfig,
    subject_ids: &[u32],
    trials_per_subject: usize,
) -> Result<PopulationDataset> {
    config.validate()?;
    let subjects = subject_ids
        .par_iter()
        .map(|&id| gen_subject_session(config, id, trials_per_subject))
        .collect::<Result<_>>()?;
    Ok(PopulationDataset {
        subjects,
        n_channels: config.n_channels,
        n_timepoints: config.n_timepoints,
        n_classes: config.n_classes,
        sampling_rate: config.sampling_rate as f32,
    })
}
