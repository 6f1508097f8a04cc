//! Latency microbenchmarks of the three online stages, driven through the
//! same [`OnlineAdapter`] methods a live session calls.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cft::CftConfig;
use crate::data::Trial;
use crate::datagen::{gen_subject_session, SynthConfig};
use crate::models::{Arch, Model, ModelConfig};
use crate::session::{OnlineAdapter, Preset};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    UdaUpdate,
    Predict,
    CftUpdate,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::UdaUpdate, Stage::Predict, Stage::CftUpdate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::UdaUpdate => "uda_update",
            Stage::Predict => "predict",
            Stage::CftUpdate => "cft_update",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Repetition counts of one benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub warmup_runs: usize,
    pub measured_runs: usize,
    /// Trials per finetuning batch (CFT stage only).
    pub batch_size: usize,
}

impl Protocol {
    /// 10 + 100 runs for alignment and prediction; 5 + 20 batch updates of
    /// 50 trials for finetuning.
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::UdaUpdate | Stage::Predict => Self {
                warmup_runs: 10,
                measured_runs: 100,
                batch_size: 1,
            },
            Stage::CftUpdate => Self {
                warmup_runs: 5,
                measured_runs: 20,
                batch_size: 50,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub stage: Stage,
    pub arch: Arch,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub batch_size: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

/// Linear-interpolated quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn all_finite(values: &[f32]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn params_finite(model: &Model) -> bool {
    model.params().iter().all(|p| all_finite(p.value.data()))
}

/// Times `protocol.warmup_runs + protocol.measured_runs` invocations of a
/// stage on `model`, cycling through `trials` as input.
pub fn bench_stage(stage: Stage, model: &Model, trials: &[Trial], protocol: Protocol) -> Result<BenchReport> {
    let cfg = model.config();
    let dims = [cfg.n_channels, cfg.n_timepoints];
    if let Some(t) = trials.iter().find(|t| t.data.shape() != dims) {
        return Err(Error::Shape {
            expected: dims.to_vec(),
            got: t.data.shape().to_vec(),
        });
    }
    if trials.is_empty() || protocol.measured_runs == 0 || protocol.batch_size == 0 {
        return Err(Error::Config(
            "benchmark needs trials, measured runs and a positive batch size".into(),
        ));
    }
    let mut model = model.clone();
    let cft = CftConfig {
        warmup_trials: protocol.batch_size,
        epochs_per_trial: 1,
        batch_size: protocol.batch_size,
        window_size: protocol.batch_size,
        ..CftConfig::default()
    };
    let mut adapter = OnlineAdapter::new(&model, Preset::PreUdaCft.config(cft))?;
    let input = |i: usize| &trials[i % trials.len()];

    let mut trial_number = 0usize;
    if stage == Stage::CftUpdate {
        for i in 0..protocol.batch_size {
            trial_number += 1;
            let t = input(i);
            let alignment = adapter.uda_update(&t.data)?;
            adapter.cft_update(&mut model, t.data.clone(), alignment.as_ref(), t.label, trial_number)?;
        }
    }

    let total = protocol.warmup_runs + protocol.measured_runs;
    let mut times = Vec::with_capacity(protocol.measured_runs);
    for run in 0..total {
        let t = input(run);
        let elapsed = match stage {
            Stage::UdaUpdate => {
                let start = Instant::now();
                let out = adapter.uda_update(&t.data)?;
                let elapsed = start.elapsed();
                if !out.is_some_and(|a| all_finite(a.aligned.data()) && a.transform.iter().all(|v| v.is_finite())) {
                    return Err(Error::NonFiniteBench("uda_update"));
                }
                elapsed
            }
            Stage::Predict => {
                let start = Instant::now();
                let p = adapter.predict(&mut model, &t.data)?;
                let elapsed = start.elapsed();
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteBench("predict"));
                }
                elapsed
            }
            Stage::CftUpdate => {
                let alignment = adapter.uda_update(&t.data)?;
                trial_number += 1;
                let raw: Tensor = t.data.clone();
                let start = Instant::now();
                let updated = adapter.cft_update(&mut model, raw, alignment.as_ref(), t.label, trial_number)?;
                let elapsed = start.elapsed();
                if !updated {
                    return Err(Error::Protocol("benchmark finetune step did not run".into()));
                }
                if !params_finite(&model) {
                    return Err(Error::NonFiniteBench("cft_update"));
                }
                elapsed
            }
        };
        if run >= protocol.warmup_runs {
            times.push(elapsed.as_secs_f64() * 1e3);
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        stage,
        arch: cfg.arch,
        n_channels: cfg.n_channels,
        n_timepoints: cfg.n_timepoints,
        warmup_runs: protocol.warmup_runs,
        measured_runs: times.len(),
        batch_size: protocol.batch_size,
        median_ms: quantile(&times, 0.5),
        p10_ms: quantile(&times, 0.1),
        p90_ms: quantile(&times, 0.9),
    })
}

/// Benchmarks every stage for each architecture and `(C, T)` pair on
/// synthetic trials, with freshly initialized models.
pub fn bench_suite(archs: &[Arch], dims: &[(usize, usize)], seed: u64) -> Result<Vec<BenchReport>> {
    let mut reports = Vec::new();
    for &(c, t) in dims {
        let data = SynthConfig {
            n_channels: c,
            n_timepoints: t,
            seed,
            ..SynthConfig::default()
        };
        let trials = gen_subject_session(&data, 0, 64)?.trials;
        for &arch in archs {
            let model = Model::build(ModelConfig::new(arch, c, t, data.n_classes).with_seed(seed))?;
            for stage in Stage::ALL {
                reports.push(bench_stage(stage, &model, &trials, Protocol::for_stage(stage))?);
            }
        }
    }
    Ok(reports)
}

pub fn write_bench_csv(reports: &[BenchReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
