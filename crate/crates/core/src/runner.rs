//! Experiment orchestration: ablation suites over adaptation presets,
//! pretraining-data scaling suites and data-efficiency curves.
//!
//! Every random stream is derived from the plan's master seed, so a plan
//! reproduces bit-identical result rows regardless of thread scheduling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cft::CftConfig;
use crate::data::{PopulationDataset, Subject};
use crate::datagen::{gen_population, SynthConfig};
use crate::ingest::read_container;
use crate::models::{Arch, Model, ModelConfig};
use crate::pretrain::{make_subject_folds, pretrain_model, PretrainConfig};
use crate::seed::{derive_seed, rng_for, tag};
use crate::session::{run_session, zero_shot_eval, Preset, SubjectStream};
use crate::stats::mean_std;
use crate::{Error, Result};

/// Relative tolerance of an iso pair's product around the stated budget.
pub const ISO_BUDGET_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        config: SynthConfig,
        n_subjects: usize,
        trials_per_subject: usize,
    },
    Container {
        path: PathBuf,
    },
}

/// How subjects are divided between pretraining and online evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Split {
    /// Subject-wise k-fold cross-validation.
    Folds { folds: usize },
    /// One fixed partition.
    Holdout { train: Vec<u32>, test: Vec<u32> },
}

impl Default for Split {
    fn default() -> Self {
        Split::Folds { folds: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingAxes {
    pub subject_counts: Vec<usize>,
    pub trial_counts: Vec<usize>,
    /// `(subjects, trials per subject)` compositions of one data budget.
    pub iso_pairs: Vec<(usize, usize)>,
    pub iso_budget: Option<usize>,
    pub folds: usize,
    /// Evaluate only the first `n` folds.
    pub max_folds: Option<usize>,
    pub presets: Vec<Preset>,
}

impl Default for ScalingAxes {
    fn default() -> Self {
        Self {
            subject_counts: vec![2, 4, 8, 16],
            trial_counts: vec![25, 50, 100, 200],
            iso_pairs: vec![(4, 400), (8, 200), (16, 100)],
            iso_budget: Some(1600),
            folds: 5,
            max_folds: None,
            presets: vec![Preset::PreZs],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Dataset label written into every result row.
    pub name: String,
    pub master_seed: u64,
    pub dataset: DatasetSource,
    pub archs: Vec<Arch>,
    pub presets: Vec<Preset>,
    /// Replicate seeds; each varies initialization, shuffling and dropout.
    pub seeds: Vec<u64>,
    pub split: Split,
    /// Use only the first `n` trials of each pretraining subject.
    pub pretrain_trials_per_subject: Option<usize>,
    pub pretrain: PretrainConfig,
    pub cft: CftConfig,
    pub scaling: ScalingAxes,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            master_seed: 0,
            dataset: DatasetSource::Synthetic {
                config: SynthConfig::default(),
                n_subjects: 20,
                trials_per_subject: 300,
            },
            archs: vec![Arch::EegnetLite, Arch::ShallowNet],
            presets: Preset::ALL.to_vec(),
            seeds: vec![0],
            split: Split::default(),
            pretrain_trials_per_subject: None,
            pretrain: PretrainConfig::default(),
            cft: CftConfig::default(),
            scaling: ScalingAxes::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("experiment plan: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.archs.is_empty() {
            return fail("plan needs at least one architecture");
        }
        if self.presets.is_empty() {
            return fail("plan needs at least one preset");
        }
        if self.seeds.is_empty() {
            return fail("plan needs at least one seed");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return fail("replicate seeds must be distinct");
        }
        if self.pretrain_trials_per_subject == Some(0) {
            return fail("pretrain_trials_per_subject must be positive");
        }
        self.cft.validate()?;
        match &self.split {
            Split::Folds { folds } if *folds < 2 => return fail("need at least 2 folds"),
            Split::Holdout { train, test } => {
                if train.is_empty() || test.is_empty() {
                    return fail("holdout split needs train and test subjects");
                }
                if train.iter().any(|id| test.contains(id)) {
                    return fail("holdout train and test subjects overlap");
                }
            }
            _ => {}
        }
        let axes = &self.scaling;
        if let Some(budget) = axes.iso_budget {
            for &(s, t) in &axes.iso_pairs {
                let rel = ((s * t) as f64 - budget as f64).abs() / budget as f64;
                if rel > ISO_BUDGET_TOLERANCE {
                    return Err(Error::Config(format!(
                        "iso pair {s}x{t} = {} is not within 5% of the budget {budget}",
                        s * t
                    )));
                }
            }
        }
        if axes.subject_counts.contains(&0) || axes.trial_counts.contains(&0) {
            return fail("scaling axis points must be positive");
        }
        if axes.iso_pairs.iter().any(|&(s, t)| s == 0 || t == 0) {
            return fail("iso pairs must be positive");
        }
        Ok(())
    }
}

/// Materializes the plan's dataset. Synthetic data is seeded from the
/// master seed together with the generator's own seed.
pub fn load_dataset(plan: &ExperimentPlan) -> Result<PopulationDataset> {
    match &plan.dataset {
        DatasetSource::Synthetic {
            config,
            n_subjects,
            trials_per_subject,
        } => {
            if *n_subjects == 0 {
                return Err(Error::Config("synthetic dataset needs at least one subject".into()));
            }
            let config = SynthConfig {
                seed: derive_seed(&[plan.master_seed, tag("data"), config.seed]),
                ..config.clone()
            };
            let ids: Vec<u32> = (0..*n_subjects as u32).collect();
            gen_population(&config, &ids, *trials_per_subject)
        }
        DatasetSource::Container { path } => Ok(read_container(path)?),
    }
}

/// Which scaling axis a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Plain ablation, no axis.
    None,
    Subjects,
    Trials,
    Iso,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::None => "none",
            Axis::Subjects => "subjects",
            Axis::Trials => "trials",
            Axis::Iso => "iso",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One evaluated `(config, subject, replicate)` outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub arch: Arch,
    pub config: Preset,
    pub axis: Axis,
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub budget: usize,
    pub fold: usize,
    pub seed: u64,
    pub subject_id: u32,
    pub final_accuracy: f64,
    pub balanced_accuracy: f64,
    pub zero_shot_accuracy: f64,
    pub finetune_steps: u64,
}

impl ResultRow {
    fn sort_key(&self) -> (String, Arch, Axis, usize, usize, Preset, usize, u64, u32) {
        (
            self.dataset.clone(),
            self.arch,
            self.axis,
            self.n_subjects,
            self.trials_per_subject,
            self.config,
            self.fold,
            self.seed,
            self.subject_id,
        )
    }
}

/// Named series of `(x, y)` points rendered as one chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    /// File stem of the emitted chart.
    pub name: String,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

/// Confirms that no test-subject trial took part in a pretraining run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageAudit {
    pub fold: usize,
    pub train_trials: usize,
    pub test_trials: usize,
    /// Test trials whose content digest also occurs in the training pool.
    pub overlapping: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub curves: Vec<Curve>,
    pub audits: Vec<LeakageAudit>,
}

impl ResultTable {
    /// Rows matching the predicate.
    pub fn select(&self, pred: impl Fn(&ResultRow) -> bool) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| pred(r)).collect()
    }

    /// Mean final accuracy of a config per subject, averaged over seeds.
    pub fn subject_means(&self, pred: impl Fn(&ResultRow) -> bool) -> BTreeMap<u32, f64> {
        let mut acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| pred(r)) {
            acc.entry(r.subject_id).or_default().push(r.final_accuracy);
        }
        acc.into_iter().map(|(id, v)| (id, mean_std(&v).0)).collect()
    }
}

/// A content digest of one trial (label and samples).
pub fn trial_digest(label: usize, data: &[f32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((label as u64).to_le_bytes());
    for v in data {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

fn audit(fold: usize, train: &PopulationDataset, test: &[&Subject]) -> LeakageAudit {
    let seen: HashSet<[u8; 32]> = train
        .subjects
        .iter()
        .flat_map(|s| &s.trials)
        .map(|t| trial_digest(t.label, t.data.data()))
        .collect();
    let test_trials: Vec<_> = test.iter().flat_map(|s| &s.trials).collect();
    LeakageAudit {
        fold,
        train_trials: seen.len(),
        test_trials: test_trials.len(),
        overlapping: test_trials
            .iter()
            .filter(|t| seen.contains(&trial_digest(t.label, t.data.data())))
            .count(),
    }
}

/// One pretraining pool plus its evaluation subjects.
#[derive(Debug, Clone)]
struct Unit {
    arch: Arch,
    fold: usize,
    seed: u64,
    axis: Axis,
    train: Vec<u32>,
    trials: usize,
    test: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct CheckpointKey {
    arch: Arch,
    fold: usize,
    seed: u64,
    train: Vec<u32>,
    trials: usize,
    aligned: bool,
}

fn arch_code(arch: Arch) -> u64 {
    match arch {
        Arch::EegnetLite => 0,
        Arch::ShallowNet => 1,
    }
}

fn preset_code(p: Preset) -> u64 {
    Preset::ALL.iter().position(|&q| q == p).unwrap_or(0) as u64
}

struct Engine<'a> {
    plan: &'a ExperimentPlan,
    data: &'a PopulationDataset,
}

impl Engine<'_> {
    fn model_config(&self, arch: Arch) -> ModelConfig {
        ModelConfig::new(arch, self.data.n_channels, self.data.n_timepoints, self.data.n_classes)
    }

    fn subjects(&self, ids: &[u32]) -> Result<Vec<&Subject>> {
        ids.iter()
            .map(|&id| {
                self.data
                    .subject(id)
                    .ok_or_else(|| Error::Config(format!("subject {id} is not in the dataset")))
            })
            .collect()
    }

    fn pretrain(&self, key: &CheckpointKey) -> Result<Model> {
        let pool = self.data.select(&key.train).truncate_trials(key.trials);
        let seed = derive_seed(&[
            self.plan.master_seed,
            tag("pretrain"),
            arch_code(key.arch),
            key.fold as u64,
            key.seed,
            key.aligned as u64,
        ]);
        let pcfg = PretrainConfig {
            align: key.aligned,
            ..self.plan.pretrain
        };
        Ok(pretrain_model(self.model_config(key.arch).with_seed(seed), &pool, &pcfg)?.model)
    }

    fn run(&self, units: &[Unit], presets: &[Preset]) -> Result<ResultTable> {
        let variants: &[bool] = if presets.iter().any(|p| p.aligned_pretraining()) {
            &[false, true]
        } else {
            &[false]
        };
        let mut keys = BTreeSet::new();
        for u in units {
            for &aligned in variants {
                keys.insert(CheckpointKey {
                    arch: u.arch,
                    fold: u.fold,
                    seed: u.seed,
                    train: u.train.clone(),
                    trials: u.trials,
                    aligned,
                });
            }
        }

        let mut pools: BTreeMap<(usize, Vec<u32>, usize), Vec<u32>> = BTreeMap::new();
        for u in units {
            pools.insert((u.fold, u.train.clone(), u.trials), u.test.clone());
        }
        let audits = pools
            .par_iter()
            .map(|((fold, train, trials), test)| {
                let pool = self.data.select(train).truncate_trials(*trials);
                Ok(audit(*fold, &pool, &self.subjects(test)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(a) = audits.iter().find(|a| a.overlapping > 0) {
            return Err(Error::Protocol(format!(
                "{} test trials of fold {} also appear in its pretraining pool",
                a.overlapping, a.fold
            )));
        }

        let keys: Vec<CheckpointKey> = keys.into_iter().collect();
        let models = keys.par_iter().map(|k| self.pretrain(k)).collect::<Result<Vec<_>>>()?;
        let checkpoints: BTreeMap<&CheckpointKey, Model> = keys.iter().zip(models).collect();
        let checkpoint = |u: &Unit, aligned: bool| {
            checkpoints[&CheckpointKey {
                arch: u.arch,
                fold: u.fold,
                seed: u.seed,
                train: u.train.clone(),
                trials: u.trials,
                aligned,
            }]
                .clone()
        };

        let jobs: Vec<(&Unit, u32)> = units
            .iter()
            .flat_map(|u| u.test.iter().map(move |&id| (u, id)))
            .collect();
        let outcomes = jobs
            .par_iter()
            .map(|&(u, id)| -> Result<Vec<(ResultRow, Vec<f64>)>> {
                let subject = self
                    .data
                    .subject(id)
                    .ok_or_else(|| Error::Config(format!("subject {id} missing")))?;
                let zero_shot = zero_shot_eval(&mut checkpoint(u, false), subject)?;
                presets
                    .iter()
                    .map(|&preset| {
                        let mut model = if preset.pretrained() {
                            checkpoint(u, preset.aligned_pretraining())
                        } else {
                            let init = derive_seed(&[
                                self.plan.master_seed,
                                tag("init"),
                                arch_code(u.arch),
                                u.seed,
                                id as u64,
                            ]);
                            Model::build(self.model_config(u.arch).with_seed(init))?
                        };
                        model.reseed(derive_seed(&[
                            self.plan.master_seed,
                            tag("session"),
                            arch_code(u.arch),
                            u.fold as u64,
                            u.seed,
                            id as u64,
                            preset_code(preset),
                        ]));
                        let metrics = run_session(
                            &mut model,
                            &mut SubjectStream::new(subject),
                            &preset.config(self.plan.cft),
                        )?;
                        let row = ResultRow {
                            dataset: self.plan.name.clone(),
                            arch: u.arch,
                            config: preset,
                            axis: u.axis,
                            n_subjects: u.train.len(),
                            trials_per_subject: u.trials,
                            budget: u.train.len() * u.trials,
                            fold: u.fold,
                            seed: u.seed,
                            subject_id: id,
                            final_accuracy: metrics.final_accuracy,
                            balanced_accuracy: metrics.balanced_accuracy,
                            zero_shot_accuracy: zero_shot,
                            finetune_steps: metrics.finetune_steps,
                        };
                        Ok((row, metrics.smoothed_curve))
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut outcomes: Vec<(ResultRow, Vec<f64>)> = outcomes.into_iter().flatten().collect();
        outcomes.sort_by_key(|a| a.0.sort_key());
        let curves = if units.iter().all(|u| u.axis == Axis::None) {
            session_curves(&self.plan.name, &outcomes)
        } else {
            Vec::new()
        };
        let rows: Vec<ResultRow> = outcomes.into_iter().map(|(r, _)| r).collect();
        let mut audits = audits;
        audits.sort_by_key(|a| (a.fold, a.train_trials, a.test_trials));
        let mut table = ResultTable { rows, curves, audits };
        if units.iter().any(|u| u.axis != Axis::None) {
            table.curves = scaling_curves(&self.plan.name, &table.rows);
        }
        Ok(table)
    }
}

/// Mean smoothed accuracy over the session, per arch and preset.
fn session_curves(dataset: &str, outcomes: &[(ResultRow, Vec<f64>)]) -> Vec<Curve> {
    let mut groups: BTreeMap<Arch, BTreeMap<Preset, Vec<&Vec<f64>>>> = BTreeMap::new();
    for (row, curve) in outcomes {
        groups
            .entry(row.arch)
            .or_default()
            .entry(row.config)
            .or_default()
            .push(curve);
    }
    groups
        .into_iter()
        .map(|(arch, presets)| Curve {
            name: format!("{dataset}_{arch}_sessions"),
            title: format!("{dataset} / {arch}: smoothed online accuracy"),
            x_label: "trial".into(),
            y_label: "accuracy".into(),
            series: presets
                .into_iter()
                .map(|(preset, curves)| {
                    let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
                    let points = (0..len)
                        .map(|i| {
                            let mean = curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64;
                            ((i + 1) as f64, mean)
                        })
                        .collect();
                    (preset.name().to_string(), points)
                })
                .collect(),
        })
        .collect()
}

/// Mean accuracy against pretraining budget, per arch and axis.
fn scaling_curves(dataset: &str, rows: &[ResultRow]) -> Vec<Curve> {
    type ByBudget = BTreeMap<usize, Vec<f64>>;
    let mut groups: BTreeMap<(Arch, Axis), BTreeMap<Preset, ByBudget>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.arch, r.axis))
            .or_default()
            .entry(r.config)
            .or_default()
            .entry(r.budget)
            .or_default()
            .push(r.final_accuracy);
    }
    groups
        .into_iter()
        .map(|((arch, axis), presets)| Curve {
            name: format!("{dataset}_{arch}_{axis}"),
            title: format!("{dataset} / {arch}: accuracy by pretraining data ({axis} axis)"),
            x_label: "pretraining trials".into(),
            y_label: "accuracy".into(),
            series: presets
                .into_iter()
                .map(|(preset, points)| {
                    let pts = points.into_iter().map(|(b, v)| (b as f64, mean_std(&v).0)).collect();
                    (preset.name().to_string(), pts)
                })
                .collect(),
        })
        .collect()
}

fn fold_partitions(
    plan: &ExperimentPlan,
    data: &PopulationDataset,
    split: &Split,
) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
    match split {
        Split::Folds { folds } => {
            let fp = make_subject_folds(
                &data.subject_ids(),
                *folds,
                derive_seed(&[plan.master_seed, tag("folds")]),
            )?;
            Ok((0..*folds)
                .map(|f| (fp.train_subjects(f), fp.test_subjects(f)))
                .collect())
        }
        Split::Holdout { train, test } => Ok(vec![(train.clone(), test.clone())]),
    }
}

/// `(train, test)` subject ids of every fold of the plan's split.
pub fn split_partitions(plan: &ExperimentPlan, data: &PopulationDataset) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
    fold_partitions(plan, data, &plan.split)
}

/// Pretrains once per (arch, fold, seed) and runs every preset session on
/// each held-out subject.
pub fn run_ablation_suite(plan: &ExperimentPlan, data: &PopulationDataset) -> Result<ResultTable> {
    plan.validate()?;
    let trials = plan
        .pretrain_trials_per_subject
        .unwrap_or_else(|| data.subjects.iter().map(|s| s.trials.len()).max().unwrap_or(0));
    let mut units = Vec::new();
    for (fold, (train, test)) in fold_partitions(plan, data, &plan.split)?.into_iter().enumerate() {
        for &arch in &plan.archs {
            for &seed in &plan.seeds {
                units.push(Unit {
                    arch,
                    fold,
                    seed,
                    axis: Axis::None,
                    train: train.clone(),
                    trials,
                    test: test.clone(),
                });
            }
        }
    }
    Engine { plan, data }.run(&units, &plan.presets)
}

/// Pretrains on growing subsets of each training fold along the subject,
/// trial and iso-budget axes and evaluates the scaling presets on the
/// held-out subjects.
pub fn run_scaling_suite(plan: &ExperimentPlan, data: &PopulationDataset) -> Result<ResultTable> {
    plan.validate()?;
    let axes = &plan.scaling;
    if axes.subject_counts.is_empty() && axes.trial_counts.is_empty() && axes.iso_pairs.is_empty() {
        return Err(Error::Config("scaling suite needs at least one axis point".into()));
    }
    if axes.presets.is_empty() {
        return Err(Error::Config("scaling suite needs at least one preset".into()));
    }
    let max_trials = data.subjects.iter().map(|s| s.trials.len()).min().unwrap_or(0);
    let partitions = fold_partitions(plan, data, &Split::Folds { folds: axes.folds })?;
    let n_folds = axes.max_folds.unwrap_or(axes.folds).min(axes.folds);
    let mut units = Vec::new();
    for (fold, (train, test)) in partitions.into_iter().enumerate().take(n_folds) {
        let max_subjects = train.len();
        let mut points: Vec<(Axis, usize, usize)> = Vec::new();
        points.extend(axes.subject_counts.iter().map(|&s| (Axis::Subjects, s, max_trials)));
        points.extend(axes.trial_counts.iter().map(|&t| (Axis::Trials, max_subjects, t)));
        points.extend(axes.iso_pairs.iter().map(|&(s, t)| (Axis::Iso, s, t)));
        for &(_, s, t) in &points {
            if s > max_subjects {
                return Err(Error::TooFew {
                    what: "training subjects in the fold for the scaling axis",
                    needed: s,
                    got: max_subjects,
                });
            }
            if t > max_trials {
                return Err(Error::TooFew {
                    what: "trials per subject for the scaling axis",
                    needed: t,
                    got: max_trials,
                });
            }
        }
        for &seed in &plan.seeds {
            let mut order = train.clone();
            order.shuffle(&mut rng_for(&[plan.master_seed, tag("subset"), fold as u64, seed]));
            for &arch in &plan.archs {
                for &(axis, s, t) in &points {
                    let mut subset = order[..s].to_vec();
                    subset.sort_unstable();
                    units.push(Unit {
                        arch,
                        fold,
                        seed,
                        axis,
                        train: subset,
                        trials: t,
                        test: test.clone(),
                    });
                }
            }
        }
    }
    Engine { plan, data }.run(&units, &axes.presets)
}

/// Data needed by continual finetuning relative to zero-shot use at one
/// accuracy level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Finite(f64),
    /// Zero-shot use never reaches the level.
    Unreachable,
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Finite(r) => write!(f, "{r}"),
            Ratio::Unreachable => f.write_str("unreachable"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyPoint {
    pub level: f64,
    pub ratio: Ratio,
}

/// `(data amount, accuracy)` curve sorted by amount with a running maximum
/// applied to the accuracy.
fn monotone(curve: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = curve.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = f64::NEG_INFINITY;
    sorted
        .into_iter()
        .map(|(x, y)| {
            best = best.max(y);
            (x, best)
        })
        .collect()
}

fn first_reaching(curve: &[(f64, f64)], level: f64) -> Option<f64> {
    curve.iter().find(|(_, y)| *y >= level).map(|(x, _)| *x)
}

type CurvePoints = Vec<(f64, f64)>;

fn check_curves(zs: &[(f64, f64)], cft: &[(f64, f64)]) -> Result<(CurvePoints, CurvePoints)> {
    if zs.is_empty() {
        return Err(Error::TooFew {
            what: "points on the data-amount axis",
            needed: 1,
            got: 0,
        });
    }
    let (zs, cft) = (monotone(zs), monotone(cft));
    let amounts = |c: &[(f64, f64)]| c.iter().map(|p| p.0).collect::<Vec<_>>();
    if amounts(&zs) != amounts(&cft) {
        return Err(Error::Config(
            "zero-shot and finetuned curves must share the data-amount axis".into(),
        ));
    }
    if zs
        .iter()
        .chain(&cft)
        .any(|(x, y)| !(x.is_finite() && *x > 0.0 && y.is_finite()))
    {
        return Err(Error::Config(
            "curve points must be finite with positive data amounts".into(),
        ));
    }
    Ok((zs, cft))
}

/// Ratio at one accuracy level, or `None` when finetuning never reaches it.
pub fn efficiency_ratio(zs: &[(f64, f64)], cft: &[(f64, f64)], level: f64, tolerance: f64) -> Result<Option<Ratio>> {
    let (zs, cft) = check_curves(zs, cft)?;
    Ok(ratio_at(&zs, &cft, level, tolerance))
}

fn ratio_at(zs: &[(f64, f64)], cft: &[(f64, f64)], level: f64, tolerance: f64) -> Option<Ratio> {
    let c = first_reaching(cft, level - tolerance)?;
    Some(match first_reaching(zs, level - tolerance) {
        Some(z) => Ratio::Finite(c / z),
        None => Ratio::Unreachable,
    })
}

/// Ratio curve over every accuracy level attained by either curve (after a
/// running maximum) that finetuning reaches.
pub fn data_efficiency_curve(zs: &[(f64, f64)], cft: &[(f64, f64)], tolerance: f64) -> Result<Vec<EfficiencyPoint>> {
    let (zs, cft) = check_curves(zs, cft)?;
    let mut levels: Vec<f64> = zs.iter().chain(&cft).map(|p| p.1).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    Ok(levels
        .into_iter()
        .filter_map(|level| ratio_at(&zs, &cft, level, tolerance).map(|ratio| EfficiencyPoint { level, ratio }))
        .collect())
}

/// Mean accuracy per pretraining budget for one arch, axis and preset.
pub fn budget_curve(table: &ResultTable, arch: Arch, axis: Axis, preset: Preset) -> Vec<(f64, f64)> {
    let mut by_budget: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in table.select(|r| r.arch == arch && r.axis == axis && r.config == preset) {
        by_budget.entry(r.budget).or_default().push(r.final_accuracy);
    }
    by_budget.into_iter().map(|(b, v)| (b as f64, mean_std(&v).0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_max_is_applied() {
        let m = monotone(&[(2.0, 0.6), (1.0, 0.7), (3.0, 0.65)]);
        assert_eq!(m, vec![(1.0, 0.7), (2.0, 0.7), (3.0, 0.7)]);
    }

    #[test]
    fn plan_round_trips_through_toml() {
        let plan = ExperimentPlan::default();
        let text = toml::to_string(&plan).unwrap();
        assert_eq!(ExperimentPlan::from_toml(&text).unwrap(), plan);
    }

    #[test]
    fn iso_budget_is_checked() {
        let mut plan = ExperimentPlan::default();
        assert!(plan.validate().is_ok());
        plan.scaling.iso_pairs.push((5, 400));
        assert!(plan.validate().is_err());
    }
}
