//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Substring arguments select criteria, e.g.
//! `cargo test -p neuroadapt-core --test acceptance -- fig4`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mimalloc::MiMalloc;
use nalgebra::DMatrix;
use neuroadapt::bench::{bench_suite, Protocol, Stage};
use neuroadapt::cft::CftConfig;
use neuroadapt::data::{PopulationDataset, Subject};
use neuroadapt::datagen::{gen_subject_session, SynthConfig};
use neuroadapt::models::{Arch, Model, ModelConfig};
use neuroadapt::pretrain::{pretrain_model, PretrainConfig};
use neuroadapt::report::{emit_report, summarize};
use neuroadapt::runner::*;
use neuroadapt::session::*;
use neuroadapt::stats::{bh_adjust, mean_std, paired_t_test_one_sided};
use neuroadapt::tensor::*;
use neuroadapt::uda::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

/// Pretraining epochs of every acceptance experiment.
const EPOCHS: usize = 20;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- gradients

fn random(shape: &[usize], seed: u64, f: impl Fn(f64) -> f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| f(rng.random::<f64>() * 2.0 - 1.0) as f32).collect(),
    )
    .unwrap()
}

fn param(shape: &[usize], seed: u64) -> Param {
    Param::new(random(shape, seed, |v| v))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let away = |v: f64| v.signum() * (0.1 + v.abs());
    let mut bn = BatchNorm::new(3);
    bn.gamma = param(&[3], 16);
    bn.beta = param(&[3], 17);
    let mut frozen = BatchNorm::new(2);
    frozen.running_mean = vec![0.3, -0.2];
    frozen.running_var = vec![1.5, 0.7];
    frozen.gamma.trainable = false;
    frozen.beta.trainable = false;
    let cases: Vec<(&str, Vec<Layer>, Tensor)> = vec![
        (
            "temporal_conv",
            vec![Layer::TemporalConv(TemporalConv {
                weight: param(&[3, 2, 5], 1),
                bias: Some(param(&[3], 2)),
                pad_left: 2,
                pad_right: 1,
            })],
            random(&[2, 2, 3, 11], 3, |v| v),
        ),
        (
            "spatial_conv",
            vec![Layer::SpatialConv(SpatialConv {
                weight: param(&[6, 1, 4], 6),
                groups: 3,
            })],
            random(&[2, 3, 4, 7], 7, |v| v),
        ),
        (
            "pointwise",
            vec![Layer::Pointwise(PointwiseConv {
                weight: param(&[4, 3], 10),
                bias: Some(param(&[4], 11)),
            })],
            random(&[2, 3, 2, 5], 12, |v| v),
        ),
        (
            "dense",
            vec![Layer::Dense(Dense {
                weight: param(&[3, 12], 13),
                bias: param(&[3], 14),
            })],
            random(&[4, 2, 1, 6], 15, |v| v),
        ),
        (
            "batch_norm",
            vec![Layer::BatchNorm(bn)],
            random(&[4, 3, 2, 5], 18, |v| 3.0 * v + 1.0),
        ),
        (
            "frozen_batch_norm",
            vec![
                Layer::Pointwise(PointwiseConv {
                    weight: param(&[2, 2], 19),
                    bias: None,
                }),
                Layer::BatchNorm(frozen),
            ],
            random(&[3, 2, 1, 4], 20, |v| v),
        ),
        ("elu", vec![Layer::Elu], random(&[2, 2, 2, 6], 21, away)),
        ("square", vec![Layer::Square], random(&[2, 2, 2, 6], 22, |v| v)),
        ("log", vec![Layer::Log], random(&[2, 2, 2, 6], 23, |v| 1.5 + v)),
        (
            "avg_pool",
            vec![Layer::AvgPool(AvgPool { kernel: 3, stride: 2 })],
            random(&[2, 2, 1, 9], 24, |v| v),
        ),
        (
            "dropout",
            vec![
                Layer::Pointwise(PointwiseConv {
                    weight: param(&[3, 2], 25),
                    bias: None,
                }),
                Layer::Dropout(Dropout { rate: 0.5 }),
            ],
            random(&[2, 2, 2, 8], 26, |v| v),
        ),
    ];
    let mut worst = 0.0f64;
    let mut check = |name: &str, net: &Network, input: &Tensor, step: f64| -> Result<(), String> {
        let report = ok(grad_check_with(net, input, 1e-3, step, |_, _| {}))?;
        ensure!(report.passed(), "{name}: failures {:?}", report.failures());
        worst = report
            .params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(worst.max(report.input_max_rel_error), f64::max);
        Ok(())
    };
    let n_cases = cases.len();
    for (name, layers, input) in cases {
        check(name, &Network::new(layers), &input, 1e-3)?;
    }
    for (arch, t) in [(Arch::EegnetLite, 32), (Arch::ShallowNet, 64)] {
        let model = ok(Model::build(ModelConfig::new(arch, 2, t, 2).with_seed(7)))?;
        check(arch.name(), model.network(), &random(&[3, 1, 2, t], 27, |v| v), 1e-4)?;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{n_cases} layer setups + 2 architectures, max rel err {worst:.2e} < 1e-3, {:.1}s < 60s",
        elapsed.as_secs_f64()
    ))
}

// ----------------------------------------------------------------- uda math

fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> SpdMatrix {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    SpdMatrix::new(&a * a.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.05).unwrap()
}

fn uda_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_recon = 0.0f64;
    for _ in 0..100 {
        let c = random_spd(&mut rng, 8);
        let m = ok(whitening_transform(&c, DEFAULT_EIG_FLOOR))?;
        worst_recon = worst_recon.max((&m * c.matrix() * m.transpose() - DMatrix::identity(8, 8)).amax());
    }
    ensure!(worst_recon < 1e-4, "whitening reconstruction error {worst_recon}");

    for metric in [Metric::Euclidean, Metric::Riemannian] {
        let c = random_spd(&mut rng, 6);
        let mut r = ok(CovReference::with_reference(c.clone(), DEFAULT_BETA, metric))?;
        ok(r.update(&c))?;
        let gap = (r.reference().unwrap().matrix() - c.matrix()).amax();
        ensure!(gap < 1e-12, "{metric:?} fixed point moved by {gap}");
    }
    let four = SpdMatrix::scaled_identity(3, 4.0);
    let mut e = ok(CovReference::with_reference(
        SpdMatrix::identity(3),
        0.9,
        Metric::Euclidean,
    ))?;
    ok(e.update(&four))?;
    let scalar = (e.reference().unwrap().matrix() - DMatrix::identity(3, 3) * 1.3).amax();
    ensure!(scalar < 1e-15, "euclidean scalar case off by {scalar}");
    let mut r = ok(CovReference::with_reference(
        SpdMatrix::identity(3),
        0.9,
        Metric::Riemannian,
    ))?;
    ok(r.update(&four))?;
    let riem = (r.reference().unwrap().matrix() - DMatrix::identity(3, 3) * 4f64.powf(0.1)).amax();
    ensure!(riem < 1e-6, "riemannian diagonal case off by {riem}");

    for metric in [Metric::Euclidean, Metric::Riemannian] {
        let mut r = ok(CovReference::new(DEFAULT_BETA, metric))?;
        let mut min_eig = f64::INFINITY;
        for i in 0..10_000 {
            ok(r.update(&random_spd(&mut rng, 4)))?;
            let reference = r.reference().unwrap();
            let asym = (reference.matrix() - reference.matrix().transpose()).amax();
            ensure!(
                asym < 1e-9,
                "{metric:?} reference lost symmetry ({asym}) at update {}",
                i + 1
            );
            min_eig = min_eig.min(ok(reference.min_eigenvalue())?);
        }
        ensure!(
            min_eig > 0.0 && r.trial_count() == 10_000,
            "{metric:?} min eigenvalue {min_eig}"
        );
    }
    Ok(format!(
        "recon err {worst_recon:.1e} over 100 SPD; scalar 1.3I err {scalar:.0e}; 4^0.1 I err {riem:.1e}; SPD over 10000 updates"
    ))
}

// ------------------------------------------------------ protocol invariants

fn protocol() -> Outcome {
    let cfg = SynthConfig::default();
    let subject = ok(gen_subject_session(&cfg, 1, 300))?;
    let build = |arch| Model::build(ModelConfig::new(arch, 8, 128, 2).with_seed(3)).unwrap();

    let mut m = build(Arch::EegnetLite);
    let mut adapter = ok(OnlineAdapter::new(&m, Preset::PreUdaCft.config(CftConfig::default())))?;
    let mut stream = SubjectStream::new(&subject);
    let initial = m.to_bytes();
    let mut max_window = 0;
    for i in 0..300 {
        ok(adapter.step(&mut m, &mut stream, i))?;
        if i < 20 {
            ensure!(
                m.to_bytes() == initial,
                "parameters changed during warm-up at trial {}",
                i + 1
            );
        }
        if i == 20 {
            ensure!(
                m.to_bytes() != initial && adapter.finetune_steps() == 3,
                "no update on trial 21"
            );
        }
        max_window = max_window.max(adapter.window().unwrap().len());
    }
    ensure!(max_window == 50, "window peaked at {max_window}");

    for arch in [Arch::EegnetLite, Arch::ShallowNet] {
        let mut m = build(arch);
        let features = m.feature_checksum();
        let metrics = ok(run_session(
            &mut m,
            &mut SubjectStream::new(&subject),
            &Preset::PreUdaCftDec.config(CftConfig::default()),
        ))?;
        ensure!(
            m.feature_checksum() == features,
            "{arch}: decision-only run changed the feature extractor"
        );
        ensure!(
            metrics.finetune_steps == 840,
            "{arch}: {} finetune steps",
            metrics.finetune_steps
        );
    }

    struct Flipped<'a> {
        inner: SubjectStream<'a>,
        flip: usize,
    }
    impl TrialSource for Flipped<'_> {
        fn len(&self) -> usize {
            self.inner.len()
        }
        fn trial(&mut self, index: usize) -> neuroadapt::Result<&Tensor> {
            self.inner.trial(index)
        }
        fn reveal_label(&mut self, index: usize, prediction: usize) -> neuroadapt::Result<usize> {
            let label = self.inner.reveal_label(index, prediction)?;
            Ok(if index == self.flip { 1 - label } else { label })
        }
    }
    let short = Subject {
        id: subject.id,
        trials: subject.trials[..80].to_vec(),
    };
    let cfg = Preset::PreUdaCft.config(CftConfig::default());
    let run = |flip: usize| {
        let mut m = build(Arch::ShallowNet);
        let p = run_session(
            &mut m,
            &mut Flipped {
                inner: SubjectStream::new(&short),
                flip,
            },
            &cfg,
        )
        .unwrap()
        .predictions;
        (p, m.checksum())
    };
    let (base, base_sum) = run(usize::MAX);
    for t in [20, 40, 79] {
        let (p, sum) = run(t);
        ensure!(
            p[..=t] == base[..=t],
            "flipping label {t} changed a prediction at or before it"
        );
        ensure!(sum != base_sum, "flipped label {t} never reached the model");
    }
    Ok("warm-up frozen through trial 20, update at 21; decision-only features fixed over 300 trials (both archs); window <= 50; label-flip audit clean".into())
}

// --------------------------------------------------------------- statistics

#[derive(Deserialize)]
struct TtestCase {
    x: Vec<f64>,
    y: Vec<f64>,
    p: f64,
}

fn brute_force_bh(p: &[f64]) -> Vec<f64> {
    let m = p.len() as f64;
    let rank = |v: f64| p.iter().filter(|&&q| q <= v).count() as f64;
    p.iter()
        .map(|&pi| {
            p.iter()
                .filter(|&&pj| rank(pj) >= rank(pi))
                .map(|&pj| pj * m / rank(pj))
                .fold(f64::INFINITY, f64::min)
                .min(1.0)
        })
        .collect()
}

fn statistics() -> Outcome {
    let cases: Vec<TtestCase> = ok(serde_json::from_str(include_str!("fixtures/ttest_reference.json")))?;
    ensure!(cases.len() >= 101, "only {} fixtures", cases.len());
    let mut worst = 0.0f64;
    for (i, c) in cases.iter().enumerate() {
        let p = ok(paired_t_test_one_sided(&c.x, &c.y))?;
        worst = worst.max((p - c.p).abs());
        ensure!((p - c.p).abs() < 1e-6, "fixture {i}: {p} vs {}", c.p);
    }
    ensure!(
        ok(bh_adjust(&[0.01, 0.02, 0.03]))? == vec![0.03, 0.03, 0.03],
        "BH hand fixture"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let n = rng.random_range(1..=25);
        let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let fast = ok(bh_adjust(&p))?;
        let slow = brute_force_bh(&p);
        ensure!(
            fast.iter().zip(&slow).all(|(a, b)| (a - b).abs() < 1e-12),
            "BH mismatch on {p:?}"
        );
    }
    Ok(format!(
        "{} t-test fixtures, max |dp| {worst:.1e} < 1e-6; BH hand fixture and 1000 brute-force vectors match",
        cases.len()
    ))
}

// ------------------------------------------------------------------ latency

fn latency() -> Outcome {
    let reports = ok(bench_suite(&[Arch::EegnetLite, Arch::ShallowNet], &[(8, 128)], 0))?;
    let mut medians = BTreeMap::new();
    for r in &reports {
        let p = Protocol::for_stage(r.stage);
        ensure!(
            (r.warmup_runs, r.measured_runs, r.batch_size) == (p.warmup_runs, p.measured_runs, p.batch_size),
            "{} {}: protocol {r:?}",
            r.arch,
            r.stage
        );
        ensure!(
            r.median_ms.is_finite() && r.median_ms > 0.0,
            "{} {}: median {}",
            r.arch,
            r.stage,
            r.median_ms
        );
        ensure!(
            r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms,
            "{} {}: quantiles out of order",
            r.arch,
            r.stage
        );
        medians.insert((r.arch, r.stage), r.median_ms);
    }
    ensure!(
        Protocol::for_stage(Stage::Predict).warmup_runs == 10
            && Protocol::for_stage(Stage::UdaUpdate).measured_runs == 100,
        "uda/predict protocol"
    );
    let cft = Protocol::for_stage(Stage::CftUpdate);
    ensure!(
        (cft.warmup_runs, cft.measured_runs, cft.batch_size) == (5, 20, 50),
        "cft protocol"
    );
    let mut detail = Vec::new();
    for arch in [Arch::EegnetLite, Arch::ShallowNet] {
        let (u, p, c) = (
            medians[&(arch, Stage::UdaUpdate)],
            medians[&(arch, Stage::Predict)],
            medians[&(arch, Stage::CftUpdate)],
        );
        ensure!(c > p, "{arch}: cft {c} ms <= predict {p} ms");
        detail.push(format!("{arch} uda {u:.3} / predict {p:.3} / cft {c:.1} ms"));
    }
    Ok(detail.join("; "))
}

// -------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let plan = ExperimentPlan {
        name: "determinism".into(),
        master_seed: 42,
        dataset: DatasetSource::Synthetic {
            config: SynthConfig::default(),
            n_subjects: 4,
            trials_per_subject: 40,
        },
        archs: vec![Arch::EegnetLite, Arch::ShallowNet],
        presets: Preset::ALL.to_vec(),
        seeds: vec![0],
        pretrain: PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        },
        ..ExperimentPlan::default()
    };
    let run = || -> Result<Vec<u8>, String> {
        let data = ok(load_dataset(&plan))?;
        let table = ok(run_ablation_suite(&plan, &data))?;
        let dir = ok(tempfile::tempdir())?;
        ok(emit_report(&table, dir.path()))?;
        ok(std::fs::read(dir.path().join("results.csv")))
    };
    let (a, b) = (run()?, run()?);
    ensure!(a == b, "results.csv differs between runs");
    let rows = a.iter().filter(|&&c| c == b'\n').count() - 1;
    ensure!(rows == 2 * 9 * 4, "{rows} rows");
    Ok(format!(
        "master seed 42, 9 presets x 2 archs: {rows} rows, {} bytes identical across two runs",
        a.len()
    ))
}

// ------------------------------------------------------------------ figure 2

struct Fig2 {
    data: PopulationDataset,
    table: ResultTable,
    elapsed: Duration,
}

fn fig2_plan() -> ExperimentPlan {
    ExperimentPlan {
        name: "fig2".into(),
        master_seed: 7,
        dataset: DatasetSource::Synthetic {
            config: SynthConfig::default(),
            n_subjects: 30,
            trials_per_subject: 300,
        },
        archs: vec![Arch::EegnetLite],
        presets: vec![Preset::PreZs, Preset::PreCft, Preset::CftOnly],
        seeds: SEEDS.to_vec(),
        split: Split::Holdout {
            train: (0..20).collect(),
            test: (20..30).collect(),
        },
        pretrain_trials_per_subject: Some(200),
        pretrain: PretrainConfig {
            epochs: EPOCHS,
            ..PretrainConfig::default()
        },
        ..ExperimentPlan::default()
    }
}

fn fig2_run() -> &'static Result<Fig2, String> {
    static CELL: OnceLock<Result<Fig2, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let plan = fig2_plan();
        let data = ok(load_dataset(&plan))?;
        let table = ok(run_ablation_suite(&plan, &data))?;
        Ok(Fig2 {
            data,
            table,
            elapsed: start.elapsed(),
        })
    })
}

fn preset_mean(table: &ResultTable, preset: Preset) -> f64 {
    let acc: Vec<f64> = table
        .select(|r| r.config == preset)
        .iter()
        .map(|r| r.final_accuracy)
        .collect();
    mean_std(&acc).0
}

/// Wall-clock budget scaled from a 4-core machine to the cores available.
fn scaled_budget(minutes_on_four_cores: f64) -> Duration {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    Duration::from_secs_f64(minutes_on_four_cores * 60.0 * 4.0 / cores as f64)
}

fn fig2() -> Outcome {
    let run = fig2_run().as_ref().map_err(Clone::clone)?;
    let t = &run.table;
    ensure!(t.rows.len() == 3 * 10 * SEEDS.len(), "{} rows", t.rows.len());
    let (zs, cft, scratch) = (
        preset_mean(t, Preset::PreZs),
        preset_mean(t, Preset::PreCft),
        preset_mean(t, Preset::CftOnly),
    );
    let summary = ok(summarize(t))?;
    let row = summary
        .iter()
        .find(|s| s.config == Preset::PreCft)
        .ok_or("no PRE+CFT summary")?;
    let q = row.p_adjusted.ok_or("PRE+CFT was not tested")?;
    ensure!(cft >= zs + 0.05, "PRE+CFT {cft:.3} < PRE-ZS {zs:.3} + 0.05");
    ensure!(q < 0.05, "BH-adjusted p = {q}");
    ensure!(cft > scratch, "PRE+CFT {cft:.3} <= CFT-only {scratch:.3}");
    let budget = scaled_budget(15.0);
    ensure!(run.elapsed < budget, "took {:?}, budget {budget:?}", run.elapsed);
    Ok(format!(
        "PRE+CFT {cft:.3} vs PRE-ZS {zs:.3} (+{:.3}, BH p {q:.1e}); CFT-only {scratch:.3}; {:.0}s (budget {:.0}s)",
        cft - zs,
        run.elapsed.as_secs_f64(),
        budget.as_secs_f64()
    ))
}

fn zero_shot_above_chance() -> Outcome {
    let run = fig2_run().as_ref().map_err(Clone::clone)?;
    let zs = preset_mean(&run.table, Preset::PreZs);
    let chance = 1.0 / run.data.n_classes as f64;
    ensure!(zs >= chance + 0.10, "zero-shot {zs:.3} vs chance {chance}");
    Ok(format!("held-out zero-shot {zs:.3} >= chance {chance} + 0.10"))
}

fn drift_realism() -> Outcome {
    let run = fig2_run().as_ref().map_err(Clone::clone)?;
    let plan = fig2_plan();
    let train = run.data.select(&(0..20).collect::<Vec<_>>()).truncate_trials(200);
    let mc = ModelConfig::new(Arch::EegnetLite, 8, 128, 2).with_seed(11);
    let mut model = ok(pretrain_model(mc, &train, &plan.pretrain))?.model;
    let (mut first, mut last) = (0.0, 0.0);
    for id in 20..30 {
        let s = run.data.subject(id).ok_or("missing test subject")?;
        let m = ok(run_session(
            &mut model,
            &mut SubjectStream::new(s),
            &Preset::PreZs.config(plan.cft),
        ))?;
        let q = m.per_trial_correct.len() / 4;
        let frac = |c: &[bool]| c.iter().filter(|&&b| b).count() as f64 / c.len() as f64;
        first += frac(&m.per_trial_correct[..q]) / 10.0;
        last += frac(&m.per_trial_correct[m.per_trial_correct.len() - q..]) / 10.0;
    }
    ensure!(
        last <= first,
        "frozen model last quarter {last:.3} > first quarter {first:.3}"
    );
    Ok(format!(
        "frozen model quarter accuracy first {first:.3} >= last {last:.3}"
    ))
}

// ------------------------------------------------------------------ figure 4

fn scaling_run() -> &'static Result<ResultTable, String> {
    static CELL: OnceLock<Result<ResultTable, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let plan = ExperimentPlan {
            name: "fig4".into(),
            master_seed: 11,
            dataset: DatasetSource::Synthetic {
                config: SynthConfig::default(),
                n_subjects: 20,
                trials_per_subject: 400,
            },
            archs: vec![Arch::EegnetLite],
            seeds: SEEDS.to_vec(),
            pretrain: PretrainConfig {
                epochs: EPOCHS,
                ..PretrainConfig::default()
            },
            scaling: ScalingAxes {
                max_folds: Some(1),
                ..ScalingAxes::default()
            },
            ..ExperimentPlan::default()
        };
        let data = ok(load_dataset(&plan))?;
        ok(run_scaling_suite(&plan, &data))
    })
}

/// Per-point mean and standard error over seed means.
fn seed_stats(table: &ResultTable, axis: Axis) -> Vec<(usize, usize, f64, f64)> {
    let mut by: BTreeMap<(usize, usize), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in table.select(|r| r.axis == axis && r.config == Preset::PreZs) {
        by.entry((r.n_subjects, r.trials_per_subject))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r.final_accuracy);
    }
    by.into_iter()
        .map(|((s, t), seeds)| {
            let means: Vec<f64> = seeds.values().map(|v| mean_std(v).0).collect();
            let (m, sd) = mean_std(&means);
            (s, t, m, sd / (means.len() as f64).sqrt())
        })
        .collect()
}

fn monotone(points: &[(f64, f64, f64)]) -> Result<(), String> {
    for w in points.windows(2) {
        let (x0, m0, se0) = w[0];
        let (x1, m1, se1) = w[1];
        ensure!(
            m1 >= m0 - se0.max(se1),
            "{x1}: {m1:.3} drops below {x0}: {m0:.3} by more than one standard error"
        );
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.log2()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let slope: f64 = lx.iter().zip(points).map(|(x, p)| (x - mx) * (p.1 - my)).sum::<f64>();
    ensure!(slope > 0.0, "non-positive trend slope");
    ensure!(points.last().unwrap().1 >= points[0].1, "max point below min point");
    Ok(())
}

fn fig4_axes() -> Outcome {
    let table = scaling_run().as_ref().map_err(Clone::clone)?;
    let subjects: Vec<(f64, f64, f64)> = seed_stats(table, Axis::Subjects)
        .iter()
        .map(|&(s, _, m, se)| (s as f64, m, se))
        .collect();
    let trials: Vec<(f64, f64, f64)> = seed_stats(table, Axis::Trials)
        .iter()
        .map(|&(_, t, m, se)| (t as f64, m, se))
        .collect();
    ensure!(
        subjects.len() == 4 && trials.len() == 4,
        "axis points {} / {}",
        subjects.len(),
        trials.len()
    );
    monotone(&subjects).map_err(|e| format!("subject axis: {e}"))?;
    monotone(&trials).map_err(|e| format!("trial axis: {e}"))?;
    let fmt = |p: &[(f64, f64, f64)]| {
        p.iter()
            .map(|(x, m, _)| format!("{x}:{m:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok(format!("subjects [{}]; trials [{}]", fmt(&subjects), fmt(&trials)))
}

fn fig4_iso() -> Outcome {
    let table = scaling_run().as_ref().map_err(Clone::clone)?;
    let iso = seed_stats(table, Axis::Iso);
    ensure!(iso.len() == 3, "{} iso points", iso.len());
    ensure!(iso.iter().all(|p| p.0 * p.1 == 1600), "budget bookkeeping");
    let means: Vec<f64> = iso.iter().map(|p| p.2).collect();
    let spread =
        means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - means.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure!(spread <= 0.05, "iso spread {spread:.3} > 0.05 ({means:?})");
    let pts = iso
        .iter()
        .map(|(s, t, m, _)| format!("{s}x{t}:{m:.3}"))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(format!("[{pts}] spread {spread:.3} <= 0.05"))
}

fn fig4_efficiency() -> Outcome {
    let plan = ExperimentPlan {
        name: "efficiency".into(),
        master_seed: 13,
        dataset: DatasetSource::Synthetic {
            config: SynthConfig::default(),
            n_subjects: 10,
            trials_per_subject: 200,
        },
        archs: vec![Arch::EegnetLite],
        seeds: vec![0, 1],
        pretrain: PretrainConfig {
            epochs: EPOCHS,
            ..PretrainConfig::default()
        },
        scaling: ScalingAxes {
            subject_counts: vec![],
            trial_counts: vec![25, 50, 100, 200],
            iso_pairs: vec![],
            iso_budget: None,
            folds: 5,
            max_folds: Some(1),
            presets: vec![Preset::PreZs, Preset::PreCft],
        },
        ..ExperimentPlan::default()
    };
    let data = ok(load_dataset(&plan))?;
    let table = ok(run_scaling_suite(&plan, &data))?;
    let zs = budget_curve(&table, Arch::EegnetLite, Axis::Trials, Preset::PreZs);
    let cft = budget_curve(&table, Arch::EegnetLite, Axis::Trials, Preset::PreCft);
    let curve = ok(data_efficiency_curve(&zs, &cft, 0.01))?;
    ensure!(!curve.is_empty(), "empty efficiency curve");
    let mut finite = 0;
    for p in &curve {
        if let Ratio::Finite(r) = p.ratio {
            ensure!(r <= 1.0, "ratio {r} > 1 at level {}", p.level);
            finite += 1;
        }
    }
    let zs_max = zs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let cft_max = cft.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let unreachable = curve.iter().filter(|p| p.ratio == Ratio::Unreachable).count();
    if cft_max > zs_max + 0.01 {
        ensure!(
            unreachable > 0,
            "ZS saturates at {zs_max:.3} below CFT {cft_max:.3} without a sentinel"
        );
    }
    let probe = ok(efficiency_ratio(&zs, &cft, cft_max, 0.01))?;
    ensure!(
        cft_max <= zs_max + 0.01 || probe == Some(Ratio::Unreachable),
        "CFT ceiling {cft_max:.3} reported as {probe:?}"
    );
    Ok(format!(
        "{finite} finite ratios <= 1.0, {unreachable} unreachable (ZS max {zs_max:.3}, CFT max {cft_max:.3})"
    ))
}

// -------------------------------------------------------------------- driver

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("gradients: every layer passes grad_check", gradients),
        ("uda: whitening, EMA and streaming SPD", uda_math),
        ("protocol: warm-up, decision-only, window, leakage", protocol),
        ("stats: t-test and BH oracles", statistics),
        ("latency: bench protocol and orderings", latency),
        ("determinism: ablation results.csv", determinism),
        ("fig2: PRE+CFT over PRE-ZS and CFT-only", fig2),
        ("pretrain: zero-shot above chance", zero_shot_above_chance),
        ("datagen: drift degrades a frozen model", drift_realism),
        ("fig4 rows 1-2: subject and trial axes", fig4_axes),
        ("fig4 row 3: iso-budget consistency", fig4_iso),
        ("fig4 row 4: data-efficiency ratios", fig4_efficiency),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
