//! `neuroadapt` command-line runner.
//!
//! Every subcommand reads an optional TOML experiment plan (`--config`),
//! applies flag overrides and writes its artifacts under `--out-dir`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mimalloc::MiMalloc;
use neuroadapt::bench::{bench_suite, write_bench_csv};
use neuroadapt::datagen::{Paradigm, SynthConfig};
use neuroadapt::ingest::write_container;
use neuroadapt::models::{Arch, Model, ModelConfig};
use neuroadapt::pretrain::pretrain_model;
use neuroadapt::report::emit_report;
use neuroadapt::runner::{
    budget_curve, data_efficiency_curve, load_dataset, run_ablation_suite, run_scaling_suite, split_partitions, Axis,
    DatasetSource, ExperimentPlan, ResultTable,
};
use neuroadapt::seed::{derive_seed, tag};
use neuroadapt::session::{run_session, Preset, SubjectStream};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser, Debug)]
#[command(
    name = "neuroadapt",
    version,
    about = "Calibration-free EEG decoder adaptation experiments"
)]
struct Cli {
    /// TOML experiment plan; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the plan).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct PlanOverrides {
    /// Comma-separated architectures (eegnet_lite, shallow_net).
    #[arg(long, value_delimiter = ',')]
    archs: Vec<Arch>,
    /// Comma-separated preset names, e.g. PRE-ZS,PRE+CFT (for `scale`, the
    /// scaling presets).
    #[arg(long, value_delimiter = ',')]
    presets: Vec<Preset>,
    /// Comma-separated replicate seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Pretraining epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Synthetic subjects to generate.
    #[arg(long)]
    subjects: Option<usize>,
    /// Synthetic trials per subject.
    #[arg(long)]
    trials: Option<usize>,
    /// Synthetic paradigm (mi, p300, ssvep).
    #[arg(long)]
    paradigm: Option<Paradigm>,
    /// Read the dataset from a container file instead of generating it.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic population and write it as a trial container.
    Gen {
        #[command(flatten)]
        plan: PlanOverrides,
        /// Output file (default: <out-dir>/dataset.bin).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pretrain one checkpoint per architecture and replicate seed on a
    /// fold's training subjects.
    Pretrain {
        #[command(flatten)]
        plan: PlanOverrides,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Align each training subject with its mean covariance first.
        #[arg(long)]
        align: bool,
    },
    /// Run one online session per preset and test subject.
    Adapt {
        #[command(flatten)]
        plan: PlanOverrides,
        /// Pretrained checkpoint; required by pretrained presets.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Subjects to stream (default: the test subjects of `--fold`).
        #[arg(long, value_delimiter = ',')]
        subject: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Run the component ablation suite and write the report.
    Ablate {
        #[command(flatten)]
        plan: PlanOverrides,
    },
    /// Run the pretraining-data scaling suite and write the report.
    Scale {
        #[command(flatten)]
        plan: PlanOverrides,
        /// Evaluate only the first `n` folds.
        #[arg(long)]
        max_folds: Option<usize>,
    },
    /// Time the three online stages.
    Bench {
        /// Comma-separated architectures.
        #[arg(long, value_delimiter = ',', default_value = "eegnet_lite,shallow_net")]
        archs: Vec<Arch>,
        /// Comma-separated CxT shapes.
        #[arg(long, value_delimiter = ',', default_value = "8x128,8x256")]
        dims: Vec<String>,
    },
}

fn base_plan(cli: &Cli) -> Result<ExperimentPlan> {
    let mut plan = match &cli.config {
        Some(path) => ExperimentPlan::load(path)?,
        None => ExperimentPlan::default(),
    };
    if let Some(seed) = cli.seed {
        plan.master_seed = seed;
    }
    Ok(plan)
}

fn apply(mut plan: ExperimentPlan, o: &PlanOverrides) -> Result<ExperimentPlan> {
    if !o.archs.is_empty() {
        plan.archs = o.archs.clone();
    }
    if !o.presets.is_empty() {
        plan.presets = o.presets.clone();
    }
    if !o.seeds.is_empty() {
        plan.seeds = o.seeds.clone();
    }
    if let Some(epochs) = o.epochs {
        plan.pretrain.epochs = epochs;
    }
    if let Some(path) = &o.dataset {
        plan.dataset = DatasetSource::Container { path: path.clone() };
    }
    if o.subjects.is_some() || o.trials.is_some() || o.paradigm.is_some() {
        let DatasetSource::Synthetic {
            config,
            n_subjects,
            trials_per_subject,
        } = &mut plan.dataset
        else {
            bail!("--subjects, --trials and --paradigm only apply to synthetic datasets");
        };
        if let Some(n) = o.subjects {
            *n_subjects = n;
        }
        if let Some(n) = o.trials {
            *trials_per_subject = n;
        }
        if let Some(p) = o.paradigm {
            let fresh = SynthConfig::new(p);
            config.paradigm = p;
            config.n_classes = fresh.n_classes;
            config.class_balance = fresh.class_balance;
        }
    }
    plan.validate()?;
    Ok(plan)
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_dims(dims: &[String]) -> Result<Vec<(usize, usize)>> {
    dims.iter()
        .map(|d| {
            let (c, t) = d.split_once('x').with_context(|| format!("dims {d:?} are not CxT"))?;
            Ok((c.parse()?, t.parse()?))
        })
        .collect()
}

fn report(table: &ResultTable, out: &Path) -> Result<()> {
    for path in emit_report(table, out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn write_efficiency(plan: &ExperimentPlan, table: &ResultTable, out: &Path) -> Result<()> {
    let Some(&finetuned) = plan
        .scaling
        .presets
        .iter()
        .find(|p| **p != Preset::PreZs && p.pretrained())
    else {
        return Ok(());
    };
    if !plan.scaling.presets.contains(&Preset::PreZs) {
        return Ok(());
    }
    let path = out.join("efficiency.csv");
    let mut w = csv_writer(&path)?;
    writeln!(w, "arch,axis,config,level,ratio")?;
    for &arch in &plan.archs {
        for axis in [Axis::Subjects, Axis::Trials] {
            let zs = budget_curve(table, arch, axis, Preset::PreZs);
            let cft = budget_curve(table, arch, axis, finetuned);
            if zs.is_empty() {
                continue;
            }
            for p in data_efficiency_curve(&zs, &cft, 0.01)? {
                writeln!(w, "{arch},{axis},{finetuned},{},{}", p.level, p.ratio)?;
            }
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn checkpoint_name(plan: &ExperimentPlan, arch: Arch, fold: usize, seed: u64) -> String {
    format!("{}_{arch}_fold{fold}_seed{seed}.ckpt", plan.name)
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out_dir.clone();
    let plan = base_plan(&cli)?;
    match &cli.command {
        Command::Gen { plan: o, output } => {
            let plan = apply(plan, o)?;
            if matches!(plan.dataset, DatasetSource::Container { .. }) {
                bail!("gen needs a synthetic dataset source");
            }
            let data = load_dataset(&plan)?;
            let path = output.clone().unwrap_or_else(|| out.join("dataset.bin"));
            if let Some(dir) = path.parent() {
                create(dir)?;
            }
            write_container(&data, &path)?;
            println!(
                "wrote {} ({} subjects, {} trials)",
                path.display(),
                data.subjects.len(),
                data.n_trials()
            );
        }
        Command::Pretrain { plan: o, fold, align } => {
            let mut plan = apply(plan, o)?;
            plan.pretrain.align = *align;
            let data = load_dataset(&plan)?;
            let parts = split_partitions(&plan, &data)?;
            let (train, _) = parts
                .get(*fold)
                .with_context(|| format!("fold {fold} is not in the split"))?;
            let mut pool = data.select(train);
            if let Some(n) = plan.pretrain_trials_per_subject {
                pool = pool.truncate_trials(n);
            }
            create(&out)?;
            for &arch in &plan.archs {
                for &seed in &plan.seeds {
                    let init = derive_seed(&[plan.master_seed, tag("pretrain"), tag(arch.name()), *fold as u64, seed]);
                    let mc = ModelConfig::new(arch, data.n_channels, data.n_timepoints, data.n_classes).with_seed(init);
                    let trained = pretrain_model(mc, &pool, &plan.pretrain)?;
                    let path = out.join(checkpoint_name(&plan, arch, *fold, seed));
                    trained.model.save(&path)?;
                    println!(
                        "wrote {} (final loss {:.4})",
                        path.display(),
                        trained.epoch_losses.last().copied().unwrap_or(f64::NAN)
                    );
                }
            }
        }
        Command::Adapt {
            plan: o,
            checkpoint,
            subject,
            fold,
        } => {
            let plan = apply(plan, o)?;
            let data = load_dataset(&plan)?;
            let subjects = if subject.is_empty() {
                let parts = split_partitions(&plan, &data)?;
                parts
                    .get(*fold)
                    .with_context(|| format!("fold {fold} is not in the split"))?
                    .1
                    .clone()
            } else {
                subject.clone()
            };
            let pretrained = checkpoint.as_deref().map(Model::load).transpose()?;
            create(&out)?;
            for &preset in &plan.presets {
                for &id in &subjects {
                    let s = data
                        .subject(id)
                        .with_context(|| format!("subject {id} is not in the dataset"))?;
                    let mut model = match (&pretrained, preset.pretrained()) {
                        (Some(m), true) => m.clone(),
                        (None, true) => bail!("preset {preset} needs --checkpoint"),
                        (_, false) => {
                            let arch = plan.archs[0];
                            let init = derive_seed(&[plan.master_seed, tag("init"), tag(arch.name()), id as u64]);
                            Model::build(
                                ModelConfig::new(arch, data.n_channels, data.n_timepoints, data.n_classes)
                                    .with_seed(init),
                            )?
                        }
                    };
                    model.reseed(derive_seed(&[
                        plan.master_seed,
                        tag("session"),
                        id as u64,
                        tag(preset.name()),
                    ]));
                    let metrics = run_session(&mut model, &mut SubjectStream::new(s), &preset.config(plan.cft))?;
                    let path = out.join(format!("session_{id}_{}.csv", preset.name().replace('+', "_")));
                    metrics.write_csv(id, csv_writer(&path)?)?;
                    println!(
                        "{preset} subject {id}: accuracy {:.3} balanced {:.3} ({})",
                        metrics.final_accuracy,
                        metrics.balanced_accuracy,
                        path.display()
                    );
                }
            }
        }
        Command::Ablate { plan: o } => {
            let plan = apply(plan, o)?;
            let data = load_dataset(&plan)?;
            let table = run_ablation_suite(&plan, &data)?;
            report(&table, &out)?;
        }
        Command::Scale { plan: o, max_folds } => {
            let mut plan = apply(plan, o)?;
            if max_folds.is_some() {
                plan.scaling.max_folds = *max_folds;
            }
            if !o.presets.is_empty() {
                plan.scaling.presets = o.presets.clone();
            }
            let data = load_dataset(&plan)?;
            let table = run_scaling_suite(&plan, &data)?;
            report(&table, &out)?;
            write_efficiency(&plan, &table, &out)?;
        }
        Command::Bench { archs, dims } => {
            let reports = bench_suite(archs, &parse_dims(dims)?, plan.master_seed)?;
            create(&out)?;
            let path = out.join("bench.csv");
            write_bench_csv(&reports, &path)?;
            for r in &reports {
                println!(
                    "{:<10} {:<11} {}x{}  median {:.3} ms  [p10 {:.3}, p90 {:.3}]",
                    r.stage.name(),
                    r.arch.name(),
                    r.n_channels,
                    r.n_timepoints,
                    r.median_ms,
                    r.p10_ms,
                    r.p90_ms
                );
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
