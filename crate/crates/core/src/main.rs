use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sleepssl::dataio::{load_raw_subject, preprocess_raw, store_subject, AnnotationScheme, DatasetManifest, FoldPlan};
use sleepssl::harness::{
    aggregate_report, generate_synthetic, load_results, run_experiment_on, run_grid, ExperimentConfig, GridOutcome,
    Layout, Method, Phase, Protocol, ResultStore, RunOptions, SubjectPool, SynthConfig, AccessAudit,
};
use sleepssl::harness::run::fold_pretrain_config;
use sleepssl::pretext::{pretrain, write_trace_csv};
use sleepssl::{Result, SslError};

#[derive(Parser)]
#[command(name = "sleepssl", about = "Label-efficiency benchmark for self-supervised sleep staging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert raw subject files (label bytes are scheme codes) into a dataset.
    Ingest {
        #[arg(long)]
        raw: Vec<PathBuf>,
        #[arg(long, default_value = "aasm")]
        scheme: AnnotationScheme,
        /// Keep at most this many minutes of wake around sleep.
        #[arg(long)]
        trim_minutes: Option<usize>,
        #[arg(long, default_value = "dataset")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 10)]
        fs: u32,
        /// Relative per-subject frequency shift.
        #[arg(long)]
        shift: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder on one fold's unlabeled training subjects.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        algo: Method,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one configuration, or its grid with `--grid`.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value = "results.jsonl")]
        results: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Train on one subject and test on another.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        algo: Method,
        #[arg(long, default_value = "results.jsonl")]
        results: PathBuf,
    },
    /// Emit CSV tables and SVG figures from stored results.
    Report {
        #[arg(long)]
        layout: Layout,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ingest(raw: &[PathBuf], scheme: AnnotationScheme, trim: Option<usize>, name: &str, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| SslError::io(out, e))?;
    let mut records = Vec::with_capacity(raw.len());
    for path in raw {
        let rec = preprocess_raw(&load_raw_subject(path)?, scheme, trim)?;
        store_subject(&rec, &out.join(format!("{}.ssb", rec.subject_id)))?;
        println!("{}: {} epochs", rec.subject_id, rec.n_epochs());
        records.push(rec);
    }
    let manifest = DatasetManifest::from_records(name, out, &records)?;
    println!("wrote {}", manifest.save(out)?.display());
    Ok(())
}

fn print_run(r: &sleepssl::harness::RunResult) {
    let c = &r.config;
    match &r.summary {
        Some(s) => println!(
            "{} {} frac={} imbalance={:?}: ACC {:.4} ± {:.4}  MF1 {:.4} ± {:.4}  ({} folds, {:.1}s)",
            c.algorithm,
            c.model.backbone,
            c.label_fraction,
            c.imbalance,
            s.accuracy.mean,
            s.accuracy.std,
            s.macro_f1.mean,
            s.macro_f1.std,
            r.folds.len(),
            r.wall_time_s
        ),
        None => println!("{} {}: no successful folds", c.algorithm, c.model.backbone),
    }
    for f in &r.failures {
        eprintln!("  fold {} failed: {}", f.fold, f.error);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { raw, scheme, trim_minutes, name, out } => ingest(&raw, scheme, trim_minutes, &name, &out),
        Command::Synth { subjects, epochs, fs, shift, seed, out } => {
            let cfg = SynthConfig { n_subjects: subjects, epochs_per_subject: epochs, sampling_rate_hz: fs, shift, seed, ..Default::default() };
            let m = generate_synthetic(&cfg, &out)?;
            println!("wrote {} subjects to {} (class counts {:?})", m.subjects.len(), out.display(), m.class_counts);
            Ok(())
        }
        Command::Pretrain { config, algo, fold, out } => {
            let cfg = ExperimentConfig { algorithm: algo, grid: None, ..ExperimentConfig::load(&config)? }.resolve()?;
            let algorithm = algo.pretext().ok_or_else(|| SslError::Config("supervised has no pretext task".into()))?;
            let Protocol::CrossValidation { folds } = cfg.protocol else {
                return Err(SslError::Config("pretrain uses the cross-validation protocol".into()));
            };
            let pool = SubjectPool::from_manifest(&DatasetManifest::load(&cfg.manifest)?)?;
            let plan = FoldPlan::new(&pool.subject_ids(), folds, cfg.seed)?;
            if fold >= folds {
                return Err(SslError::Config(format!("fold {fold} out of range for k={folds}")));
            }
            let set = pool.take(&mut AccessAudit::default(), Phase::Pretrain, &plan.train_subjects(fold))?;
            let all: Vec<usize> = (0..set.len()).collect();
            let pc = fold_pretrain_config(&cfg, fold, algorithm);
            std::fs::create_dir_all(&out).map_err(|e| SslError::io(&out, e))?;
            let trace_path = out.join(format!("{algorithm}-fold{fold}-trace.csv"));
            let outcome = pretrain(&cfg.model, &set.batch(&all), &pc, Some(&trace_path))?;
            write_trace_csv(&outcome.trace, &trace_path)?;
            let ckpt = out.join(format!("{algorithm}-fold{fold}.ckpt"));
            outcome.checkpoint.save(&ckpt)?;
            println!("wrote {} ({} steps) and {}", ckpt.display(), outcome.steps, trace_path.display());
            Ok(())
        }
        Command::Run { config, grid, results, threads, checkpoints } => {
            let base = ExperimentConfig::load(&config)?;
            let configs = if grid { base.expand_grid() } else { vec![ExperimentConfig { grid: None, ..base }] };
            let manifest = DatasetManifest::load(&configs[0].manifest)?;
            let resolved = configs.iter().map(|c| c.resolve_with(&manifest)).collect::<Result<Vec<_>>>()?;
            let pool = SubjectPool::from_manifest(&manifest)?;
            let opts = RunOptions { checkpoint_dir: checkpoints, only_folds: None };
            let store = ResultStore::new(results);
            let mut failed = false;
            for outcome in run_grid(&pool, &resolved, &store, threads, &opts)? {
                match outcome {
                    GridOutcome::Ran(r) => print_run(&r),
                    GridOutcome::Skipped(h) => println!("{h}: already in {}", store.path().display()),
                    GridOutcome::Failed(e) => {
                        eprintln!("run failed: {e}");
                        failed = true;
                    }
                }
            }
            if failed {
                return Err(SslError::Report("some runs failed".into()));
            }
            Ok(())
        }
        Command::Transfer { config, source, target, algo, results } => {
            let base = ExperimentConfig::load(&config)?;
            let cfg = ExperimentConfig {
                algorithm: algo,
                protocol: Protocol::Transfer { source, target },
                grid: None,
                ..base
            }
            .resolve()?;
            let pool = SubjectPool::from_manifest(&DatasetManifest::load(&cfg.manifest)?)?;
            let r = run_experiment_on(&pool, &cfg, &RunOptions::default())?;
            print_run(&r);
            ResultStore::new(results).append(&r)
        }
        Command::Report { layout, input, out } => {
            for p in aggregate_report(&load_results(&input)?, layout, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
