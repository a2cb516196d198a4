//! Experiment execution: per-fold pretrain, label selection, fine-tuning and
//! evaluation, plus the append-only JSONL result store and grid runner.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::access::{AccessAudit, Phase, SubjectPool};
use super::config::{ImbalanceMode, Protocol, ResolvedConfig};
use super::metrics::{evaluate, MetricsBundle};
use super::train::{class_aware_weights, finetune, two_stage_train, FinetuneOutcome};
use crate::dataio::{oversample_balanced, select_label_fraction, FoldPlan, N_STAGES};
use crate::error::{Result, SslError};
use crate::pretext::{pretrain, Algorithm, PretrainConfig, TraceRow};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub n_pretrain: usize,
    pub n_labeled: usize,
    pub metrics: MetricsBundle,
    pub pretrain_trace: Vec<TraceRow>,
    pub finetune_losses: Vec<f64>,
    pub finetune_steps: u64,
    pub checkpoint: Option<PathBuf>,
    pub audit: AccessAudit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub error: String,
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub per_class_f1: [MeanStd; N_STAGES],
}

impl RunSummary {
    pub fn of(folds: &[FoldResult]) -> Option<Self> {
        if folds.is_empty() {
            return None;
        }
        let col = |f: &dyn Fn(&MetricsBundle) -> f64| MeanStd::of(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        Some(Self {
            accuracy: col(&|m| m.accuracy),
            macro_f1: col(&|m| m.macro_f1),
            per_class_f1: std::array::from_fn(|c| col(&|m| m.per_class_f1[c])),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub config: ResolvedConfig,
    pub folds: Vec<FoldResult>,
    pub failures: Vec<FoldFailure>,
    pub summary: Option<RunSummary>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where pretrained encoders are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    /// Restrict cross-validation to these folds.
    pub only_folds: Option<Vec<usize>>,
}

/// Seed owned by one fold of a run.
pub fn fold_seed(cfg: &ResolvedConfig, fold: usize) -> u64 {
    seed::derive(cfg.seed, &[seed::tag("fold"), fold as u64])
}

/// Pretraining settings for `algorithm` on `fold`; the stream is keyed by
/// (seed, fold, algorithm).
pub fn fold_pretrain_config(cfg: &ResolvedConfig, fold: usize, algorithm: Algorithm) -> PretrainConfig {
    PretrainConfig {
        algorithm,
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        lr: cfg.pretrain.lr,
        weight_decay: cfg.pretrain.weight_decay,
        seed: seed::derive(fold_seed(cfg, fold), &[seed::tag(algorithm.id())]),
        pretext: cfg.pretext,
    }
}

/// One train/test split: optional pretraining on the unlabeled train
/// subjects, label-budgeted fine-tuning, evaluation on the test subjects.
pub fn run_fold(
    pool: &SubjectPool,
    cfg: &ResolvedConfig,
    fold: usize,
    train_ids: &[String],
    test_ids: &[String],
    opts: &RunOptions,
) -> Result<FoldResult> {
    if let Some(id) = train_ids.iter().find(|id| test_ids.contains(id)) {
        return Err(SslError::Isolation(format!("subject `{id}` is in both train and test")));
    }
    let mut audit = AccessAudit::default();
    let fold_seed = fold_seed(cfg, fold);
    let mut n_pretrain = 0;
    let mut trace = Vec::new();
    let mut checkpoint_path = None;
    let encoder = match cfg.algorithm.pretext() {
        None => None,
        Some(algorithm) => {
            let unlabeled = pool.take(&mut audit, Phase::Pretrain, train_ids)?;
            let unlabeled = if cfg.imbalance == ImbalanceMode::OversamplePretext {
                oversample_balanced(&unlabeled, fold_seed)?
            } else {
                unlabeled
            };
            n_pretrain = unlabeled.len();
            let all: Vec<usize> = (0..unlabeled.len()).collect();
            let out = pretrain(&cfg.model, &unlabeled.batch(&all), &fold_pretrain_config(cfg, fold, algorithm), None)?;
            trace = out.trace;
            if let Some(dir) = &opts.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| SslError::io(dir, e))?;
                let p = dir.join(format!("{}-{algorithm}-fold{fold}.ckpt", &cfg.hash()[..12]));
                out.checkpoint.save(&p)?;
                checkpoint_path = Some(p);
            }
            Some(out.checkpoint)
        }
    };
    let train = pool.take(&mut audit, Phase::Finetune, train_ids)?;
    let budget = select_label_fraction(&train, cfg.label_fraction, fold_seed)?;
    let labeled = train.subset(&budget.indices);
    let ft_seed = seed::derive(fold_seed, &[seed::tag("finetune")]);
    let FinetuneOutcome { model, steps, losses } = match cfg.imbalance {
        ImbalanceMode::TwoStage => two_stage_train(encoder.as_ref(), &cfg.model, &labeled, &cfg.finetune, ft_seed)?,
        ImbalanceMode::ClassAwareLoss => {
            let w = class_aware_weights(&labeled.class_counts())?;
            finetune(encoder.as_ref(), &cfg.model, &labeled, &cfg.finetune, Some(&w), ft_seed)?
        }
        ImbalanceMode::None | ImbalanceMode::OversamplePretext => {
            finetune(encoder.as_ref(), &cfg.model, &labeled, &cfg.finetune, None, ft_seed)?
        }
    };
    let test = pool.take(&mut audit, Phase::Evaluate, test_ids)?;
    let metrics = evaluate(&model, &test)?;
    audit.check_isolation(test_ids)?;
    Ok(FoldResult {
        fold,
        train_subjects: train_ids.to_vec(),
        test_subjects: test_ids.to_vec(),
        n_pretrain,
        n_labeled: labeled.len(),
        metrics,
        pretrain_trace: trace,
        finetune_losses: losses,
        finetune_steps: steps,
        checkpoint: checkpoint_path,
        audit,
    })
}

/// Cross-subject transfer: train on `source` only, test on `target`.
pub fn transfer_experiment(
    pool: &SubjectPool,
    cfg: &ResolvedConfig,
    source: &str,
    target: &str,
    opts: &RunOptions,
) -> Result<FoldResult> {
    if source == target {
        return Err(SslError::Isolation(format!("source and target are both `{source}`")));
    }
    run_fold(pool, cfg, 0, &[source.to_string()], &[target.to_string()], opts)
}

/// Runs every fold of `cfg` on `pool`. Fold errors are collected rather than
/// aborting the run.
pub fn run_experiment_on(pool: &SubjectPool, cfg: &ResolvedConfig, opts: &RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut folds = Vec::new();
    let mut failures = Vec::new();
    let mut record = |fold: usize, r: Result<FoldResult>| match r {
        Ok(f) => folds.push(f),
        Err(e) => failures.push(FoldFailure { fold, error: SslError::Fold { fold, source: Box::new(e) }.to_string() }),
    };
    match &cfg.protocol {
        Protocol::CrossValidation { folds: k } => {
            let plan = FoldPlan::new(&pool.subject_ids(), *k, cfg.seed)?;
            for fold in 0..*k {
                if opts.only_folds.as_ref().is_some_and(|f| !f.contains(&fold)) {
                    continue;
                }
                record(fold, run_fold(pool, cfg, fold, &plan.train_subjects(fold), plan.test_subjects(fold), opts));
            }
        }
        Protocol::Transfer { source, target } => record(0, transfer_experiment(pool, cfg, source, target, opts)),
    }
    Ok(RunResult {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        summary: RunSummary::of(&folds),
        folds,
        failures,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Loads the dataset named by `cfg.manifest` and runs it.
pub fn run_experiment(cfg: &ResolvedConfig, opts: &RunOptions) -> Result<RunResult> {
    let manifest = crate::dataio::DatasetManifest::load(&cfg.manifest)?;
    run_experiment_on(&SubjectPool::from_manifest(&manifest)?, cfg, opts)
}

/// Append-only JSONL file of [`RunResult`]s.
#[derive(Debug, Clone)]
pub struct ResultStore {
    path: PathBuf,
}

impl ResultStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, result: &RunResult) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| SslError::io(dir, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| SslError::io(&self.path, e))?;
        let mut line = serde_json::to_vec(result)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| SslError::io(&self.path, e))
    }

    /// All stored results; a missing file is an empty store.
    pub fn load(&self) -> Result<Vec<RunResult>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        load_results(&self.path)
    }

    pub fn contains(&self, hash: &str) -> Result<bool> {
        Ok(self.load()?.iter().any(|r| r.config_hash == hash))
    }
}

pub fn load_results(path: &Path) -> Result<Vec<RunResult>> {
    let f = std::fs::File::open(path).map_err(|e| SslError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| SslError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Outcome of one grid entry.
#[derive(Debug)]
pub enum GridOutcome {
    Ran(Box<RunResult>),
    /// Already present in the store.
    Skipped(String),
    Failed(SslError),
}

/// Runs configs on `threads` workers, skipping hashes already stored.
/// Results are appended by one writer in completion order.
pub fn run_grid(pool: &SubjectPool, configs: &[ResolvedConfig], store: &ResultStore, threads: usize, opts: &RunOptions) -> Result<Vec<GridOutcome>> {
    let done: Vec<String> = store.load()?.into_iter().map(|r| r.config_hash).collect();
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<GridOutcome>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    let writer = Mutex::new(());
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let hash = cfg.hash();
                let outcome = if done.contains(&hash) {
                    GridOutcome::Skipped(hash)
                } else {
                    match run_experiment_on(pool, cfg, opts) {
                        Ok(r) => {
                            let _guard = writer.lock().expect("writer lock");
                            match store.append(&r) {
                                Ok(()) => GridOutcome::Ran(Box::new(r)),
                                Err(e) => GridOutcome::Failed(e),
                            }
                        }
                        Err(e) => GridOutcome::Failed(e),
                    }
                };
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    Ok(slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every config visited")).collect())
}
