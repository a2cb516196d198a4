mod common;

use std::path::Path;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sleepssl::backbone::{BackboneKind, Model, ModelSpec};
use sleepssl::dataio::{class_counts, oversample_balanced, DatasetManifest, EpochSet, FoldPlan, Stage};
use sleepssl::harness::report::{fig2_curves, fig3_deltas, table2};
use sleepssl::harness::run::{fold_seed, transfer_experiment};
use sleepssl::harness::synth::{stage_counts, DEFAULT_PRIORS};
use sleepssl::harness::{
    aggregate_report, class_aware_weights, evaluate, finetune, generate_synthetic, run_experiment_on, run_fold,
    run_grid, synthesize_subjects, two_stage_train, ExperimentConfig, GridOutcome, ImbalanceMode, Layout, Method,
    MetricsBundle, Phase, Protocol, ResolvedConfig, ResultStore, RunOptions, SubjectPool, SynthConfig, TrainBudget,
};
use sleepssl::seed;
use sleepssl::SslError;

fn small_synth() -> SynthConfig {
    SynthConfig { n_subjects: 4, epochs_per_subject: 60, ..Default::default() }
}

fn dataset(dir: &Path) -> (DatasetManifest, SubjectPool) {
    let m = generate_synthetic(&small_synth(), dir).unwrap();
    let pool = SubjectPool::from_manifest(&m).unwrap();
    (m, pool)
}

fn quick(m: &DatasetManifest, algorithm: Method, folds: usize) -> ResolvedConfig {
    ExperimentConfig {
        manifest: m.root.join("manifest.json"),
        algorithm,
        label_fraction: 0.5,
        protocol: Protocol::CrossValidation { folds },
        pretrain: TrainBudget { epochs: 1, batch_size: 32, ..Default::default() },
        finetune: TrainBudget { epochs: 2, batch_size: 32, ..Default::default() },
        ..Default::default()
    }
    .resolve_with(m)
    .unwrap()
}

fn labeled_set(counts: [usize; 5]) -> EpochSet {
    let cfg = SynthConfig { n_subjects: 1, epochs_per_subject: 400, ..Default::default() };
    let rec = &synthesize_subjects(&cfg).unwrap()[0];
    let mut idx = Vec::new();
    for s in Stage::ALL {
        idx.extend(rec.labels.iter().enumerate().filter(|(_, &l)| l == s).map(|(i, _)| i).take(counts[s.index()]));
    }
    EpochSet::from_records([rec]).unwrap().subset(&idx)
}

proptest! {
    #[test]
    fn metrics_match_a_brute_force_confusion_matrix(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..300)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = MetricsBundle::from_predictions(&pred, &truth).unwrap();
        let (cm, acc, mf1, f1) = confusion_oracle(&pred, &truth, 5);
        prop_assert_eq!(m.confusion.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), cm);
        prop_assert!((m.accuracy - acc).abs() < 1e-12);
        prop_assert!((m.macro_f1 - mf1).abs() < 1e-12);
        for c in 0..5 {
            prop_assert!((m.per_class_f1[c] - f1[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn hand_computed_three_class_case() {
    // truth 0,0,0,1,1,2 ; pred 0,0,1,1,2,2
    let m = MetricsBundle::from_predictions(&[0, 0, 1, 1, 2, 2], &[0, 0, 0, 1, 1, 2]).unwrap();
    assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-12);
    let f1 = [2.0 * 2.0 / 5.0, 2.0 * 1.0 / 4.0, 2.0 * 1.0 / 3.0];
    for c in 0..3 {
        assert!((m.per_class_f1[c] - f1[c]).abs() < 1e-12);
    }
    assert!((m.macro_f1 - f1.iter().sum::<f64>() / 3.0).abs() < 1e-12);
}

#[test]
fn class_weights_follow_the_square_root_rule() {
    let w = class_aware_weights(&[100, 25, 100, 25, 100]).unwrap();
    assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
    assert!((w.iter().sum::<f64>() / 5.0 - 1.0).abs() < 1e-12);
    assert!(matches!(class_aware_weights(&[1, 0, 1, 1, 1]), Err(SslError::EmptyClass(_))));
}

#[test]
fn zero_epoch_finetune_keeps_the_loaded_encoder() {
    let spec = ModelSpec::desk(BackboneKind::Cnn1d, 10);
    let enc = Model::build(&spec, 99).unwrap().encoder_checkpoint().unwrap();
    let set = labeled_set([4, 4, 4, 4, 4]);
    let budget = TrainBudget { epochs: 0, ..Default::default() };
    let out = finetune(Some(&enc), &spec, &set, &budget, None, 1).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(out.model.encoder_checkpoint().unwrap().tensors, enc.tensors);
}

#[test]
fn two_stage_training_runs_both_stages() {
    let spec = ModelSpec::desk(BackboneKind::Cnn1d, 10);
    let set = labeled_set([10, 3, 20, 5, 7]);
    let balanced = oversample_balanced(&set, 4).unwrap();
    assert_eq!(balanced.class_counts(), [20; 5]);
    let budget = TrainBudget { epochs: 2, batch_size: 16, ..Default::default() };
    let out = two_stage_train(None, &spec, &set, &budget, 4).unwrap();
    let per_stage = |n: usize| (budget.epochs * budget.steps_per_epoch(n)) as u64;
    assert_eq!(out.steps, per_stage(balanced.len()) + per_stage(set.len()));
    assert_eq!(out.losses.len(), 2 * budget.epochs);
    // Equal-size stages take exactly twice the steps of one stage.
    let even = labeled_set([6; 5]);
    assert_eq!(two_stage_train(None, &spec, &even, &budget, 4).unwrap().steps, 2 * per_stage(even.len()));
}

#[test]
fn two_stage_training_beats_the_majority_baseline() {
    let recs = synthesize_subjects(&SynthConfig { n_subjects: 3, epochs_per_subject: 300, ..Default::default() }).unwrap();
    let train = EpochSet::from_records(&recs[..2]).unwrap();
    let test = EpochSet::from_records(&recs[2..]).unwrap();
    let spec = ModelSpec::desk(BackboneKind::Cnn1d, 10);
    let budget = TrainBudget { epochs: 15, batch_size: 64, ..Default::default() };
    let model = two_stage_train(None, &spec, &train, &budget, 0).unwrap().model;
    let truth = test.batch_labels(&(0..test.len()).collect::<Vec<_>>());
    let majority = MetricsBundle::from_predictions(&vec![Stage::N2.index(); truth.len()], &truth).unwrap();
    let m = evaluate(&model, &test).unwrap();
    assert!(m.macro_f1 > majority.macro_f1 + 0.1, "{} vs majority {}", m.macro_f1, majority.macro_f1);
}

#[test]
fn folds_keep_test_subjects_out_of_training() {
    let dir = tempfile::tempdir().unwrap();
    let (m, pool) = dataset(dir.path());
    let cfg = quick(&m, Method::SimClr, 2);
    let plan = FoldPlan::new(&pool.subject_ids(), 2, cfg.seed).unwrap();
    let r = run_fold(&pool, &cfg, 0, &plan.train_subjects(0), plan.test_subjects(0), &RunOptions::default()).unwrap();
    let digest_of = |id: &str| sleepssl::harness::access::record_digest(&m.load_subject(id).unwrap());
    let test_digests: Vec<String> = r.test_subjects.iter().map(|s| digest_of(s)).collect();
    let mut eval = r.audit.digests(Phase::Evaluate).into_iter().map(String::from).collect::<Vec<_>>();
    eval.sort();
    let mut want = test_digests.clone();
    want.sort();
    assert_eq!(eval, want);
    for phase in [Phase::Pretrain, Phase::Finetune] {
        let seen = r.audit.digests(phase);
        assert!(!seen.is_empty());
        assert!(seen.iter().all(|d| !test_digests.iter().any(|t| t == d)), "{phase:?} read a test subject");
    }
    let ids = pool.subject_ids();
    let overlap = vec![ids[0].clone()];
    assert!(matches!(run_fold(&pool, &cfg, 0, &overlap, &overlap, &RunOptions::default()), Err(SslError::Isolation(_))));
}

#[test]
fn transfer_refuses_a_single_subject_and_isolates_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let (m, pool) = dataset(dir.path());
    let cfg = quick(&m, Method::Cpc, 2);
    assert!(matches!(
        transfer_experiment(&pool, &cfg, "synth00", "synth00", &RunOptions::default()),
        Err(SslError::Isolation(_))
    ));
    let r = transfer_experiment(&pool, &cfg, "synth00", "synth01", &RunOptions::default()).unwrap();
    assert!(r.audit.events.iter().all(|e| (e.subject_id == "synth01") == (e.phase == Phase::Evaluate)));
    assert_eq!(r.metrics.n_eval, 60);
}

#[test]
fn cross_validation_scores_every_fold_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (m, pool) = dataset(dir.path());
    let cfg = quick(&m, Method::ClsTran, 4);
    let a = run_experiment_on(&pool, &cfg, &RunOptions::default()).unwrap();
    assert_eq!(a.folds.len(), 4);
    assert!(a.failures.is_empty());
    let b = run_experiment_on(&pool, &cfg, &RunOptions::default()).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    for (x, y) in a.folds.iter().zip(&b.folds) {
        assert_eq!(x.metrics, y.metrics);
    }
    let s = a.summary.unwrap();
    let mf1: Vec<f64> = a.folds.iter().map(|f| f.metrics.macro_f1).collect();
    assert!((s.macro_f1.mean - mf1.iter().sum::<f64>() / 4.0).abs() < 1e-12);
}

#[test]
fn full_label_supervised_run_is_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let (m, pool) = dataset(dir.path());
    let cfg = ResolvedConfig { label_fraction: 1.0, ..quick(&m, Method::Supervised, 2) };
    let r = run_experiment_on(&pool, &cfg, &RunOptions { only_folds: Some(vec![1]), ..Default::default() }).unwrap();
    let plan = FoldPlan::new(&pool.subject_ids(), 2, cfg.seed).unwrap();
    let recs: Vec<_> = plan.train_subjects(1).iter().map(|id| m.load_subject(id).unwrap()).collect();
    let train = EpochSet::from_records(&recs).unwrap();
    let test_recs: Vec<_> = plan.test_subjects(1).iter().map(|id| m.load_subject(id).unwrap()).collect();
    let test = EpochSet::from_records(&test_recs).unwrap();
    let ft_seed = seed::derive(fold_seed(&cfg, 1), &[seed::tag("finetune")]);
    let plain = finetune(None, &cfg.model, &train, &cfg.finetune, None, ft_seed).unwrap();
    assert_eq!(r.folds[0].n_labeled, train.len());
    assert_eq!(r.folds[0].metrics, evaluate(&plain.model, &test).unwrap());
}

#[test]
fn grid_results_persist_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (m, pool) = dataset(&dir.path().join("data"));
    let base = ExperimentConfig {
        manifest: dir.path().join("data/manifest.json"),
        protocol: Protocol::CrossValidation { folds: 2 },
        finetune: TrainBudget { epochs: 1, ..Default::default() },
        pretrain: TrainBudget { epochs: 1, ..Default::default() },
        grid: Some(sleepssl::harness::GridSpec {
            algorithm: Some(vec![Method::Supervised, Method::ClsTran]),
            imbalance: Some(vec![ImbalanceMode::None, ImbalanceMode::OversamplePretext]),
            ..Default::default()
        }),
        ..Default::default()
    };
    let configs: Vec<ResolvedConfig> = base.expand_grid().iter().map(|c| c.resolve_with(&m).unwrap()).collect();
    assert_eq!(configs.len(), 3);
    let store = ResultStore::new(dir.path().join("results.jsonl"));
    let first = run_grid(&pool, &configs, &store, 2, &RunOptions::default()).unwrap();
    assert!(first.iter().all(|o| matches!(o, GridOutcome::Ran(_))));
    let stored = store.load().unwrap();
    assert_eq!(stored.len(), 3);
    let again = run_grid(&pool, &configs, &store, 1, &RunOptions::default()).unwrap();
    assert!(again.iter().all(|o| matches!(o, GridOutcome::Skipped(_))));
    assert_eq!(store.load().unwrap(), stored);
}

fn fake_result(m: &DatasetManifest, algorithm: Method, frac: f64, imbalance: ImbalanceMode, fold_mf1: &[f64]) -> sleepssl::harness::RunResult {
    let cfg = ResolvedConfig { label_fraction: frac, imbalance, ..quick(m, algorithm, 2) };
    let folds = fold_mf1
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            // Each prediction is right with probability `target`, seeded.
            let mut r = rng(i as u64 + (target * 1e6) as u64);
            let truth: Vec<usize> = (0..200).map(|k| k % 5).collect();
            let pred: Vec<usize> = truth.iter().map(|&t| if r.random_bool(target) { t } else { (t + 1) % 5 }).collect();
            sleepssl::harness::FoldResult {
                fold: i,
                train_subjects: vec![],
                test_subjects: vec![],
                n_pretrain: 0,
                n_labeled: 0,
                metrics: MetricsBundle::from_predictions(&pred, &truth).unwrap(),
                pretrain_trace: vec![],
                finetune_losses: vec![],
                finetune_steps: 0,
                checkpoint: None,
                audit: Default::default(),
            }
        })
        .collect::<Vec<_>>();
    sleepssl::harness::RunResult {
        config_hash: cfg.hash(),
        summary: sleepssl::harness::RunSummary::of(&folds),
        config: cfg,
        folds,
        failures: vec![],
        wall_time_s: 0.0,
    }
}

#[test]
fn reports_follow_their_schemas_and_reemit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = dataset(&dir.path().join("data"));
    let mut results = Vec::new();
    for algo in [Method::Supervised, Method::SimClr] {
        for frac in [0.01, 0.05, 0.1, 1.0] {
            results.push(fake_result(&m, algo, frac, ImbalanceMode::None, &[0.5 + frac * 0.3, 0.55 + frac * 0.3]));
        }
    }
    results.push(fake_result(&m, Method::SimClr, 0.01, ImbalanceMode::OversamplePretext, &[0.6, 0.62]));

    let t = table2(&results[..1]).unwrap();
    assert_eq!(t.header.len(), 5 + 7 + 1);
    assert_eq!(&t.header[5..12], &["W", "N1", "N2", "N3", "REM", "ACC", "MF1"]);
    assert_eq!(t.rows[0].len(), t.header.len());

    let curves = fig2_curves(&results).unwrap();
    let sup = &curves[&(Method::Supervised, "cnn1d".to_string())];
    assert_eq!(sup.len(), 4);
    assert!(sup.windows(2).all(|w| w[0].0 < w[1].0));

    let deltas = fig3_deltas(&results).unwrap();
    assert_eq!(deltas.len(), 1);
    let mean = |r: &sleepssl::harness::RunResult| r.folds.iter().map(|f| f.metrics.macro_f1).sum::<f64>() / r.folds.len() as f64;
    assert!((deltas[0].delta - (mean(&results[8]) - mean(&results[4])).abs()).abs() < 1e-12);

    for layout in [Layout::Table2, Layout::Fig2, Layout::Fig3] {
        let a = aggregate_report(&results, layout, &dir.path().join("a")).unwrap();
        let b = aggregate_report(&results, layout, &dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(&a[0]).unwrap(), std::fs::read(&b[0]).unwrap(), "{layout}");
        assert!(a.iter().all(|p| p.exists()));
    }

    let other_dir = tempfile::tempdir().unwrap();
    let shifted = generate_synthetic(&SynthConfig { shift: Some(0.1), ..small_synth() }, other_dir.path()).unwrap();
    let mixed = vec![results[0].clone(), fake_result(&shifted, Method::Cpc, 0.1, ImbalanceMode::None, &[0.5])];
    assert!(matches!(aggregate_report(&mixed, Layout::Table2, dir.path()), Err(SslError::Report(_))));
}

#[test]
fn synthetic_priors_follow_the_default_histogram() {
    let recs = synthesize_subjects(&SynthConfig { n_subjects: 3, epochs_per_subject: 500, ..Default::default() }).unwrap();
    let labels: Vec<Stage> = recs.iter().flat_map(|r| r.labels.iter().copied()).collect();
    let counts = class_counts(&labels);
    for c in 0..5 {
        let share = counts[c] as f64 / labels.len() as f64;
        assert!((share - DEFAULT_PRIORS[c]).abs() <= 0.01, "class {c}: {share}");
    }
    assert_eq!(stage_counts(&DEFAULT_PRIORS, 500).iter().sum::<usize>(), 500);
}

fn dominant_frequency(x: &[f32], fs: f64) -> f64 {
    let n = x.len();
    (1..n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let a = 2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += v as f64 * a.cos();
                im -= v as f64 * a.sin();
            }
            (k, re * re + im * im)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k as f64 * fs / n as f64)
        .unwrap()
}

#[test]
fn noiseless_classes_separate_by_dominant_frequency() {
    let cfg = SynthConfig { n_subjects: 2, epochs_per_subject: 100, noise_std: 0.0, ..Default::default() };
    for rec in synthesize_subjects(&cfg).unwrap() {
        for (i, &label) in rec.labels.iter().enumerate() {
            let f = dominant_frequency(rec.epoch(i), cfg.sampling_rate_hz as f64);
            let predicted = match f {
                f if f < 1.0 => Stage::N3,
                f if f < 1.8 => Stage::N2,
                f if f < 2.4 => Stage::N1,
                f if f < 2.9 => Stage::Rem,
                _ => Stage::W,
            };
            assert_eq!(predicted, label, "{} epoch {i}: {f} Hz", rec.subject_id);
        }
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic(&small_synth(), a.path()).unwrap();
    generate_synthetic(&small_synth(), b.path()).unwrap();
    for id in ma.subject_ids() {
        let f = format!("{id}.ssb");
        assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&SynthConfig { seed: 1, ..small_synth() }, c.path()).unwrap();
    assert_ne!(std::fs::read(a.path().join("synth00.ssb")).unwrap(), std::fs::read(c.path().join("synth00.ssb")).unwrap());
}

#[test]
fn config_files_resolve_relative_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = dataset(&dir.path().join("data"));
    let path = dir.path().join("exp.toml");
    std::fs::write(
        &path,
        "manifest = \"data/manifest.json\"\nalgorithm = \"tstcc\"\nlabel_fraction = 0.05\n[finetune]\nepochs = 3\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap().resolve().unwrap();
    assert_eq!(cfg.algorithm, Method::TsTcc);
    assert_eq!(cfg.dataset, m.name);
    assert_eq!(cfg.finetune.epochs, 3);
    assert_eq!(cfg.finetune.batch_size, TrainBudget::default().batch_size);
    std::fs::write(&path, "manifest = \"data/manifest.json\"\nalgorithm = \"supervised\"\nimbalance = \"oversample_pretext\"\n").unwrap();
    assert!(ExperimentConfig::load(&path).unwrap().resolve().is_err());
}
