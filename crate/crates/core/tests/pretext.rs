mod common;

use common::*;
use proptest::prelude::*;
use sleepssl::augment::AugmentationSpec;
use sleepssl::backbone::{BackboneKind, Model, ModelSpec, FE_PREFIX};
use sleepssl::dataio::EpochSet;
use sleepssl::harness::{synthesize_subjects, SynthConfig};
use sleepssl::pretext::{
    clstran_transform, cpc_step, info_nce, nt_xent, pretrain, tstcc_step_views, Algorithm, PretextConfig,
    PretextHeads, PretextTrainer, PretrainConfig, TsTccWeights, PRETEXT_PREFIX,
};
use sleepssl::seed;
use sleepssl_nn::{AdamConfig, Graph, Tensor};

const FS: u32 = 10;

fn unlabeled(n_subjects: usize, epochs: usize) -> Tensor {
    let recs = synthesize_subjects(&SynthConfig { n_subjects, epochs_per_subject: epochs, ..Default::default() }).unwrap();
    let set = EpochSet::from_records(&recs).unwrap();
    set.batch(&(0..set.len()).collect::<Vec<_>>())
}

fn desk() -> ModelSpec {
    ModelSpec::desk(BackboneKind::Cnn1d, FS)
}

proptest! {
    #[test]
    fn nt_xent_matches_the_double_sum(n in 1usize..7, d in 2usize..10, tau in prop::sample::select(vec![0.1, 0.5, 1.0]), s: u64) {
        let mut r = rng(s);
        let (a, b) = (tensor(&unit_rows(&mut r, n, d)), tensor(&unit_rows(&mut r, n, d)));
        let got = nt_xent(&a, &b, tau).unwrap();
        let want = nt_xent_oracle(&rows_of(&a), &rows_of(&b), tau, false);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn nt_xent_is_symmetric_in_views_and_pair_order(n in 2usize..7, d in 2usize..10, s: u64) {
        let mut r = rng(s);
        let (a, b) = (unit_rows(&mut r, n, d), unit_rows(&mut r, n, d));
        let base = nt_xent(&tensor(&a), &tensor(&b), 0.2).unwrap();
        let swapped = nt_xent(&tensor(&b), &tensor(&a), 0.2).unwrap();
        let (ra, rb): (Rows, Rows) = (a.iter().rev().cloned().collect(), b.iter().rev().cloned().collect());
        let reordered = nt_xent(&tensor(&ra), &tensor(&rb), 0.2).unwrap();
        prop_assert!((base - swapped).abs() < 1e-9);
        prop_assert!((base - reordered).abs() < 1e-9);
    }

    #[test]
    fn info_nce_matches_the_double_sum(n in 1usize..7, d in 1usize..10, s: u64) {
        let mut r = rng(s);
        let (p, t) = (tensor(&random_rows(&mut r, n, d, 2.0)), tensor(&random_rows(&mut r, n, d, 2.0)));
        let got = info_nce(&p, &t).unwrap();
        let want = info_nce_oracle(&rows_of(&p), &rows_of(&t));
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

fn basis(n: usize, d: usize, scale: f64) -> Rows {
    (0..n).map(|i| (0..d).map(|k| if k == i { scale } else { 0.0 }).collect()).collect()
}

#[test]
fn orthogonal_pairs_have_a_closed_form_loss() {
    for (n, tau) in [(2usize, 0.2f64), (4, 0.5), (6, 1.0)] {
        let e = tensor(&basis(n, n + 1, 1.0));
        let want = (1.0 + (2 * n - 2) as f64 * (-1.0 / tau).exp()).ln();
        assert!((nt_xent(&e, &e, tau).unwrap() - want).abs() < 1e-12);
        let s = 1.5f64;
        let p = tensor(&basis(n, n, s));
        let want = (1.0 + (n - 1) as f64 * (-s * s).exp()).ln();
        assert!((info_nce(&p, &p).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn clstran_labels_name_the_applied_transformation() {
    let cfg = PretextConfig::default().augment;
    let x = unlabeled(1, 12);
    let (a, labels) = clstran_transform(&x, &cfg, 9).unwrap();
    let (b, labels_b) = clstran_transform(&x, &cfg, 9).unwrap();
    assert_eq!((&a, &labels), (&b, &labels_b));
    assert!(labels.iter().all(|&y| y < 4));
    let kinds = cfg.transformation_kinds();
    for (i, &y) in labels.iter().enumerate() {
        let row = Tensor::from_vec(x.row(i).to_vec(), &[1, x.dim(1)]).unwrap();
        let spec = AugmentationSpec { kind: kinds[y], seed: seed::derive(9, &[seed::tag("clstran-row"), i as u64]) };
        assert_eq!(spec.apply(&row).unwrap().data(), a.row(i));
    }
}

/// A desk cnn1d model with TS-TCC heads (which contain the CPC modules).
fn tstcc_model() -> (Model, PretextHeads) {
    let mut model = Model::build(&desk(), 3).unwrap();
    let heads = PretextHeads::attach(&mut model, Algorithm::TsTcc, &PretextConfig::default(), 3).unwrap();
    (model, heads)
}

#[test]
fn tstcc_without_contextual_term_on_identical_views_is_cpc() {
    let (model, heads) = tstcc_model();
    let PretextHeads::TsTcc { aggregator, predictors, projection } = &heads else { unreachable!() };
    let cfg = PretextConfig::default();
    let x = unlabeled(1, 8);
    let w = TsTccWeights { temporal: 1.0, contextual: 0.0 };
    let mut g = Graph::eval(model.store());
    let ts = tstcc_step_views(&mut g, &model, aggregator, predictors, projection, &x, &x, cfg.tau, &cfg.cpc, w).unwrap();
    let mut g = Graph::eval(model.store());
    let cpc = cpc_step(&mut g, &model, aggregator, predictors, &x, &cfg.cpc).unwrap();
    assert!((ts.result.loss - cpc.result.loss).abs() < 1e-5, "{} vs {}", ts.result.loss, cpc.result.loss);
}

#[test]
fn tstcc_without_temporal_term_is_nt_xent_over_projected_contexts() {
    let (model, heads) = tstcc_model();
    let PretextHeads::TsTcc { aggregator, predictors, projection } = &heads else { unreachable!() };
    let cfg = PretextConfig::default();
    let weak = unlabeled(1, 6);
    let strong = sleepssl::augment::negate(&weak);
    let w = TsTccWeights { temporal: 0.0, contextual: 1.0 };
    let mut g = Graph::eval(model.store());
    let got = tstcc_step_views(&mut g, &model, aggregator, predictors, projection, &weak, &strong, cfg.tau, &cfg.cpc, w)
        .unwrap()
        .result
        .loss;
    let ctx = cfg.cpc.context_len(model.dims().timesteps).unwrap();
    let project = |x: &Tensor| {
        let mut g = Graph::eval(model.store());
        let xv = g.input(x.clone());
        let z = model.encoder_forward(&mut g, xv);
        let past = g.narrow(z, 1, 0, ctx);
        let c = aggregator.forward(&mut g, past);
        let p = projection.forward(&mut g, c);
        let p = g.l2_normalize(p);
        g.value(p).clone()
    };
    let want = nt_xent_oracle(&rows_of(&project(&weak)), &rows_of(&project(&strong)), cfg.tau, true);
    assert!((got - want).abs() < 1e-4 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn trained_cpc_prefers_true_futures() {
    let x = unlabeled(2, 40);
    let cfg = PretextConfig::default();
    let mut t = PretextTrainer::new(&desk(), Algorithm::Cpc, &cfg, AdamConfig::default(), 1).unwrap();
    let batch = x.select_rows(&(0..64).collect::<Vec<_>>());
    for s in 0..40 {
        t.step(&batch, s).unwrap();
    }
    // Swap the second half of every epoch with the next epoch's.
    let (n, l) = (batch.dim(0), batch.dim(1));
    let mut spliced = batch.clone();
    for i in 0..n {
        let donor = batch.row((i + 1) % n).to_vec();
        spliced.data_mut()[i * l + l / 2..(i + 1) * l].copy_from_slice(&donor[l / 2..]);
    }
    let real = t.evaluate(&batch, 0).unwrap().loss;
    let fake = t.evaluate(&spliced, 0).unwrap().loss;
    assert!(real < fake, "true futures {real}, spliced {fake}");
    assert!(real < (n as f64).ln(), "no better than chance: {real}");
}

#[test]
fn zero_epochs_return_the_initial_encoder() {
    let x = unlabeled(1, 10);
    for algo in Algorithm::ALL {
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::new(algo, 4) };
        let out = pretrain(&desk(), &x, &cfg, None).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.checkpoint.tensors, Model::build(&desk(), 4).unwrap().encoder_checkpoint().unwrap().tensors);
    }
}

#[test]
fn pretraining_is_reproducible_and_exports_only_the_encoder() {
    let x = unlabeled(1, 24);
    for algo in Algorithm::ALL {
        let cfg = PretrainConfig { epochs: 2, batch_size: 8, ..PretrainConfig::new(algo, 5) };
        let a = pretrain(&desk(), &x, &cfg, None).unwrap();
        let b = pretrain(&desk(), &x, &cfg, None).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint, "{algo}");
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.steps, 6);
        assert!(a.checkpoint.tensors.iter().all(|t| t.name.starts_with(FE_PREFIX) && !t.name.starts_with(PRETEXT_PREFIX)));
        let init = Model::build(&desk(), 5).unwrap().encoder_checkpoint().unwrap();
        assert_ne!(a.checkpoint.tensors, init.tensors, "{algo} did not train");
    }
}

#[test]
fn pretext_loss_falls_over_training() {
    let x = unlabeled(2, 64);
    for algo in Algorithm::ALL {
        let cfg = PretrainConfig { epochs: 6, batch_size: 32, ..PretrainConfig::new(algo, 6) };
        let out = pretrain(&desk(), &x, &cfg, None).unwrap();
        let (first, last) = (out.trace[0].loss, out.trace.last().unwrap().loss);
        assert!(last < first, "{algo}: {first} -> {last}");
        match algo {
            Algorithm::ClsTran => assert!(out.trace.iter().all(|r| r.pseudo_label_accuracy.is_some())),
            Algorithm::SimClr => assert!(out.trace.iter().all(|r| r.positive_similarity.is_some())),
            Algorithm::Cpc | Algorithm::TsTcc => assert!(out.trace.iter().all(|r| r.info_nce_mean.is_some())),
        }
    }
}

#[test]
fn evaluation_leaves_the_trainer_untouched() {
    let x = unlabeled(1, 8);
    let mut t = PretextTrainer::new(&desk(), Algorithm::SimClr, &PretextConfig::default(), AdamConfig::default(), 2).unwrap();
    let before = t.model().full_checkpoint().unwrap();
    let e = t.evaluate(&x, 17).unwrap();
    assert_eq!(t.model().full_checkpoint().unwrap(), before);
    assert_eq!(t.step(&x, 17).unwrap(), e);
    assert_eq!(t.steps(), 1);
}

#[test]
fn undersized_inputs_are_rejected() {
    let x = unlabeled(1, 1);
    for algo in [Algorithm::SimClr, Algorithm::Cpc, Algorithm::TsTcc] {
        assert!(pretrain(&desk(), &x, &PretrainConfig::new(algo, 0), None).is_err(), "{algo}");
    }
    let mut cfg = PretextConfig::default();
    cfg.cpc.k_future = 1000;
    let mut m = Model::build(&desk(), 0).unwrap();
    assert!(PretextHeads::attach(&mut m, Algorithm::Cpc, &cfg, 0).is_err());
}
