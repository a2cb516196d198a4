use std::collections::BTreeSet;

use proptest::prelude::*;
use sleepssl::dataio::{
    class_counts, load_subject, oversample_indices, select_label_fraction, store_subject, trim_wake, DatasetManifest,
    EpochSet, FoldPlan, Stage, SubjectRecord,
};

/// 30 s epochs at `fs` Hz.
fn record(id: &str, labels: Vec<Stage>, fs: u32) -> SubjectRecord {
    let epoch_len = 30 * fs as usize;
    SubjectRecord {
        subject_id: id.into(),
        channel: "Fpz-Cz".into(),
        sampling_rate_hz: fs,
        epoch_len,
        epochs: (0..labels.len() * epoch_len).map(|i| (i as f32).sin()).collect(),
        labels,
    }
}

fn stage() -> impl Strategy<Value = Stage> {
    (0usize..5).prop_map(|i| Stage::from_index(i).unwrap())
}

fn set_with_counts(counts: [usize; 5]) -> EpochSet {
    let labels: Vec<Stage> = Stage::ALL.iter().zip(counts).flat_map(|(&s, n)| std::iter::repeat_n(s, n)).collect();
    let r = record("a", labels, 1);
    EpochSet::from_records([&r]).unwrap()
}

proptest! {
    #[test]
    fn fold_plans_are_disjoint_and_exhaustive(n in 2usize..30, k in 2usize..10, seed: u64) {
        prop_assume!(k <= n);
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:02}")).collect();
        let plan = FoldPlan::new(&ids, k, seed).unwrap();
        let mut seen = BTreeSet::new();
        for f in 0..k {
            let test = plan.test_subjects(f);
            let train = plan.train_subjects(f);
            prop_assert!(!test.is_empty());
            prop_assert!(test.iter().all(|t| !train.contains(t)));
            prop_assert_eq!(test.len() + train.len(), n);
            for t in test {
                prop_assert!(seen.insert(t.clone()), "{} tested twice", t);
            }
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn label_budgets_are_nested_and_stratified(counts in prop::array::uniform5(0usize..300), seed: u64) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let set = set_with_counts(counts);
        let mut prev: BTreeSet<usize> = BTreeSet::new();
        for frac in [0.01, 0.05, 0.1, 0.5, 1.0] {
            let b = select_label_fraction(&set, frac, seed).unwrap();
            let cur: BTreeSet<usize> = b.indices.iter().copied().collect();
            prop_assert_eq!(cur.len(), b.indices.len());
            prop_assert!(prev.is_subset(&cur));
            let got = set.subset(&b.indices).class_counts();
            for c in 0..5 {
                if counts[c] > 0 {
                    prop_assert!(got[c] >= 1);
                    prop_assert!((got[c] as f64 - frac * counts[c] as f64).abs() <= 1.0);
                } else {
                    prop_assert_eq!(got[c], 0);
                }
            }
            prev = cur;
        }
        prop_assert_eq!(prev.len(), set.len());
    }

    #[test]
    fn oversampling_balances_and_keeps_originals(labels in prop::collection::vec(stage(), 5..200), seed: u64) {
        prop_assume!(class_counts(&labels).iter().all(|&c| c > 0));
        let idx = oversample_indices(&labels, seed).unwrap();
        let max = *class_counts(&labels).iter().max().unwrap();
        let picked: Vec<Stage> = idx.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(class_counts(&picked), [max; 5]);
        prop_assert_eq!(&idx[..labels.len()], &(0..labels.len()).collect::<Vec<_>>()[..]);
        prop_assert_eq!(oversample_indices(&labels, seed).unwrap(), idx);
    }

    #[test]
    fn trimming_caps_boundary_wake(lead in 0usize..200, core in prop::collection::vec(stage(), 1..50), tail in 0usize..200) {
        let mut core = core;
        core[0] = Stage::N2;
        let last = core.len() - 1;
        core[last] = Stage::N1;
        let labels: Vec<Stage> = std::iter::repeat_n(Stage::W, lead)
            .chain(core.iter().copied())
            .chain(std::iter::repeat_n(Stage::W, tail))
            .collect();
        let t = trim_wake(&record("x", labels, 1), 30).unwrap();
        let kept_lead = t.labels.iter().position(|&s| s != Stage::W).unwrap();
        let kept_tail = t.labels.len() - 1 - t.labels.iter().rposition(|&s| s != Stage::W).unwrap();
        prop_assert_eq!(kept_lead, lead.min(60));
        prop_assert_eq!(kept_tail, tail.min(60));
        prop_assert_eq!(&t.labels[kept_lead..kept_lead + core.len()], &core[..]);
        t.validate().unwrap();
    }

    #[test]
    fn subject_files_round_trip(labels in prop::collection::vec(stage(), 1..40), fs in 1u32..4) {
        let dir = tempfile::tempdir().unwrap();
        let r = record("rt", labels, fs);
        let p = dir.path().join("rt.ssb");
        store_subject(&r, &p).unwrap();
        prop_assert_eq!(load_subject(&p).unwrap(), r);
    }
}

#[test]
fn manifest_lists_and_reloads_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![record("s1", vec![Stage::W, Stage::N2], 2), record("s0", vec![Stage::Rem], 2)];
    for r in &recs {
        store_subject(r, &dir.path().join(format!("{}.ssb", r.subject_id))).unwrap();
    }
    let m = DatasetManifest::from_records("toy", dir.path(), &recs).unwrap();
    let path = m.save(dir.path()).unwrap();
    let back = DatasetManifest::load(&path).unwrap();
    assert_eq!(back.subject_ids(), vec!["s1".to_string(), "s0".to_string()]);
    assert_eq!(back.load_subject("s1").unwrap(), recs[0]);
    assert!(back.load_subject("nobody").is_err());
}
