//! On-disk epoch format, preprocessing, subject-wise folds and label budgets.
//!
//! A subject file `<id>.ssb` holds `n_epochs * epoch_len` little-endian
//! `f32` samples followed by `n_epochs` stage bytes (0..=4 for W, N1, N2,
//! N3, REM). The sidecar `<id>.ssb.json` carries `subject_id`,
//! `sampling_rate_hz`, `epoch_len`, `n_epochs` and `channel`.

mod preprocess;
mod record;
mod split;

pub use preprocess::{load_raw_subject, map_to_aasm, preprocess_raw, trim_wake, AnnotationScheme, RawSubject, StageMapping};
pub use record::{
    class_counts, load_subject, sidecar_path, store_subject, DatasetManifest, ManifestEntry, Sidecar, Stage,
    SubjectRecord, EPOCH_SECONDS, N_STAGES,
};
pub use split::{
    make_fold_plan, oversample_balanced, oversample_indices, per_class_quota, select_label_fraction, EpochRef,
    EpochSet, FoldPlan, LabelBudget,
};
