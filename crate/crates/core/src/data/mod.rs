//! Synthetic two-channel cohort: generation, storage, patient-level
//! splitting, balancing and train-time augmentation.

mod cohort;
mod dataset;
mod split;
mod store;
mod transform;

pub use cohort::{
    balance_minority, count_slices, generate_cohort, rot90_ccw, CohortSpec, Label, PatientRecord, Provenance,
    Sample,
};
pub use dataset::{Dataset, Modality};
pub use split::{make_split, SplitPlan, Subset};
pub use store::{read_cohort, read_split, write_cohort, write_split};
pub use transform::{resize_bilinear, stack_and_resize, vflip, Augmenter, NormStats, NORM_EPS};
