//! Synthetic cohorts: cine phantoms, grouped EHR records and survival
//! outcomes with stored ground truth.

mod cohort;
mod ehr;
mod outcome;
mod phantom;

pub use cohort::{
    generate_cohort, load_cohort, read_ehr_csv, read_study, simulate_cohort, write_cohort, write_study, Cohort,
    CohortManifest, CohortSpec, SubjectTruth, Truth, DIGEST_FILE,
};
pub use ehr::{generate_ehr, EhrNoise, EhrSchema, Feature, FeatureKind, Group, Latents, NormStats};
pub use outcome::{calibrate_censoring, linear_predictor, sample_from_predictor, sample_survival, CensorWindow, MIN_TIME};
pub use phantom::{
    generate_phantom, phases_from_volumes, volume_curve, CineStudy, Grid, LaxKind, Phase, PhantomGeometry,
    PhantomSpec, Segment, Volume,
};
