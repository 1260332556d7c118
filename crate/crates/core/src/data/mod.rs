//! Dataset manifests, content-disjoint splits and a synthetic cloud and
//! distortion generator for desk-scale runs.

mod manifest;
mod split;
mod synth;

pub use manifest::{load_samples, Manifest, ManifestEntry, Sample};
pub use split::{split_holdout, split_kfold, Fold, Part, SplitPlan};
pub use synth::{
    generate_dataset, pseudo_mos, synth_cloud, synth_distort, CloudKind, DistortionType,
    SynthSpec, MAX_LEVEL,
};
