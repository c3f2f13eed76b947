//! Volumes, dataset manifests, grade encodings and stratified folds.

mod folds;
mod grade;
mod manifest;
mod volume;

pub use folds::{stratified_kfold, FoldSplit};
pub use grade::{binarize_grade, ordinal_encode, Grade, OrdinalTarget, Task};
pub use manifest::{CaseRecord, DatasetManifest, Organ, OrganPaths, MANIFEST_VERSION};
pub use volume::{read_volume, write_volume, RoiVolume, VOLUME_MAGIC};
