//! Synthetic shapes dataset: deterministic generation, the on-disk
//! image + annotation format, and train-time augmentation.

mod augment;
mod format;
mod synth;
mod types;

pub use augment::{augment, mosaic4, AugmentPolicy, STAGE1_PAD};
pub use format::{read_dataset, write_dataset, Dataset, DatasetItem, Manifest, FORMAT_VERSION};
pub use synth::{generate_scene, generate_scene_with_extents, PixelExtent};
pub use types::{BBox, GroundTruth, SceneSpec};
