//! Synthetic multi-view RGB-D data: scene rendering, sensor noise, rig
//! calibration and the file formats everything is stored in.

mod dataset;
pub mod formats;
mod noise;
mod rig;
pub mod scene;

pub use dataset::{generate_dataset, generate_samples, scene_seeds, synthesize_sample, Dataset, DatasetSpec, Manifest, Sample, SceneEntry};
pub use noise::{corrupt, NoiseSpec};
pub use rig::{Rig, RIG_SCHEMA_VERSION};
pub use scene::{render_view, Scene, SceneSpec};
