//! Synthetic scenes, CT-style preprocessing, segmentation metrics and file
//! formats.

pub mod hu;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod synth;

pub use hu::{center_crop, preprocess_hu, HU_CLIP};
pub use manifest::{Dataset, ManifestRecord, Sample, Split};
pub use metrics::{dice, hausdorff, MetricRecord};
pub use synth::{generate_dataset, Mask, SynthConfig, SyntheticScene};
