//! Robustness finetuning toolkit for small CNNs.
//!
//! The crate bundles a reverse-mode autodiff core, the photometric, noise and
//! blur corruptions used for training and evaluation, the feature-map
//! consistency (FMA) and stability (ST) regularizers, the individual and
//! combined augmentation schedules, corruption-strength calibration, and a
//! two-stage training harness with reporting.

pub mod augment;
pub mod autodiff;
pub mod calibration;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod trainer;
mod util;

pub use augment::{AugmentationKind, AugmentationSet, AugmentationSpec, PresetManifest, SetName};
pub use autodiff::{Graph, NodeId};
pub use data::LabeledDataset;
pub use error::{Error, ErrorClass, Result};
pub use image::Image;
pub use losses::{LossConfig, Method};
pub use model::{ArchitectureDescriptor, ModelSnapshot};
pub use rng::RandomStream;
pub use schedule::{Strategy, StrategyConfig};
pub use tensor::Tensor;
