//! Patch-based 3D tumor segmentation with voxel-wise uncertainty.
//!
//! The crate covers the full desk-scale pipeline: synthetic phantom
//! generation and file IO (`volume`), intensity normalization
//! (`preprocess`), patch sampling (`sampler`) and augmentation
//! (`augment`), Dice/Generalized-Dice losses (`losses`), three
//! encoder-decoder network variants on a small autodiff engine
//! (`nn`, `nets`), the training loop (`trainer`), sliding-window
//! inference with ensembling and connected-component post-processing
//! (`inference`), test-time dropout/augmentation uncertainty maps
//! (`uncertainty`) and the evaluation metrics with uncertainty-filtered
//! sweeps (`metrics`).

pub mod augment;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod preprocess;
pub mod sampler;
pub mod trainer;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Case, LabelMap, Region, RegionMasks, UncertaintyMap};
