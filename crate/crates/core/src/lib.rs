//! Vertebral fracture grading from CT volumes.
//!
//! The crate covers everything downstream of vertebra segmentation: patch
//! preprocessing (windowing, cropping, mask modulation, isotropic resampling),
//! a specialized 3D augmentation pipeline, supervised contrastive training of
//! a 3D squeeze-excitation residual encoder with a detached classification
//! head, Genant-grade evaluation metrics, and volumetric Grad-CAM. A built-in
//! synthetic dataset generator makes the whole pipeline runnable end-to-end
//! without clinical data.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod explain;
pub(crate) mod interp;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod objective;
pub mod preprocess;
pub mod run;
pub mod sampler;
pub mod seeding;
pub mod synthdata;

pub use error::{Error, Result};
