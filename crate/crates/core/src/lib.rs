//! 2.5D multi-task glioma molecular subtyping pipeline.
//!
//! A desk-scale study harness: synthetic phantom cohorts with plantable
//! phenotype/label correlations, a 2D hybrid detector/segmenter/classifier
//! with late fusion of prior-knowledge features (age, tumor location),
//! three-plane majority-vote aggregation, and the full evaluation stack
//! (bootstrap CIs, paired classifier tests, survival analysis).
//!
//! The `parallel` feature (default on) dispatches data-parallel inner loops
//! (cohort generation, bootstrap resampling, per-case inference) through
//! rayon; without it every loop runs sequentially with identical results.

pub mod atlas;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod infer;
pub mod net;
pub mod nifti;
pub mod par;
pub mod plots;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod slicing;
pub mod stats;
pub mod survival;
pub mod train;
pub mod volume;

pub use error::CoreError;
pub use volume::{MultiClassMask, Volume};
