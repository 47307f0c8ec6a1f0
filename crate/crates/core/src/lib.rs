//! Flow-based cell instance segmentation engine.
//!
//! The crate turns instance masks into pseudo-diffusion gradient-flow
//! targets, recovers instances from predicted flow fields by gradient flow
//! tracking, assembles whole-image predictions from sliding windows with
//! Gaussian importance blending and flip TTA, and evaluates results under
//! instance-matching F1 and per-image runtime budgets. A small clustering
//! module balances latent image modalities from precomputed embeddings.
//!
//! Modules map one-to-one onto the pipeline stages:
//!
//! * [`raster`] / [`io`] — grid types and bit-exact tensor/mask containers.
//! * [`flowgen`] — mask → (cell probability, flow) oracle targets.
//! * [`tracker`] — flow field → instance mask recovery.
//! * [`stitcher`] / [`ports`] — windowed inference, TTA and ensembling.
//! * [`labelops`] — label transforms and shape statistics.
//! * [`metrics`] — matching, F1, runtime budget, training loss.
//! * [`modality`] — k-means modality discovery and amplified sampling.
//! * [`synth`] — deterministic synthetic datasets for round-trip harnesses.
//! * [`pipeline`] — directory-level orchestration and reporting.

pub mod flowgen;
pub mod io;
pub mod labelops;
pub mod metrics;
pub mod modality;
pub mod pipeline;
pub mod ports;
pub mod raster;
pub mod stitcher;
pub mod synth;
pub mod tracker;

pub use raster::{InstanceRecord, LabelMask, Prediction, Raster};
