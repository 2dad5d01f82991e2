//! Staged denoising diffusion for multivariate time-series windows.
//!
//! A long window is cut into `M` equal stages. Each stage is denoised
//! channel-by-channel with a progressive trend/residual decomposition
//! stack, and the per-scale trends of one stage are fused across
//! channels with a temporal convolution before being handed to the next
//! stage as history.
//!
//! Module map:
//!
//! - [`dataio`]: CSV ingestion, min-max scaling, windowing, stage splits
//! - [`schedule`]: noise schedule, forward noising, posterior, sampler
//! - [`decomp`]: patching, attention blocks, moving-average decomposition
//! - [`fusion`]: multi-channel temporal convolution between stages
//! - [`model`]: the assembled denoiser, training, generation, ablations
//! - [`checkpoint`]: versioned single-file parameter snapshots
//! - [`evalsuite`]: discriminative / predictive scores and t-SNE
//! - [`manifest`]: experiment manifest parsing and `key=value` overrides

pub mod checkpoint;
pub mod dataio;
pub mod decomp;
pub mod error;
pub mod evalsuite;
pub mod fusion;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod schedule;

pub use error::{Error, Result};
