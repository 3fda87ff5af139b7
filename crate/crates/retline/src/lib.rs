//! Files, training and reporting around `retline-core`.
//!
//! - [`config`]: TOML run configuration with a config echo.
//! - [`pgm`]: binary PGM images and heatmaps.
//! - [`dataset`]: synthetic datasets, TSV manifests, JSON sidecars.
//! - [`checkpoint`]: JSON manifest plus little-endian f32 parameter blob.
//! - [`train`]: minibatch training and greedy evaluation.
//! - [`checks`]: the invariant suite behind `retline verify`.
//! - [`report`]: CSV writers and the summary table.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod pgm;
pub mod report;
pub mod train;
