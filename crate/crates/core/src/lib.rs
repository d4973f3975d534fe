//! Token clustering transformer for human-centric dense prediction.
//!
//! Vision tokens start as the cells of a stem feature map and are merged
//! stage by stage with density-peaks clustering ([`dpc_knn`]). Each merge
//! averages token features weighted by a learned importance score and
//! refines the merged tokens with importance-biased attention ([`ctm`]).
//! The multi-stage token aggregation head ([`mta_head`]) walks the recorded
//! merges backwards to produce per-cell heatmaps without rasterizing
//! intermediate tokens to coarse grids.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod ctm;
pub mod dpc_knn;
pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod mta_head;
pub mod nn;
pub mod overlay;
pub mod params;
pub mod token_space;
pub mod transformer_block;

pub use error::{Error, Result};
