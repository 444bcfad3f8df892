//! Synthetic defect generation and annotation pipeline for visual
//! inspection datasets.

pub mod coco;
pub mod dataset;
pub mod imageio;
pub mod patch;
pub mod raster;
pub mod backend;
pub mod prompt;
pub mod masks;
pub mod generation;
pub mod store;
pub mod filter;
pub mod compositor;
pub mod mixture;
pub mod fixtures;
pub mod config;
pub mod pipeline;
