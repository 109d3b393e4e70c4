//! Benchmark harness for vision-language models that generate plant-plot
//! simulation configurations from top-down plot images.

pub mod bleu;
pub mod client;
pub mod coco;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod eval;
pub mod geometry;
pub mod integrity;
pub mod manifest;
pub mod mock;
pub mod prompt;
pub mod raster;
pub mod report;
pub mod solar;
pub mod stats;
