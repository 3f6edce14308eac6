//! Dataset ingestion, synthetic data and the pipeline driver.

pub mod config;
pub mod metadata;
pub mod pipeline;
pub mod resample;
pub mod synth;
pub mod wav;
