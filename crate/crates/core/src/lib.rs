//! Crash severity analysis for rasterized crash records: spatial
//! autocorrelation, hotspot districts, random-parameter ordered probit fits
//! and likelihood-ratio tests of parameter transferability.

pub mod ingest;
pub mod normal;
pub mod probit;
pub mod raster;
pub mod spatial;
pub mod stability;
pub mod synth;
