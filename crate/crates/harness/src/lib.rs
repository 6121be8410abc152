//! Operational shell around the `semlink` codec: dataset ingestion,
//! training and evaluation loops, sweeps, the UDP channel emulator, link
//! simulation and report output.

pub mod config;
pub mod dataset;
pub mod emulator;
pub mod error;
pub mod evaluate;
pub mod linksim;
pub mod report;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
