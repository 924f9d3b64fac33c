//! Dataset ingestion, image decoding, synthetic fixtures, run persistence and
//! the command implementations behind the `tonescope` binary. The numerical
//! work lives in [`tonescope_core`].

pub mod commands;
pub mod config_file;
pub mod fixture;
pub mod images;
pub mod metadata;
pub mod persist;
pub mod svg;

pub use tonescope_core;
