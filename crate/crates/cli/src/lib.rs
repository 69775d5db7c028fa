//! Command-line harness around `distlab_core`: configuration, the
//! end-to-end experiment, and the on-disk report bundle.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod pgm;
pub mod pipeline;
