//! Experiment orchestration behind the `conceptree` binary: sweep
//! configuration, the mode x n x seed runner with its CSV result
//! table, and SVG plot emission.

pub mod config;
pub mod plot;
pub mod sweep;
