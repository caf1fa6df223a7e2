//! Datasets, configuration, reports and the command-line workbench.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod kitti;
pub mod pnm;
pub mod report;
pub mod synth;
