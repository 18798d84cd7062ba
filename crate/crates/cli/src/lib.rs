//! Command-line front end: run configuration, training and evaluation
//! runs, ablation sweeps and the verification suite.

pub mod config;
pub mod runner;
pub mod synth;
pub mod verify;
