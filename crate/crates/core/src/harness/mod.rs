//! Synthetic tasks, experiments, the property suite and worked-example demos.

pub mod cli;
pub mod demo;
pub mod experiment;
pub mod props;
pub mod tasks;
