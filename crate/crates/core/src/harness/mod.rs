//! Experiment harness: configuration, tasks, a small sequence model, training.

pub mod config;
pub mod experiment;
pub mod model;
pub mod task;
