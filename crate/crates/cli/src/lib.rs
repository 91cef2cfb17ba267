//! Experiment driver library: configuration, pipeline stages, and report
//! emission. The `domainpriv` binary is a thin clap wrapper over
//! [`runner`].

pub mod config;
pub mod pipeline;
pub mod report;
pub mod runner;
