//! A MapReduce runtime whose workers cooperate through one-sided operations on
//! remotely accessible windows instead of collective phase barriers.
//!
//! Workers are threads sharing an in-process [`rma::Fabric`]. Two engines run
//! on it: the decoupled [`engine::run_job`] and the barrier-coupled
//! [`engine::run_job_2s`], which exists as a baseline.

pub mod checkpoint;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod kv;
pub mod rma;
pub mod usecase;

pub use engine::{run_job, run_job_2s, EngineKind, JobConfig, JobSummary};
pub use error::{Error, Result};
pub use usecase::{UseCase, WordCount};
