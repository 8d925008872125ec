//! Evaluation harness for pairwise spatial relations in generated images.
//!
//! The pipeline: build a prompt set ([`prompts`]), collect detections from
//! pluggable backends ([`detection`]), decide each sample with an abstaining
//! checker ([`checker`]), aggregate ([`metrics`]), audit and calibrate the
//! checker against human labels ([`audit`]), and render reports ([`report`]).

pub mod audit;
pub mod checker;
pub mod detection;
pub mod digest;
pub mod metrics;
pub mod mockgen;
pub mod parallel;
pub mod prompts;
pub mod provenance;
pub mod relation;
pub mod report;
pub mod run;
pub mod workflow;

pub use parallel::ExecMode;
pub use relation::{Axis, Relation};
