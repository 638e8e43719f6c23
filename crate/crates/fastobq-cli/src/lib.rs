//! Experiment harness and file formats around `fastobq-core`.
//!
//! The core crate is pure math; everything that touches a clock, a file or
//! a thread pool lives here: the tensor container, bundle manifests,
//! synthetic layer generation, report writers, and the `fastobq` binary's
//! subcommands.

pub mod bench;
pub mod bundle;
pub mod cli;
mod error;
pub mod experiment;
pub mod inspect;
pub mod report;
pub mod synth;
pub mod tensor;

pub use error::HarnessError;
