//! Layer-wise post-training weight quantization kernels.
//!
//! Three quantizers over the same row-major [`Mat`] layer representation:
//!
//! * [`obq::rtn_quantize_layer`]: round-to-nearest onto a fixed grid, no
//!   compensation. The baseline everything else is measured against.
//! * [`obq::obq_quantize_layer`]: per-row greedy OBQ. Every row owns a copy
//!   of the inverse Hessian and walks its own column order, compensating the
//!   still-unquantized weights after each step.
//! * [`fastobq::fastobq_quantize_layer`]: row-parallel variant. One column
//!   schedule is fixed up front from aggregated column sensitivities, so all
//!   rows share a single inverse Hessian and each column costs one rank-1
//!   downdate for the whole layer.
//!
//! The crate is `no_std` (with `alloc`); anything that needs a clock, files,
//! or threads lives in the companion `fastobq-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod fastobq;
pub mod grid;
pub mod linalg;
pub mod mat;
mod math;
pub mod obq;
pub mod ordering;

pub use error::{Error, Result};
pub use fastobq::{layer_error, ColumnSchedule, LayerError, LayerResult};
pub use grid::{QuantGrid, Scheme};
pub use linalg::{Hessian, HinvTally, InverseHessian};
pub use mat::Mat;
pub use obq::{ObqOutput, TraceEntry};
pub use ordering::{Direction, OrderingStrategy, SortKey};
