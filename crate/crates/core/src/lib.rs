//! Integer-only inference for Mamba-style state-space blocks, together with
//! a deterministic cycle-level model of the layer-wise accelerator pipeline
//! and a hyperparameter sweeper for the parameter/latency trade-off.
//!
//! The crate is organized around a handful of pieces:
//!
//! - [`qnum`] — fixed-point tensors, quantization, calibration, and
//!   shift-based requantization;
//! - [`approx`] — piecewise-linear fitting plus the hardware kernels
//!   (range normalization, piecewise SiLU/exp, ReLU-for-Softplus);
//! - [`mamba`] — the block computation graph in both integer and
//!   floating-point reference form, with model container I/O;
//! - [`pipesim`] — the ready/valid token pipeline simulator;
//! - [`nas`] — configuration enumeration, parameter counting, Pareto
//!   extraction, and accuracy metrics.

// Index-driven loops are the house style for the integer kernels; the
// iterator rewrites clippy suggests obscure the fixed-point arithmetic.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_range_contains)]
#![allow(clippy::manual_is_multiple_of)]

pub mod approx;
pub mod mamba;
pub mod nas;
pub mod pipesim;
pub mod error;
pub mod qnum;

pub use approx::PiecewiseLinearFn;
pub use error::{Error, Result};
pub use mamba::{MambaConfig, MambaWeights, PreparedModel, QuantizedModel};
pub use nas::NasPoint;
pub use pipesim::{CycleReport, PipelineConfig, StageLatencyTable};
pub use qnum::{QTensor, RealTensor};
