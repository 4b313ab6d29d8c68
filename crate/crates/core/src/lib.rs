//! Allocation-only core of the implant depth prediction pipeline.
//!
//! Everything here is pure computation over owned buffers: a small reverse-mode
//! autodiff engine with GEMM-backed 3D convolutions, the implant region detector,
//! the depth regression network, the training losses, evaluation metrics, the
//! synthetic phantom generator and the training-step machinery. File formats,
//! checkpoints, logging and the CLI live in the `implant-depth` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod conv;
pub mod edges;
pub mod error;
pub mod graph;
pub mod idpnet;
pub mod ird;
pub mod layers;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod schedule;
pub mod split;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use volume::{Condition, ImplantAnnotation, Interval, PatientRecord, Volume};
