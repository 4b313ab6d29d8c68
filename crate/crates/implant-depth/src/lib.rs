//! File formats, checkpoints, training loops and the experiment CLI around
//! [`implant_depth_core`].

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod error;
pub mod plot;
pub mod report;
pub mod trainer;
pub mod volume_io;
pub mod workflow;

pub use error::{HarnessError, Result};
pub use implant_depth_core as core;
