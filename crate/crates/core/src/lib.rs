//! Multi-scale, multi-modal, multi-task stock prediction on a small
//! reverse-mode tensor engine.

pub mod bench;
pub mod cli;
pub mod completion;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod multitask;
pub mod numcore;
pub mod params;
pub mod training;

pub use error::{MsmfError, Result};
