//! Multicategory object counting on density maps, end to end and CPU-only:
//! a small dense-tensor autodiff engine, selective state-space scan kernels,
//! the context-aware scan blocks and cross-scale fusion they feed, a
//! pyramid counting model, counting metrics, and dataset / checkpoint I/O.
//!
//! Everything is written against a generic scalar type so the same kernels
//! run at `f32` in the model path and at `f64` inside test oracles.

pub mod cim;
pub mod counting;
pub mod cssm;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod ssm;

pub use error::{MocError, Result};
