//! Event-driven sigma-delta network simulator with input region masking.
//!
//! The crate is organized around the processing pipeline: [`tensor`] provides
//! the deterministic numeric kernels, [`sigma_delta`] the delta/sigma event
//! recurrences, [`masking`] the static and dynamic region masks, [`network`]
//! the detector graph and its event-driven form, and [`metrics`] the
//! energy/latency cost model plus the mask and detection evaluators.

pub mod error;
pub mod masking;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod sigma_delta;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
