//! Host-side pipeline around the simulator core: dataset manifests, PPM/PGM
//! frames, the SDNNW1 weights container, masked run orchestration and report
//! emission.

pub mod artifact;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod ppm;
pub mod report;
pub mod run;
pub mod weights;

pub use error::{PipelineError, Result};
