//! Multi-view hand mesh reconstruction with a point-embedded transformer.

pub mod basis;
pub mod dataset;
pub mod decoder;
pub mod error;
#[doc(hidden)]
pub mod faults;
pub mod fitting;
pub mod geometry;
pub mod hand;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod root_stage;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
