//! Three-stage patch-conditioned denoising diffusion for large grayscale
//! images: a global model, a local-context model and a patch model, stitched
//! with known-region overlap conditioning.

pub mod anomaly;
pub mod cli;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod plane;
pub mod preprocess;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
pub use plane::{Mask, Plane};
