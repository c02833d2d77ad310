pub mod baselines;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod sensing;
pub mod special;
pub mod waveform;

pub use error::{Error, Result};
