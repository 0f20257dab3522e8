//! Multi-scale orientation scores on the similitude group SIM(2).
//!
//! The library builds log-polar B-spline filter banks in the Fourier domain,
//! transforms images into complex scores U(x, y, theta, a), reconstructs them
//! stably, and runs left-invariant evolutions (linear hypo-elliptic diffusion
//! via Gaussian kernel estimates with a Monte-Carlo oracle, and nonlinear
//! crossing-preserving diffusion per scale layer) plus multi-scale vesselness
//! filters on top of the score geometry.

pub mod calculus;
pub mod cwt;
pub mod diffusion;
mod fft;
pub mod geometry;
pub mod synth;
pub mod vesselness;
pub mod wavelets;

pub(crate) mod binio;

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// configuration/admissibility -> 1, numeric -> 2, i/o -> 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("inadmissible wavelet: {0}")]
    Inadmissible(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail} (byte offset {offset})")]
    Format {
        path: String,
        detail: String,
        offset: u64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub use cwt::{Image, ScoreVolume};
pub use diffusion::{CedParams, DiffusionParams};
pub use geometry::{LieCoefficients, Sim2Point};
pub use vesselness::VesselnessParams;
pub use wavelets::{BankParams, WaveletBank};
