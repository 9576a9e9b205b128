//! Multi-speaker direction-of-arrival estimation lab.
//!
//! The crate covers the whole pipeline: pin-hole camera annotation of
//! speaker azimuths ([`geom`], [`annotate`]), shoebox-room simulation of a
//! six-microphone linear array ([`simulate`]), the log-mel frontend
//! ([`dsp`]), a small reverse-mode autodiff engine ([`autodiff`]), the
//! audio-only and angle-conditioned estimators ([`model`]), their
//! permutation-free objectives ([`loss`]) and the assignment-based
//! evaluation metrics ([`metrics`]). [`experiment`] ties everything into
//! the commands exposed by the `doalab` binary.

pub mod annotate;
pub mod assign;
pub mod audio;
pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod simulate;

pub use error::{Error, Result};

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Default sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
