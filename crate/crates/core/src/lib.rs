//! Differentiable spectral-modeling synthesis and mixture fitting.
//!
//! A harmonic-plus-noise source synthesizer whose frame-wise controls come
//! from small learned networks, a mixture model that sums several such
//! sources, and gradient-based recovery of each source's synthesis
//! parameters (fundamental frequency, timbre latent, loudness) from an
//! observed mixture by minimizing a multiscale spectral loss. Score
//! information can seed the pitch and loudness trajectories.

pub mod dsp;
pub mod error;
mod fft;
pub mod graph;
pub mod mixture;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod score;
pub mod synth;

pub use dsp::{AudioBuffer, Matrix, StftConfig, HOP_MS, SAMPLE_RATE};
pub use error::{Error, Result};
pub use graph::{grad_check, DiffGraph, DiffValue, Shape};
pub use nets::{ModelConfig, SynthModel, SynthParams};
pub use synth::{ControlSignals, ReverbIR};
