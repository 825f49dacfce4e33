//! Causal progressive speech enhancement with threshold-driven early exit.
//!
//! A multi-stage enhancement model refines a noisy spectrogram in fixed
//! increments; at inference the normalized distance between consecutive
//! stage outputs decides, per utterance, how many stages actually run.
//! The crate bundles the signal front end, a small reverse-mode autodiff
//! engine the model trains on, the stage runner, a training loop, and a
//! benchmark harness behind one CLI.

pub mod cli;
pub mod dsp;
pub mod early_exit;
pub mod eval;
pub mod model;
pub mod nn;
pub mod training;
