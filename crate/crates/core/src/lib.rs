//! Self-adapting speech enhancement by complex time-frequency masking.
//!
//! The network estimates a complex mask from the noisy log-amplitude
//! spectrogram using a CNN front end, a speaker-aware auxiliary branch, a
//! BLSTM block and a multi-head self-attention block, and is trained with a
//! clipped two-sided SDR loss plus a speaker cross-entropy term.

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod model;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
