//! Link-level MU-MIMO OFDM simulation with classical and learned demapping.
//!
//! The crate is organized bottom-up:
//!
//! * [`grid`]: resource-grid geometry and comb pilot patterns.
//! * [`channel`]: correlated tapped-delay-line channels, AWGN and grid SNR.
//! * [`modem`]: Gray QAM constellations and slot assembly.
//! * [`codec`]: regular LDPC codes with a belief-propagation decoder.
//! * [`rxchain`]: nearest-pilot LMMSE estimation, whitening, LMMSE
//!   equalization and Gaussian demapping.
//! * [`tensor`]: a small reverse-mode differentiation engine.
//! * [`neuraldemap`]: the convolutional-attention demapper and a ResNet
//!   reference model.
//! * [`training`]: batch generation, BCE training and rate estimation.
//! * [`harness`]: configuration, Monte Carlo BER sweeps and CSV output.

// `!(x > 0.0)` is how validation rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod codec;
pub mod error;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod modem;
pub mod neuraldemap;
pub mod oracle;
pub mod rng;
pub mod rxchain;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use grid::{GridDims, PilotPattern, ReIndex};
pub use num_complex::Complex64;
