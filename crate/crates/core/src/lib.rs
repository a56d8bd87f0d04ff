//! Desk-scale laboratory for the GPU memory-coalescing timing channel on
//! T-table AES.
//!
//! The crate models a warp-level coalescing unit with fixed, per-kernel random
//! and per-line dynamic widths, per-SM and unified second-level MSHRs, and
//! column-wise rotation of the last-round table. On top of the simulator sit a
//! correlation attacker that recovers the last round key from timing samples,
//! and the statistics used to reason about attack effort (regression SNR,
//! Fisher-z success probability, correlation attenuation).

pub mod aes;
pub mod attack;
pub mod campaign;
pub mod coalescer;
pub mod error;
pub mod memsim;
pub mod rotation;
pub mod stats;

pub use error::{Error, Result};
