//! Reservoir-computing symbol detection for OFDM and MIMO-OFDM links, with
//! reservoir weights configured from channel statistics.
//!
//! The crate is organised bottom-up: numerical primitives in [`signal`],
//! rational filters in [`filters`], channel generators in [`channel`], the
//! OFDM transceiver in [`ofdm`], the reservoir network in [`reservoir`], the
//! statistics-driven configuration in [`weight_config`] and the approximation
//! error analysis in [`theory`].

pub mod rng;
pub mod channel;
pub mod filters;
pub mod ofdm;
pub mod reservoir;
pub mod signal;
pub mod theory;
pub mod weight_config;

pub use signal::{C64, ZERO};
