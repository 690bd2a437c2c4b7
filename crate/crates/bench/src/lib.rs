//! Symbol-detection experiments around configured reservoirs: slot-level
//! detectors, the BER sweep driver and the `rclab` command line.

pub mod cli;
pub mod detect;
pub mod experiment;
