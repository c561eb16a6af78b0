//! Synthesizes analyzer-verified secure and vulnerable code datasets from CWE
//! seed documents, packages them for instruction tuning, and evaluates code
//! models for security and functional correctness.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod gateway;
pub mod process;
pub mod seeds;
pub mod synth;
pub mod verifier;
