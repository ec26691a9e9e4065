//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

pub mod genome_sweep;
pub mod gradcheck;
pub mod hv;
