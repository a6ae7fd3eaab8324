//! Uplink spectral efficiency of cell-free massive MIMO over spatially
//! correlated Rician fading with random LoS phase shifts.

pub mod channel;
pub mod config;
pub mod estimation;
pub mod linalg;
pub mod rng;
pub mod scenario;
pub mod receiver;
pub mod closed_form;
pub mod experiment;
pub mod oracle;
pub mod selftest;
