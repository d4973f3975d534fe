//! Desk-scale verification harness: synthetic keypoint data, training,
//! PCK evaluation, finite-difference gradient checks and token-density
//! diagnostics.

pub mod dataset;
pub mod density;
pub mod gradcheck;
pub mod pck;
pub mod report;
pub mod train;
