//! Online model learning for spatio-temporal fields: POD reduction, an echo
//! state network over the POD coefficients, and an ensemble square-root
//! Kalman filter that updates coefficients, reservoir state and readout
//! singular values from noisy observations.

pub mod container;
pub mod da;
pub mod esn;
pub mod field;
pub mod harness;
pub mod pod;
