//! Simulation and optimization toolkit for self-configuring hybrid
//! reconfigurable intelligent surfaces (HRIS).
//!
//! A hybrid surface reflects a fraction `eta` of the impinging power and feeds
//! the remaining `1 - eta` to a power detector, which lets the surface sense
//! where transmitters are and steer itself without a dedicated control channel.
//!
//! # Features
//!
//! - Deployment geometry, steering vectors, distance-based path gains and a
//!   stochastic blockage model ([`geometry`])
//! - Surface configuration, phase quantization, effective channels and
//!   detector-side power sensing ([`hris`])
//! - Sum-rate metrics, closed-form surface configurations, a fractional
//!   programming benchmark and regularized zero-forcing precoding
//!   ([`optimizer`])
//! - Sector codebook design: max-min discretized, semidefinite relaxation and
//!   quantized steering, plus codebook serialization ([`codebook`])
//! - The two-phase self-configuration protocol: probing sweeps, peak
//!   detection, codeword combining and in-service discovery ([`protocol`])
//! - A deterministic seeded Monte Carlo harness with delimited-text export
//!   ([`harness`])

pub mod codebook;
pub mod geometry;
pub mod harness;
pub mod hris;
pub mod optimizer;
pub mod protocol;

mod error;

pub use error::SimError;

// The PSD cone backend links LAPACK through the system OpenBLAS.
#[cfg(feature = "sdr")]
use openblas_src as _;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SimError>;
