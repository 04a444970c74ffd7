//! Simulation and filtering toolkit for slow-fast stochastic evolution systems
//! under spectral truncation.
//!
//! The library covers the full pipeline:
//!
//! * [`spectral`] — truncated Hilbert spaces, block-diagonal generators with
//!   exact semigroups, Lipschitz nonlinearities, and the hypothesis checker
//!   that certifies the admissible `(mu, epsilon)` window.
//! * [`noise`] — two-sided discretized Q-Wiener paths with the shift map
//!   `theta_t`, exact Ornstein–Uhlenbeck stochastic convolutions, and a flat
//!   binary record format for bit-exact replay.
//! * [`sim`] — exponential-Euler integration of the full system, integration
//!   of the reduced system on the slow manifold, and cocycle verification.
//! * [`manifold`] — construction of the random slow manifold by backward
//!   fixed-point iteration, Lipschitz certificates, the pathwise bound
//!   `R(omega)`, and the tracking-point solver with its attraction envelope.
//! * [`filtering`] — observation generation, exponential likelihood weights,
//!   Monte-Carlo evaluation of the full and reduced nonlinear filters, and
//!   the weighted test-function distance between them.

pub mod error;
pub mod filtering;
pub mod manifold;
pub mod noise;
pub mod record;
pub mod sim;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
