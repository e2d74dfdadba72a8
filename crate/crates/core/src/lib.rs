//! A desk-scale laboratory for wave-based geometry recovery on closed
//! discrete manifolds.
//!
//! The crate simulates the magnetic Schrödinger wave equation
//! `(d^2/dt^2 + L_{g,A,V}) u = f` on periodic grids (flat circles and tori
//! with conformal metrics), records the local source-to-solution operator on
//! an observation set, and then recovers — from that recorded data alone —
//! geodesic distances, cut times, travel time data, pointwise wave products,
//! and the unit-modulus gauge linking two lower-order-term configurations
//! with equal data.
//!
//! Modules follow the pipeline:
//! - [`geometry`]: grids, conformal metrics, distance oracles, domains of
//!   influence, crescent sets;
//! - [`operator`]: Hermitian Peierls-phase discretization of `L_{g,A,V}` and
//!   its dense spectral decomposition;
//! - [`wave`]: spectral Duhamel solver for the forward Cauchy problem;
//! - [`s2s`]: the recorded source-to-solution operator and the
//!   Blagovestchenskii identity machinery;
//! - [`control`]: Gram matrices, regularized approximate control, and the
//!   ball-inclusion residual test;
//! - [`recon`]: the inversion pipeline proper;
//! - [`scene`]: deterministic construction of test scenes.

pub mod control;
pub mod error;
pub mod geometry;
pub mod operator;
pub mod recon;
pub mod s2s;
pub mod wave;

pub use error::{Error, Result};
