//! Numerical laboratory for nonautonomous Kolmogorov operators
//! `A(t) = Σ q_ij(t,x) D_ij + F(t,x)·∇` with unbounded coefficients.
//!
//! The crate builds radial Lyapunov functions for such operators, estimates
//! transition densities by Monte Carlo (tamed Euler + kernel density
//! estimation) and by a conservative finite-difference Fokker–Planck solve,
//! and checks weighted density bounds and kernel tail envelopes against the
//! estimated densities.
//!
//! Module map:
//!
//! - [`operator_model`]: coefficient fields, growth hypotheses, hypothesis grids.
//! - [`lyapunov`]: static and time-dependent exponential Lyapunov functions.
//! - [`coefficient_approx`]: cutoff truncation of unbounded diffusion.
//! - [`sde_engine`]: path simulation and moment curves.
//! - [`density_lab`]: KDE and finite-difference densities, the Γ functional.
//! - [`bound_envelope`]: weight constants, bound right-hand sides, tail envelopes.
//! - [`regularity_calc`]: integrability bootstrap and Moser level-set arithmetic.

// NaN must fail parameter checks, so `!(x > 0.0)` is intended throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bound_envelope;
pub mod coefficient_approx;
pub mod density_lab;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod lyapunov;
pub mod operator_model;
pub mod regularity_calc;
pub mod sde_engine;

pub use error::{Error, Result};
