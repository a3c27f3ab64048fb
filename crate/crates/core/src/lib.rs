//! Numerical laboratory for a two-particle measurement model: a particle in a
//! box (`x`, mass `m`) coupled to a free pointer (`X`, mass `M`) either
//! adiabatically through `f(t) δ(x) X` (protective) or impulsively through
//! `P0 f(t) D(x) X` (von Neumann), with a de Broglie–Bohm layer on top.
//!
//! Units are natural throughout: ħ = 1 and the system mass defaults to 1.

pub mod bohm;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod model;
pub mod propagator;

mod tridiag;

pub use error::{Error, Result};
pub use fields::{Axis, Grid1D, WaveFunction1D, WaveFunction2D};
