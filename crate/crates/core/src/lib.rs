//! Backward parabolic equations with non-local terminal conditions: finite
//! difference solver, Picard iteration on the terminal value, and a
//! Feynman–Kac Monte Carlo cross-check.

pub mod cli;
pub mod coefficients;
pub mod expr;
pub mod fixedpoint;
pub mod grid;
pub mod linalg;
pub mod montecarlo;
pub mod nonlocal;
pub mod stepper;
