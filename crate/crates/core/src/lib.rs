//! Spectral toolkit for the bilinear Schrödinger equation on (0,1).
//!
//! The state is expanded on the Dirichlet eigenbasis `φ_k = √2 sin(kπx)` and the
//! control enters multiplicatively through a dipole profile `μ(x)`:
//!
//! ```text
//! i ∂t ψ = -∂²x ψ - u(t) μ(x) ψ,   ψ(t,0) = ψ(t,1) = 0.
//! ```
//!
//! Controls are piecewise constant on a uniform time grid, so every oscillatory
//! integral in the expansion, form and moment code is evaluated in closed form
//! cell by cell (see [`chain`]).

pub mod chain;
#[cfg(feature = "cli")]
pub mod cli_io;
pub mod control_synthesis;
pub mod expansion;
pub mod min_time;
pub mod moment_solver;
pub mod quadratic_forms;
pub mod quadrature;
pub mod simulator;
pub mod spectral_core;

pub use num_complex::Complex64 as C64;

pub use simulator::Control;
pub use spectral_core::{DipoleModel, ModeIndex, SpectralState};

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    items.into_iter().map(f).collect()
}
