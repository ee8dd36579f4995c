//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every function returns a flat `Float64Array`; row layouts are given per function.

use bilinear_schrodinger::min_time::{sweep, GridConfig};
use bilinear_schrodinger::simulator::{propagate, PropagateOptions};
use bilinear_schrodinger::{Control, DipoleModel, SpectralState};
use wasm_bindgen::prelude::*;

fn model(dipole: &str, n: usize) -> Result<DipoleModel, JsError> {
    DipoleModel::preset(dipole, n).map_err(|e| JsError::new(&e.to_string()))
}

/// Populations under `u(t) = amplitude·sin(frequency·t)` from the ground state.
///
/// Rows are `t, |c₁|², …, |c_modes|²`, one per control cell plus the initial state.
#[wasm_bindgen]
pub fn simulate_populations(
    dipole: &str,
    n: usize,
    horizon: f64,
    cells: usize,
    amplitude: f64,
    frequency: f64,
    modes: usize,
) -> Result<Vec<f64>, JsError> {
    if !(horizon > 0.0) || cells == 0 || modes == 0 || modes > n {
        return Err(JsError::new("need horizon > 0, cells ≥ 1 and 1 ≤ modes ≤ n"));
    }
    let mu = model(dipole, n)?;
    let u = Control::from_fn(horizon, cells, |t| amplitude * (frequency * t).sin());
    let opts = PropagateOptions { record_cells: true, ..Default::default() };
    let tr = propagate(&SpectralState::basis(n, 1), &u, &mu, None, &opts).map_err(|e| JsError::new(&e.to_string()))?;
    let mut out = Vec::with_capacity(tr.times.len() * (modes + 1));
    for (t, s) in tr.times.iter().zip(&tr.states) {
        out.push(*t);
        out.extend(s.coeffs.iter().take(modes).map(|c| c.norm_sqr()));
    }
    Ok(out)
}

/// Couplings `⟨μφ₁, φ_k⟩` for `k = 1..=n`.
#[wasm_bindgen]
pub fn dipole_couplings(dipole: &str, n: usize) -> Result<Vec<f64>, JsError> {
    let mu = model(dipole, n)?;
    Ok((1..=n).map(|k| mu.m(1, k)).collect())
}

/// `λ(T)` on `points` evenly spaced horizons; rows are `T, λ(T)`.
#[wasm_bindgen]
pub fn lambda_sweep(dipole: &str, t_min: f64, t_max: f64, points: usize, cells: usize) -> Result<Vec<f64>, JsError> {
    if !(t_min > 0.0 && t_min < t_max) || points < 2 || cells < 8 {
        return Err(JsError::new("need 0 < t_min < t_max, points ≥ 2 and cells ≥ 8"));
    }
    let grid = GridConfig { cells, j_max: 64, sine_modes: 16, ..Default::default() };
    let mu = model(dipole, grid.j_max)?;
    let ts: Vec<f64> = (0..points).map(|i| t_min + (t_max - t_min) * i as f64 / (points - 1) as f64).collect();
    let rows = sweep(&mu, &ts, &grid).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(rows.iter().flat_map(|r| [r.t, r.lambda]).collect())
}
