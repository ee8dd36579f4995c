//! Time propagation of the Galerkin-truncated bilinear system.
//!
//! In coefficients `c_k = ⟨ψ,φ_k⟩` the equation reads `i c' = Λc − u(t) M c − f(t)`
//! with `Λ = diag(λ_k)` and `M_kl = ⟨μφ_l,φ_k⟩`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::phi1;
use crate::spectral_core::{lambda, DipoleModel, SpectralState};
use crate::C64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state dimension {state} exceeds dipole truncation {model}")]
    Dimension { state: usize, model: usize },
    #[error("step {dt} too large: λ_N·dt = {ratio:.3} exceeds safety {safety}")]
    StepTooLarge { dt: f64, ratio: f64, safety: f64 },
    #[error("norm drift {drift:e} at t = {t} exceeds 1e-12 per step")]
    NormDrift { drift: f64, t: f64 },
    #[error("gauge primitive must start at 0, got {0}")]
    PrimitiveStart(f64),
    #[error("control csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Real signal on a uniform grid.
///
/// A control (`primitive = false`) holds one value per cell and is constant on
/// each cell, so `T = step·len`. A primitive (`primitive = true`) holds nodal
/// values and is linear between nodes, so `T = step·(len − 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub values: Vec<f64>,
    pub step: f64,
    pub primitive: bool,
}

impl Control {
    pub fn new(values: Vec<f64>, step: f64) -> Self {
        Self { values, step, primitive: false }
    }

    pub fn zeros(cells: usize, duration: f64) -> Self {
        Self::new(vec![0.0; cells], duration / cells as f64)
    }

    /// Cell averages of `f` with a 4-point Gauss rule per cell.
    pub fn from_fn(duration: f64, cells: usize, f: impl Fn(f64) -> f64) -> Self {
        let h = duration / cells as f64;
        const X: [f64; 4] = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
        const W: [f64; 4] = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
        let values = (0..cells)
            .map(|n| {
                let a = n as f64 * h;
                X.iter().zip(W).map(|(x, w)| 0.5 * w * f(a + 0.5 * h * (x + 1.0))).sum()
            })
            .collect();
        Self::new(values, h)
    }

    /// Nodal primitive from nodal samples.
    pub fn primitive_from_nodes(nodes: Vec<f64>, step: f64) -> Self {
        Self { values: nodes, step, primitive: true }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cells(&self) -> usize {
        if self.primitive {
            self.values.len().saturating_sub(1)
        } else {
            self.values.len()
        }
    }

    pub fn duration(&self) -> f64 {
        self.step * self.cells() as f64
    }

    pub fn cell_start(&self, n: usize) -> f64 {
        n as f64 * self.step
    }

    /// Value at `t` (cell value or linear interpolation).
    pub fn value_at(&self, t: f64) -> f64 {
        let n = self.cells();
        if n == 0 {
            return 0.0;
        }
        let x = (t / self.step).clamp(0.0, n as f64);
        let i = (x.floor() as usize).min(n - 1);
        if self.primitive {
            let r = x - i as f64;
            self.values[i] * (1.0 - r) + self.values[i + 1] * r
        } else {
            self.values[i]
        }
    }

    /// Exact L² norm on `[0,T]`.
    pub fn l2_norm(&self) -> f64 {
        if self.primitive {
            let h = self.step;
            self.values
                .windows(2)
                .map(|w| h * (w[0] * w[0] + w[0] * w[1] + w[1] * w[1]) / 3.0)
                .sum::<f64>()
                .sqrt()
        } else {
            (self.step * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
        }
    }

    /// `S(t) = ∫₀ᵗ u` at the nodes.
    pub fn primitive(&self) -> Control {
        assert!(!self.primitive, "already a primitive");
        let mut nodes = Vec::with_capacity(self.len() + 1);
        let mut acc = 0.0;
        nodes.push(0.0);
        for v in &self.values {
            acc += v * self.step;
            nodes.push(acc);
        }
        Control::primitive_from_nodes(nodes, self.step)
    }

    /// Cell-wise derivative of a primitive.
    pub fn derivative(&self) -> Control {
        assert!(self.primitive, "derivative needs nodal values");
        Control::new(self.values.windows(2).map(|w| (w[1] - w[0]) / self.step).collect(), self.step)
    }

    /// `∫₀ᵀ u(t) e^{iωt} dt`, exact for cell-constant `u`.
    pub fn moment(&self, omega: f64) -> C64 {
        assert!(!self.primitive);
        let h = self.step;
        let cell = h * phi1(omega * h);
        let mut acc = C64::new(0.0, 0.0);
        for (n, v) in self.values.iter().enumerate() {
            if *v != 0.0 {
                acc += *v * C64::from_polar(1.0, omega * n as f64 * h);
            }
        }
        acc * cell
    }

    pub fn scaled(&self, c: f64) -> Control {
        Control { values: self.values.iter().map(|v| v * c).collect(), step: self.step, primitive: self.primitive }
    }

    /// Pointwise sum of two controls on the same grid.
    pub fn plus(&self, other: &Control) -> Control {
        assert_eq!(self.values.len(), other.values.len());
        assert!((self.step - other.step).abs() <= 1e-14 * self.step);
        Control {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            step: self.step,
            primitive: self.primitive,
        }
    }

    /// Zero-padded copy delayed by `shift_cells` on a grid of `total_cells`.
    pub fn shifted(&self, shift_cells: usize, total_cells: usize) -> Option<Control> {
        assert!(!self.primitive);
        if shift_cells + self.len() > total_cells {
            return None;
        }
        let mut values = vec![0.0; total_cells];
        values[shift_cells..shift_cells + self.len()].copy_from_slice(&self.values);
        Some(Control::new(values, self.step))
    }

    /// Writes `t,value` rows (cell start times for controls, nodes for primitives).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,value")?;
        for (n, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", fmt_f(n as f64 * self.step), fmt_f(*v))?;
        }
        Ok(())
    }

    /// Reads `t,value` rows written by [`Control::write_csv`] as a cell-constant control.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Control, SimError> {
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if !line.trim().starts_with('t') {
                    return Err(SimError::Csv("missing header row".into()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64, SimError> {
                s.ok_or_else(|| SimError::Csv(format!("line {}: expected two columns", i + 1)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| SimError::Csv(format!("line {}: {e}", i + 1)))
            };
            rows.push((parse(it.next())?, parse(it.next())?));
        }
        if rows.len() < 2 {
            return Err(SimError::Csv("need at least two rows".into()));
        }
        let step = rows[1].0 - rows[0].0;
        if step <= 0.0 {
            return Err(SimError::Csv("time column must increase".into()));
        }
        for (n, (t, _)) in rows.iter().enumerate() {
            if (t - n as f64 * step).abs() > 1e-9 * step.max(1.0) {
                return Err(SimError::Csv(format!("non-uniform grid at row {}", n + 2)));
            }
        }
        Ok(Control::new(rows.into_iter().map(|r| r.1).collect(), step))
    }
}

pub(crate) fn fmt_f(x: f64) -> String {
    format!("{x:.17e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpectralState>,
    pub conserved_norm_drift: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &SpectralState {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// CSV with columns `t, re_c1, im_c1, …`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.states.first().map_or(0, |s| s.dim());
        let mut header = String::from("t");
        for k in 1..=n {
            header.push_str(&format!(",re_c{k},im_c{k}"));
        }
        writeln!(w, "{header}")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut line = fmt_f(*t);
            for c in s.coeffs.iter() {
                line.push(',');
                line.push_str(&fmt_f(c.re));
                line.push(',');
                line.push_str(&fmt_f(c.im));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Spectral forcing `f(t)` in coefficients.
pub type Forcing<'a> = &'a dyn Fn(f64) -> DVector<C64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scheme {
    /// Strang splitting with midpoint control sampling.
    Strang,
    /// Exact exponential of `Λ − uM` on each control cell (reference solver).
    ExactCell,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagateOptions {
    pub scheme: Scheme,
    /// Upper bound on the time step; each control cell is split evenly.
    pub max_step: f64,
    /// Bound on `λ_N·dt`.
    pub safety: f64,
    /// Store every state at cell boundaries (otherwise initial and final only).
    pub record_cells: bool,
    pub check_drift: bool,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        Self { scheme: Scheme::Strang, max_step: 1e-4, safety: 2.0 * std::f64::consts::PI, record_cells: false, check_drift: true }
    }
}

/// Reusable propagator data for one dipole model.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub n: usize,
    pub lam: Vec<f64>,
    pub m: DMatrix<f64>,
    eig_vectors: DMatrix<f64>,
    eig_values: DVector<f64>,
}

impl Propagator {
    pub fn new(mu: &DipoleModel) -> Self {
        let n = mu.n;
        let m = mu.matrix.clone();
        let sym = 0.5 * (&m + m.transpose());
        let eig = SymmetricEigen::new(sym);
        Self { n, lam: (1..=n).map(lambda).collect(), m, eig_vectors: eig.eigenvectors, eig_values: eig.eigenvalues }
    }

    fn half_phase(&self, c: &mut DVector<C64>, dt: f64) {
        for (ck, l) in c.iter_mut().zip(&self.lam) {
            *ck *= C64::from_polar(1.0, -l * dt);
        }
    }

    /// `c ← e^{iθM} c` through the eigendecomposition of `M`.
    pub fn apply_dipole_exp(&self, c: &DVector<C64>, theta: f64) -> DVector<C64> {
        if theta == 0.0 {
            return c.clone();
        }
        let v = &self.eig_vectors;
        let mut y = DVector::<C64>::zeros(self.n);
        for (j, yj) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..self.n {
                acc += v[(k, j)] * c[k];
            }
            *yj = acc * C64::from_polar(1.0, theta * self.eig_values[j]);
        }
        let mut out = DVector::<C64>::zeros(self.n);
        for k in 0..self.n {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..self.n {
                acc += v[(k, j)] * y[j];
            }
            out[k] = acc;
        }
        out
    }

    fn exact_cell(&self, c: &DVector<C64>, u: f64, h: f64) -> DVector<C64> {
        let mut hm = self.m.scale(-u);
        for k in 0..self.n {
            hm[(k, k)] += self.lam[k];
        }
        let hm = 0.5 * (&hm + hm.transpose());
        let eig = SymmetricEigen::new(hm);
        let w = &eig.eigenvectors;
        let y: Vec<C64> = (0..self.n)
            .map(|j| {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..self.n {
                    acc += w[(k, j)] * c[k];
                }
                acc * C64::from_polar(1.0, -eig.eigenvalues[j] * h)
            })
            .collect();
        DVector::from_fn(self.n, |k, _| (0..self.n).map(|j| w[(k, j)] * y[j]).sum())
    }

    /// Propagates `ψ₀` under the cell-constant control `u`.
    pub fn propagate(
        &self,
        psi0: &SpectralState,
        u: &Control,
        source: Option<Forcing<'_>>,
        opts: &PropagateOptions,
    ) -> Result<Trajectory, SimError> {
        if psi0.dim() > self.n {
            return Err(SimError::Dimension { state: psi0.dim(), model: self.n });
        }
        let mut c = DVector::<C64>::zeros(self.n);
        c.rows_mut(0, psi0.dim()).copy_from(&psi0.coeffs);
        let h = u.step;
        let sub = ((h / opts.max_step).ceil() as usize).max(1);
        let dt = h / sub as f64;
        let lam_max = self.lam[self.n - 1];
        if opts.scheme == Scheme::Strang && lam_max * dt > opts.safety {
            return Err(SimError::StepTooLarge { dt, ratio: lam_max * dt, safety: opts.safety });
        }
        let norm0 = c.norm();
        let mut drift: f64 = 0.0;
        let mut times = vec![psi0.time];
        let mut states = vec![SpectralState { coeffs: c.clone(), time: psi0.time }];
        for (n, &un) in u.values.iter().enumerate() {
            let t0 = psi0.time + n as f64 * h;
            match opts.scheme {
                Scheme::ExactCell if source.is_none() => {
                    c = self.exact_cell(&c, un, h);
                }
                _ => {
                    for m in 0..sub {
                        let before = c.norm();
                        self.half_phase(&mut c, 0.5 * dt);
                        c = self.apply_dipole_exp(&c, un * dt);
                        if let Some(f) = source {
                            let tm = t0 + (m as f64 + 0.5) * dt;
                            c += f(tm) * C64::new(0.0, dt);
                        }
                        self.half_phase(&mut c, 0.5 * dt);
                        if source.is_none() && opts.check_drift {
                            let d = (c.norm() - before).abs();
                            if d > 1e-12 {
                                return Err(SimError::NormDrift { drift: d, t: t0 });
                            }
                        }
                    }
                }
            }
            drift = drift.max((c.norm() - norm0).abs());
            if opts.record_cells || n + 1 == u.len() {
                times.push(t0 + h);
                states.push(SpectralState { coeffs: c.clone(), time: t0 + h });
            }
        }
        Ok(Trajectory { times, states, conserved_norm_drift: drift })
    }
}

/// Duhamel-form propagation of `ψ₀` under `u` (see [`Propagator::propagate`]).
pub fn propagate(
    psi0: &SpectralState,
    u: &Control,
    mu: &DipoleModel,
    source: Option<Forcing<'_>>,
    opts: &PropagateOptions,
) -> Result<Trajectory, SimError> {
    Propagator::new(mu).propagate(psi0, u, source, opts)
}

/// Auxiliary system `i ψ̃' = Λψ̃ − i s D ψ̃ + s² P ψ̃` from the ground state.
///
/// `s` is a nodal primitive with `s(0) = 0`. Strang splitting with exact
/// diagonal half steps; the middle factor `exp(−dt(sD + i s²P))` is applied by
/// a scaled Taylor series.
pub fn propagate_gauge(s: &Control, mu: &DipoleModel, opts: &PropagateOptions) -> Result<Trajectory, SimError> {
    assert!(s.primitive, "propagate_gauge expects a nodal primitive");
    if s.values[0].abs() > 1e-14 {
        return Err(SimError::PrimitiveStart(s.values[0]));
    }
    let n = mu.n;
    let d = mu.gauge_drift_matrix();
    let p = mu.mu1sq_matrix();
    let lam: Vec<f64> = (1..=n).map(lambda).collect();
    let d_norm = d.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
    let p_norm = p.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
    let h = s.step;
    let sub = ((h / opts.max_step).ceil() as usize).max(1);
    let dt = h / sub as f64;
    if lam[n - 1] * dt > opts.safety {
        return Err(SimError::StepTooLarge { dt, ratio: lam[n - 1] * dt, safety: opts.safety });
    }
    let mut c = SpectralState::basis(n, 1).coeffs;
    let mut drift: f64 = 0.0;
    let mut times = vec![0.0];
    let mut states = vec![SpectralState { coeffs: c.clone(), time: 0.0 }];
    let half = |c: &mut DVector<C64>, tau: f64| {
        for (ck, l) in c.iter_mut().zip(&lam) {
            *ck *= C64::from_polar(1.0, -l * tau);
        }
    };
    for cell in 0..s.cells() {
        let (s0, s1) = (s.values[cell], s.values[cell + 1]);
        for m in 0..sub {
            let r = (m as f64 + 0.5) / sub as f64;
            let sm = s0 + (s1 - s0) * r;
            let before = c.norm();
            half(&mut c, 0.5 * dt);
            let bound = dt * (sm.abs() * d_norm + sm * sm * p_norm);
            let pieces = (bound.ceil() as usize).max(1);
            let tau = dt / pieces as f64;
            for _ in 0..pieces {
                c = taylor_action(&d, &p, sm, tau, &c);
            }
            half(&mut c, 0.5 * dt);
            if opts.check_drift {
                let dd = (c.norm() - before).abs();
                if dd > 1e-12 {
                    return Err(SimError::NormDrift { drift: dd, t: cell as f64 * h });
                }
            }
        }
        drift = drift.max((c.norm() - 1.0).abs());
        if opts.record_cells || cell + 1 == s.cells() {
            let t = (cell + 1) as f64 * h;
            times.push(t);
            states.push(SpectralState { coeffs: c.clone(), time: t });
        }
    }
    Ok(Trajectory { times, states, conserved_norm_drift: drift })
}

/// `exp(−τ(sD + i s²P)) c` by Taylor series (‖τ(sD + is²P)‖ ≤ 1 assumed).
fn taylor_action(d: &DMatrix<f64>, p: &DMatrix<f64>, s: f64, tau: f64, c: &DVector<C64>) -> DVector<C64> {
    let n = c.len();
    let mut out = c.clone();
    let mut term = c.clone();
    let a = -tau * s;
    let b = C64::new(0.0, -tau * s * s);
    for k in 1..40 {
        let mut next = DVector::<C64>::zeros(n);
        for col in 0..n {
            let tc = term[col];
            if tc == C64::new(0.0, 0.0) {
                continue;
            }
            for row in 0..n {
                next[row] += (a * d[(row, col)] + b * p[(row, col)]) * tc;
            }
        }
        next.unscale_mut(k as f64);
        out += &next;
        let mag = next.norm();
        term = next;
        if mag < 1e-17 {
            break;
        }
    }
    out
}

/// Coefficients of `e^{i s_T μ} ψ̃`, with the multiplier realised as `exp(i s_T M)`.
pub fn gauge_transform(psi_tilde: &SpectralState, s_t: f64, mu: &DipoleModel) -> SpectralState {
    let prop = Propagator::new(mu);
    let mut c = DVector::<C64>::zeros(mu.n);
    c.rows_mut(0, psi_tilde.dim()).copy_from(&psi_tilde.coeffs);
    SpectralState { coeffs: prop.apply_dipole_exp(&c, s_t), time: psi_tilde.time }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_control(rng: &mut ChaCha8Rng, cells: usize, duration: f64, amp: f64) -> Control {
        Control::new((0..cells).map(|_| amp * rng.random_range(-1.0..1.0)).collect(), duration / cells as f64)
    }

    #[test]
    fn free_evolution_is_diagonal() {
        let mu = DipoleModel::preset("x_minus_half", 16).unwrap();
        for k in [1, 3] {
            let u = Control::zeros(10, 0.3);
            let traj = propagate(&SpectralState::basis(16, k), &u, &mu, None, &PropagateOptions::default()).unwrap();
            let want = SpectralState::eigenstate(16, k, 0.3);
            assert!((&traj.final_state().coeffs - &want.coeffs).norm() < 1e-12);
        }
    }

    #[test]
    fn unitarity_random_controls() {
        let mu = DipoleModel::preset("x_minus_half", 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_control(&mut rng, 50, 0.5, 0.5);
        let traj = propagate(&SpectralState::basis(32, 1), &u, &mu, None, &PropagateOptions::default()).unwrap();
        assert!((traj.final_state().norm() - 1.0).abs() < 1e-10);
        assert!(traj.conserved_norm_drift < 1e-10);
    }

    #[test]
    fn strang_converges_to_exact_cells() {
        let mu = DipoleModel::preset("x_squared", 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_control(&mut rng, 8, 0.2, 2.0);
        let psi0 = SpectralState::basis(12, 1);
        let exact = propagate(&psi0, &u, &mu, None, &PropagateOptions { scheme: Scheme::ExactCell, ..Default::default() }).unwrap();
        let mut errs = Vec::new();
        for dt in [2e-4, 1e-4, 5e-5] {
            let o = PropagateOptions { max_step: dt, ..Default::default() };
            let t = propagate(&psi0, &u, &mu, None, &o).unwrap();
            errs.push((&t.final_state().coeffs - &exact.final_state().coeffs).norm());
        }
        let r1 = (errs[0] / errs[1]).log2();
        let r2 = (errs[1] / errs[2]).log2();
        assert!((1.8..=2.2).contains(&r1) && (1.8..=2.2).contains(&r2), "{errs:?}");
    }

    #[test]
    fn step_rejection() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        let u = Control::zeros(4, 0.1);
        let o = PropagateOptions { max_step: 1e-3, ..Default::default() };
        assert!(matches!(propagate(&SpectralState::basis(64, 1), &u, &mu, None, &o), Err(SimError::StepTooLarge { .. })));
    }

    #[test]
    fn gauge_zero_primitive_is_free() {
        let mu = DipoleModel::preset("x_minus_half", 16).unwrap();
        let s = Control::zeros(10, 0.2).primitive();
        let t = propagate_gauge(&s, &mu, &PropagateOptions::default()).unwrap();
        let want = SpectralState::eigenstate(16, 1, 0.2);
        assert!((&t.final_state().coeffs - &want.coeffs).norm() < 1e-12);
    }

    #[test]
    fn gauge_transform_roundtrip() {
        let mu = DipoleModel::preset("x_minus_half", 16).unwrap();
        let psi = SpectralState::basis(16, 1);
        let g = gauge_transform(&psi, 0.3, &mu);
        assert!((g.norm() - 1.0).abs() < 1e-14);
        let back = gauge_transform(&g, -0.3, &mu);
        assert!((&back.coeffs - &psi.coeffs).norm() < 1e-12);
        let id = gauge_transform(&psi, 0.0, &mu);
        assert!((&id.coeffs - &psi.coeffs).norm() < 1e-15);
    }

    #[test]
    fn gauge_consistency_small_system() {
        let mu = DipoleModel::preset("x_minus_half", 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_control(&mut rng, 10, 0.1, 0.5);
        let s = u.primitive();
        let o = PropagateOptions { max_step: 2.5e-5, ..Default::default() };
        let direct = propagate(&SpectralState::basis(24, 1), &u, &mu, None, &o).unwrap();
        let aux = propagate_gauge(&s, &mu, &o).unwrap();
        let mapped = gauge_transform(aux.final_state(), *s.values.last().unwrap(), &mu);
        assert!((&direct.final_state().coeffs - &mapped.coeffs).norm() < 1e-6);
    }

    #[test]
    fn forcing_matches_duhamel() {
        // i c' = Λc − f with f constant on mode 2: c₂(T) = i∫ e^{-iλ₂(T-τ)} dτ.
        let mu = DipoleModel::preset("x_minus_half", 8).unwrap();
        let f = |_t: f64| {
            let mut v = DVector::<C64>::zeros(8);
            v[1] = C64::new(1.0, 0.0);
            v
        };
        let u = Control::zeros(20, 0.1);
        let o = PropagateOptions { max_step: 1e-5, ..Default::default() };
        let t = propagate(&SpectralState::zeros(8), &u, &mu, Some(&f), &o).unwrap();
        let l2 = lambda(2);
        let want = (C64::new(1.0, 0.0) - C64::from_polar(1.0, -l2 * 0.1)) / l2;
        assert!((t.final_state().coeffs[1] - want).norm() < 1e-7);
    }

    #[test]
    fn control_primitive_and_moments() {
        let u = Control::from_fn(1.0, 100, |t| t);
        let s = u.primitive();
        assert!((s.values[100] - 0.5).abs() < 1e-14);
        assert!((s.derivative().values[7] - u.values[7]).abs() < 1e-12);
        let m = Control::new(vec![1.0; 50], 0.02).moment(3.0);
        let want = (C64::from_polar(1.0, 3.0) - 1.0) / C64::new(0.0, 3.0);
        assert!((m - want).norm() < 1e-14);
    }

    #[test]
    fn csv_roundtrip() {
        let u = Control::new(vec![0.1, -0.2, 0.3], 0.25);
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let back = Control::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.values, u.values);
        assert!((back.step - 0.25).abs() < 1e-15);
    }
}
