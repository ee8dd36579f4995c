//! Constructive steering of the truncated system.
//!
//! * linear steering of the controlled modes through the first-order moment problem;
//! * second-order bricks `(v, w)` with `v ∈ V_T` whose second-order state lies on a
//!   lost direction, time-shifted copies that rotate it, and the non-negative cone
//!   decomposition that assembles any target of the lost space;
//! * third-order bricks `(v, w, ν)` for directions of order three;
//! * the fixed-point loop for the full nonlinear problem.
//!
//! Lost-space targets are given in the time-invariant coordinates
//! `⟨z, ψ_k(T)⟩`, one complex number per lost mode. For `k = 1` only the
//! imaginary part is reachable and the real part must vanish.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expansion::ExpansionEngine;
use crate::min_time::{default_bracket, estimate_tmin2, GridConfig, MinTimeError};
use crate::moment_solver::{project_with, solve_moments, MomentError, MomentOperator, MomentProblem};
use crate::quadratic_forms::{classify_order, v_plus_control, q2, q3, FormError, Order};
use crate::simulator::{Control, PropagateOptions, Propagator, Scheme, SimError};
use crate::spectral_core::{lambda, lost_directions, omega_of, sobolev_norm, DipoleModel, LostDirectionSet, SpectralState};
use crate::C64;

/// Threshold on `|⟨μφ₁,φ_k⟩|·k³` below which a mode counts as lost.
pub const LOST_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("shift {theta} plus window {window} exceeds horizon {horizon}")]
    SupportOverflow { theta: f64, window: f64, horizon: f64 },
    #[error("{what} = {value} is not a non-negative multiple of the step {step}")]
    OffGrid { what: &'static str, value: f64, step: f64 },
    #[error("target has component {value:.3e} on lost direction {k}")]
    LostComponent { k: usize, value: f64 },
    #[error("target is not tangent: Re⟨target, ψ₁(T)⟩ = {0:.3e}")]
    NotTangent(f64),
    #[error("search floor not reached for mode {k}: best {best:.3e}, floor {floor:.3e}")]
    SearchFloor { k: usize, best: f64, floor: f64 },
    #[error("T = {t} does not exceed T♯ = {t_sharp}")]
    TooShort { t: f64, t_sharp: f64 },
    #[error("infeasible schedule: {0}")]
    Timing(String),
    #[error("lost set {0:?} is not supported; expected {{1}}, {{K}} or {{1, K}}")]
    UnsupportedLostSet(Vec<usize>),
    #[error("no non-negative decomposition of the target")]
    Decomposition,
    #[error("mode {0} is not of third order")]
    NotThirdOrder(usize),
    #[error("target has {got} lost coordinates, expected {expected}")]
    TargetShape { got: usize, expected: usize },
    #[error("fixed point not converged after {iterations} iterations: final error {error:.3e}")]
    Divergence { iterations: usize, error: f64 },
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    MinTime(#[from] MinTimeError),
}

type Result<T> = std::result::Result<T, SynthesisError>;

const I: C64 = C64::new(0.0, 1.0);

/// Lost set of the model at its own truncation.
pub fn lost_set(mu: &DipoleModel) -> LostDirectionSet {
    lost_directions(mu, mu.n, LOST_TOL)
}

/// Rotation period `π/(λ_K − λ₁)`.
pub fn half_period(k: usize) -> f64 {
    PI / (lambda(k) - lambda(1))
}

fn cells_of(what: &'static str, value: f64, step: f64) -> Result<usize> {
    let r = value / step;
    let n = r.round();
    if n < 0.0 || (r - n).abs() > 1e-9 * r.abs().max(1.0) {
        return Err(SynthesisError::OffGrid { what, value, step });
    }
    Ok(n as usize)
}

/// Zero-padded copy of `v` delayed by `θ` on `[0, T_new]`.
pub fn time_shift(v: &Control, theta: f64, t_new: f64) -> Result<Control> {
    let shift = cells_of("θ", theta, v.step)?;
    let total = cells_of("T_new", t_new, v.step)?;
    v.shifted(shift, total)
        .ok_or(SynthesisError::SupportOverflow { theta, window: v.duration(), horizon: t_new })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub theta: f64,
    pub k_max: usize,
    /// `max_k |⟨Ψ_θ(T̃),ψ_k(T̃)⟩ − e^{i(λ_k−λ₁)θ}⟨Ψ(T),ψ_k(T)⟩|`, relative to `max_k |⟨Ψ(T),ψ_k(T)⟩|`.
    pub psi_error: f64,
    /// Same for `ξ`.
    pub xi_error: f64,
    /// Relative change of the `k = 1` coefficients of `Ψ` and `ξ`.
    pub k1_change: f64,
}

/// Compares first- and second-order coefficients of `(v, w)` on `[0,T]` with
/// those of the copy shifted by `θ` on `[0, T_new]`.
pub fn rotation_check(v: &Control, w: &Control, theta: f64, t_new: f64, mu: &DipoleModel, k_max: usize) -> Result<RotationReport> {
    let k_max = k_max.min(mu.n);
    let engine = ExpansionEngine::new(mu, v.step, 2);
    let [a1, a2, _] = engine.run(v, Some(w), None);
    let vs = time_shift(v, theta, t_new)?;
    let ws = time_shift(w, theta, t_new)?;
    let [b1, b2, _] = engine.run(&vs, Some(&ws), None);
    // Interaction coefficients are ⟨·,ψ_k(t)⟩ at the final time.
    let compare = |a: &DVector<C64>, b: &DVector<C64>| {
        let scale = (0..k_max).fold(0.0f64, |m, k| m.max(a[k].norm())).max(f64::MIN_POSITIVE);
        let err = (0..k_max)
            .map(|k| (b[k] - a[k] * C64::from_polar(1.0, (lambda(k + 1) - lambda(1)) * theta)).norm())
            .fold(0.0, f64::max);
        (err / scale, (b[0] - a[0]).norm() / scale)
    };
    let (psi_error, c1) = compare(&a1, &b1);
    let (xi_error, c2) = compare(&a2, &b2);
    Ok(RotationReport { theta, k_max, psi_error, xi_error, k1_change: c1.max(c2) })
}

/// Moment targets turning coefficients `c_k` at `t_end` into a control on the
/// window `[t0, t0 + cells·h]` whose first-order contribution is `c_k`.
fn steer_window(coeffs: &[(usize, C64)], t_end: f64, t0: f64, cells: usize, h: f64, mu: &DipoleModel) -> Result<(Control, f64, f64)> {
    if coeffs.is_empty() || coeffs.iter().all(|(_, c)| *c == C64::new(0.0, 0.0)) {
        return Ok((Control::new(vec![0.0; cells], h), 0.0, 1.0));
    }
    let mut freqs = Vec::with_capacity(coeffs.len());
    let mut targets = Vec::with_capacity(coeffs.len());
    for &(k, c) in coeffs {
        let w = omega_of(k);
        let mut m = c * C64::from_polar(1.0, lambda(k) * t_end) / (I * mu.m(k, 1)) * C64::from_polar(1.0, -w * t0);
        if w == 0.0 {
            m.im = 0.0;
        }
        freqs.push(w);
        targets.push(m);
    }
    let sol = solve_moments(&MomentProblem::new(freqs, targets, cells as f64 * h), cells)?;
    Ok((sol.control, sol.residual, sol.condition))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearSteer {
    pub control: Control,
    pub moment_residual: f64,
    pub gram_condition: f64,
    /// `‖u‖ / ‖target‖`.
    pub norm_ratio: f64,
    /// `max_k |⟨μφ₁,φ_k⟩|⁻¹ / √λ_min(G)`, an upper bound for `norm_ratio`.
    pub gain_bound: f64,
}

/// Control on `[0,T]` whose first-order state equals `target` (coefficients at time `T`).
pub fn linear_steer(target: &SpectralState, t: f64, cells: usize, mu: &DipoleModel) -> Result<LinearSteer> {
    let lost = lost_set(mu);
    let n = target.dim().min(mu.n);
    let scale = target.norm();
    for &k in lost.indices.iter().filter(|&&k| k <= n) {
        let c = target.coeffs[k - 1].norm();
        if c > 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(SynthesisError::LostComponent { k, value: c });
        }
    }
    if !lost.contains(1) && scale > 0.0 {
        let re = target.component(1, t).re;
        if re.abs() > 1e-10 * scale {
            return Err(SynthesisError::NotTangent(re));
        }
    }
    let h = t / cells as f64;
    let coeffs: Vec<(usize, C64)> = lost.controlled(n).into_iter().map(|k| (k, target.coeffs[k - 1])).collect();
    let (control, residual, condition) = steer_window(&coeffs, t, 0.0, cells, h, mu)?;
    let freqs: Vec<f64> = coeffs.iter().map(|(k, _)| omega_of(*k)).collect();
    let gram = MomentOperator::new(&freqs, cells, h).gram();
    let lmin = SymmetricEigen::new(gram).eigenvalues.min().max(f64::MIN_POSITIVE);
    let inv_coupling = coeffs.iter().map(|(k, _)| 1.0 / mu.m(*k, 1).abs()).fold(0.0, f64::max);
    let norm_ratio = if scale > 0.0 { control.l2_norm() / scale } else { 0.0 };
    Ok(LinearSteer { control, moment_residual: residual, gram_condition: condition, norm_ratio, gain_bound: inv_coupling / lmin.sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Estimate of `T²_min` for the model (e.g. from [`estimate_t2_min`]).
    pub t2_min: f64,
    /// Relative safety margin applied to `t2_min`.
    pub margin: f64,
    /// Cells per rotation half period `π/(λ_K−λ₁)`.
    pub cells_per_period: usize,
    /// Band-limited seed modes `sin(mπt/L)`, `m = 1..seed_modes`.
    pub seed_modes: usize,
    /// Random trials of the cubic search.
    pub trials: usize,
    /// Floor on the normalised form value `|q|/‖v‖ⁿ` of a seed.
    pub floor: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { t2_min: 2.0 / PI, margin: 0.1, cells_per_period: 128, seed_modes: 16, trials: 32, floor: 1e-10, seed: 0 }
    }
}

impl SynthesisConfig {
    pub fn t2_used(&self) -> f64 {
        self.t2_min * (1.0 + self.margin)
    }
}

/// Upper end of the grid-converged `T̃²_min` bracket for `μ` (requires `⟨μφ₁,φ₁⟩ = 0`).
pub fn estimate_t2_min(mu: &DipoleModel, grid: &GridConfig, tol: f64) -> Result<f64> {
    let model = if mu.n < grid.j_max { mu.with_truncation(grid.j_max).map_err(|e| SynthesisError::Timing(e.to_string()))? } else { mu.clone() };
    let bracket = default_bracket(&model, grid.j_max, 1e-3)?;
    let (est, _) = estimate_tmin2(&model, bracket, tol, grid)?;
    Ok(est.interval.hi.max(est.interval_fine.hi))
}

/// `T♯` for the supported lost sets, with `t2` the (margin-adjusted) `T²_min`.
pub fn t_sharp(lost: &[usize], t2: f64) -> Result<f64> {
    match lost {
        [1] => Ok(t2),
        [k] => Ok(half_period(*k)),
        [1, k] => Ok(2.0 * t2 + 3.0 * half_period(*k)),
        other => Err(SynthesisError::UnsupportedLostSet(other.to_vec())),
    }
}

/// `(L²-normalised) sin(mπt/L)` projected on `V_L`.
fn seed_basis(cells: usize, h: f64, modes: usize, op: &MomentOperator) -> Result<Vec<Control>> {
    let l = cells as f64 * h;
    (1..=modes).map(|m| Ok(project_with(op, &Control::from_fn(l, cells, |t| (m as f64 * PI * t / l).sin()))?)).collect()
}

fn controlled_freqs(lost: &LostDirectionSet, n: usize) -> Vec<f64> {
    lost.controlled(n).into_iter().map(omega_of).collect()
}

fn l2_inner(a: &Control, b: &Control) -> f64 {
    a.step * a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>()
}

fn combine(basis: &[Control], c: &DVector<f64>) -> Control {
    let mut v = Control::new(vec![0.0; basis[0].len()], basis[0].step);
    for (b, ci) in basis.iter().zip(c.iter()) {
        v = v.plus(&b.scaled(*ci));
    }
    v
}

/// Rayleigh–Ritz extremes of the real quadratic forms `Re B` and `Im B` on the span of `basis`.
struct Ritz {
    /// `(is_imaginary_part, value, coefficients)` for the bottom and top eigenpairs of each part.
    extremes: Vec<(bool, f64, DVector<f64>)>,
}

fn ritz(basis: &[Control], form: impl Fn(&Control) -> Result<C64> + Sync) -> Result<Ritz> {
    let m = basis.len();
    let diag: Vec<C64> = basis.iter().map(&form).collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let sums: Vec<Result<C64>> = crate::par_map(pairs.clone(), |(i, j)| form(&basis[i].plus(&basis[j])));
    let mut b = DMatrix::<C64>::zeros(m, m);
    for i in 0..m {
        b[(i, i)] = diag[i];
    }
    for ((i, j), s) in pairs.into_iter().zip(sums) {
        let x = (s? - diag[i] - diag[j]) * 0.5;
        b[(i, j)] = x;
        b[(j, i)] = x;
    }
    let g = DMatrix::from_fn(m, m, |i, j| l2_inner(&basis[i], &basis[j]));
    let eg = SymmetricEigen::new(g);
    let gmax = eg.eigenvalues.max();
    let keep: Vec<usize> = (0..m).filter(|&i| eg.eigenvalues[i] > 1e-12 * gmax).collect();
    let x = DMatrix::from_fn(m, keep.len(), |r, c| eg.eigenvectors[(r, keep[c])] / eg.eigenvalues[keep[c]].sqrt());
    let mut extremes = Vec::new();
    for imag in [false, true] {
        let part = b.map(|z| if imag { z.im } else { z.re });
        let a = x.transpose() * part * &x;
        let e = SymmetricEigen::new((&a + a.transpose()) * 0.5);
        let (lo, hi) = (e.eigenvalues.imin(), e.eigenvalues.imax());
        for idx in [lo, hi] {
            extremes.push((imag, e.eigenvalues[idx], &x * e.eigenvectors.column(idx)));
        }
    }
    Ok(Ritz { extremes })
}

/// Sign requested from a second-order brick on `k = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

/// A second-order brick on `[0, L]`: `Ψ(L) = 0`, controlled second-order
/// components cancelled, `⟨ξ(L), ψ_K(L)⟩ = value` with `|value| = 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SecondOrderBrick {
    pub k: usize,
    pub v: Control,
    pub w: Control,
    /// `⟨ξ(L), ψ_K(L)⟩`.
    pub value: C64,
    /// Normalised search value `|q|/‖v‖²` of the seed.
    pub search_value: f64,
    pub psi_norm: f64,
    /// `max_k |⟨ξ(L),ψ_k(L)⟩|` over controlled `k`.
    pub off_target: f64,
}

/// Seeds `v ∈ V_L` with a non-zero second-order projection on `ψ_K` and solves
/// for `w` cancelling the controlled components.
///
/// The seed maximises the requested part of `q2` over the span of the
/// band-limited modes (plus `v₊ = cos(π²t)1_{[0,2/π]}` when `K = 1` and it fits).
pub fn reach_second_order(k: usize, sign: Sign, t: f64, cells: usize, mu: &DipoleModel, cfg: &SynthesisConfig) -> Result<SecondOrderBrick> {
    let lost = lost_set(mu);
    if !lost.contains(k) {
        return Err(SynthesisError::LostComponent { k, value: mu.m(k, 1) });
    }
    let h = t / cells as f64;
    let op = MomentOperator::new(&controlled_freqs(&lost, mu.n), cells, h);
    let mut basis = seed_basis(cells, h, cfg.seed_modes, &op)?;
    if k == 1 && t >= 2.0 / PI {
        let vp = v_plus_control(((2.0 / PI) / h).round() as usize);
        let mut vals = vp.values.clone();
        vals.resize(cells, 0.0);
        basis.push(project_with(&op, &Control::new(vals, h))?);
    }
    let form = |v: &Control| -> Result<C64> { Ok(q2(k, v, mu, mu.n)?.value()) };
    let r = ritz(&basis, form)?;
    let pick = if k == 1 {
        let (_, val, c) = r.extremes.iter().filter(|e| e.0).map(|e| (e.0, e.1, e.2.clone())).fold(None, |best: Option<(bool, f64, DVector<f64>)>, e| {
            let better = match (&best, sign) {
                (None, _) => true,
                (Some(b), Sign::Plus) => e.1 > b.1,
                (Some(b), Sign::Minus) => e.1 < b.1,
            };
            if better { Some(e) } else { best }
        }).unwrap();
        let signed = if sign == Sign::Plus { val } else { -val };
        if signed <= cfg.floor {
            return Err(SynthesisError::SearchFloor { k, best: signed, floor: cfg.floor });
        }
        (val.abs(), c)
    } else {
        let e = r.extremes.iter().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
        if e.1.abs() <= cfg.floor {
            return Err(SynthesisError::SearchFloor { k, best: e.1.abs(), floor: cfg.floor });
        }
        (e.1.abs(), e.2.clone())
    };
    let v0 = combine(&basis, &pick.1);
    let q = q2(k, &v0, mu, mu.n)?.value();
    let v = v0.scaled(1.0 / if k == 1 { q.im.abs() } else { q.norm() }.sqrt());
    second_order_brick(k, v, pick.0, &lost, mu)
}

fn second_order_brick(k: usize, v: Control, search_value: f64, lost: &LostDirectionSet, mu: &DipoleModel) -> Result<SecondOrderBrick> {
    let h = v.step;
    let cells = v.len();
    let l = v.duration();
    let engine = ExpansionEngine::new(mu, h, 2);
    let zero = Control::new(vec![0.0; cells], h);
    let xi = engine.terms(&v, &zero, None).xi_t;
    let cancel: Vec<(usize, C64)> = lost.controlled(mu.n).into_iter().map(|j| (j, -xi.coeffs[j - 1])).collect();
    let (w, _, _) = steer_window(&cancel, l, 0.0, cells, h, mu)?;
    let terms = engine.terms(&v, &w, None);
    let off_target = lost.controlled(mu.n).into_iter().map(|j| terms.xi_t.coeffs[j - 1].norm()).fold(0.0, f64::max);
    Ok(SecondOrderBrick {
        k,
        value: terms.xi_t.component(k, l),
        psi_norm: terms.psi_t.norm(),
        off_target,
        search_value,
        v,
        w,
    })
}

/// Timing of the lost-direction construction on a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lost: Vec<usize>,
    /// Requested horizon.
    pub t_requested: f64,
    /// Horizon snapped down to the grid.
    pub t: f64,
    pub step: f64,
    pub cells: usize,
    pub t_sharp: f64,
    /// `T²_min` with margin, used as the `k = 1` brick window.
    pub t2_used: f64,
    /// `(start, duration)` of the `k = 1` brick copies.
    pub k1_windows: Vec<(f64, f64)>,
    /// Odd multiple of the half period separating the two `k = 1` copies.
    pub odd_multiple: Option<usize>,
    /// `(start, duration)` of the four rotated copies.
    pub rotation_windows: Vec<(f64, f64)>,
    pub t_theta: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct CellWindow {
    start: usize,
    len: usize,
}

fn schedule(lost: &[usize], t: f64, cfg: &SynthesisConfig) -> Result<(Schedule, Vec<CellWindow>, Vec<CellWindow>)> {
    let t2 = cfg.t2_used();
    let ts = t_sharp(lost, t2)?;
    if t <= ts {
        return Err(SynthesisError::TooShort { t, t_sharp: ts });
    }
    let m = cfg.cells_per_period;
    let k_rot = lost.iter().copied().find(|&k| k >= 2);
    let h = match k_rot {
        Some(k) => half_period(k) / m as f64,
        None => t2 / m as f64,
    };
    let cells = (t / h + 1e-9).floor() as usize;
    let t_grid = cells as f64 * h;
    let mut k1 = Vec::new();
    let mut rot = Vec::new();
    let mut odd_multiple = None;
    let mut t_theta = None;
    let rotation_start;
    if lost.contains(&1) {
        let tc1 = ((t2 / h).ceil() as usize).max(1);
        if k_rot.is_some() {
            let mut odd = 1;
            while odd * m < tc1 {
                odd += 2;
            }
            odd_multiple = Some(odd);
            k1.push(CellWindow { start: 0, len: tc1 });
            k1.push(CellWindow { start: odd * m, len: tc1 });
            rotation_start = odd * m + tc1;
        } else {
            k1.push(CellWindow { start: 0, len: cells });
            rotation_start = cells;
        }
    } else {
        rotation_start = 0;
    }
    if k_rot.is_some() {
        let t1 = cells.checked_sub(rotation_start).ok_or_else(|| SynthesisError::Timing("k = 1 copies exceed the horizon".into()))?;
        let room = m.min(t1.saturating_sub(m));
        let s = (0.95 * room as f64).floor() as usize;
        let theta = s / 2 + 1;
        let tc = (0.45 * s as f64).floor() as usize;
        if tc < 8 || theta <= tc || theta + tc >= m {
            return Err(SynthesisError::Timing(format!("rotated window of {tc} cells (T₁ = {} cells) is too short", t1)));
        }
        t_theta = Some(theta as f64 * h);
        for off in [0, theta, m, theta + m] {
            rot.push(CellWindow { start: rotation_start + off, len: tc });
        }
        if rot[3].start + tc > cells {
            return Err(SynthesisError::Timing("rotated copies exceed the horizon".into()));
        }
    }
    let span = |w: &CellWindow| (w.start as f64 * h, w.len as f64 * h);
    let sched = Schedule {
        lost: lost.to_vec(),
        t_requested: t,
        t: t_grid,
        step: h,
        cells,
        t_sharp: ts,
        t2_used: t2,
        k1_windows: k1.iter().map(span).collect(),
        odd_multiple,
        rotation_windows: rot.iter().map(span).collect(),
        t_theta,
    };
    Ok((sched, k1, rot))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    /// Two copies of the `k = 1` brick separated by an odd multiple of the half period.
    KOne(Sign),
    /// Rotated copy `j ∈ 1..=4` of the brick on direction `k`.
    Rotated { k: usize, j: usize },
    /// Third-order brick.
    ThirdOrder { k: usize, j: usize },
}

/// Unit generator of the lost space placed on the full grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Generator {
    pub role: BlockRole,
    pub windows: Vec<(f64, f64)>,
    pub v: Control,
    pub w: Control,
    /// Realised lost coordinates of `ξ(T)`.
    pub coords: Vec<f64>,
    /// `max_k |moment|` of `v` over each window's controlled frequencies.
    pub window_moment: f64,
}

/// Real coordinates of the lost space: `Im⟨·,ψ₁⟩` for `k = 1`, `Re, Im⟨·,ψ_K⟩` otherwise.
pub fn lost_coords(state: &SpectralState, lost: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &k in lost {
        let c = state.component(k, state.time);
        if k == 1 {
            out.push(c.im);
        } else {
            out.push(c.re);
            out.push(c.im);
        }
    }
    out
}

/// State with the given lost coordinates at time `t`.
pub fn from_lost_coords(coords: &[f64], lost: &[usize], n: usize, t: f64) -> SpectralState {
    let mut s = SpectralState::zeros(n);
    s.time = t;
    let mut i = 0;
    for &k in lost {
        let c = if k == 1 {
            i += 1;
            C64::new(0.0, coords[i - 1])
        } else {
            i += 2;
            C64::new(coords[i - 2], coords[i - 1])
        };
        s.coeffs[k - 1] = c * C64::from_polar(1.0, -lambda(k) * t);
    }
    s
}

fn place(c: &Control, start: usize, total: usize) -> Control {
    c.shifted(start, total).expect("window inside horizon")
}

/// Generators of the second-order lost space on `[0,T]`, built once and reused for every target.
#[derive(Clone, Debug)]
pub struct SecondOrderBasis {
    pub schedule: Schedule,
    pub generators: Vec<Generator>,
    pub bricks: Vec<SecondOrderBrick>,
    engine: ExpansionEngine,
    n: usize,
}

impl SecondOrderBasis {
    pub fn build(mu: &DipoleModel, t: f64, cfg: &SynthesisConfig) -> Result<Self> {
        let lost = lost_set(mu);
        let (sched, k1, rot) = schedule(&lost.indices, t, cfg)?;
        let h = sched.step;
        let total = sched.cells;
        let engine = ExpansionEngine::new(mu, h, 2);
        let freqs = controlled_freqs(&lost, mu.n);
        let window_moment = |v: &Control, wins: &[CellWindow]| {
            wins.iter()
                .map(|w| {
                    let local = Control::new(v.values[w.start..w.start + w.len].to_vec(), h);
                    MomentOperator::new(&freqs, w.len, h).moments(&local).iter().map(|z| z.norm()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        };
        let mut generators = Vec::new();
        let mut bricks = Vec::new();
        if let Some(first) = k1.first() {
            for sign in [Sign::Plus, Sign::Minus] {
                let b = reach_second_order(1, sign, first.len as f64 * h, first.len, mu, cfg)?;
                let mut v = Control::new(vec![0.0; total], h);
                let mut w = v.clone();
                for win in &k1 {
                    v = v.plus(&place(&b.v, win.start, total));
                    w = w.plus(&place(&b.w, win.start, total));
                }
                let xi = engine.terms(&v, &w, None).xi_t;
                generators.push(Generator {
                    role: BlockRole::KOne(sign),
                    windows: k1.iter().map(|x| (x.start as f64 * h, x.len as f64 * h)).collect(),
                    coords: lost_coords(&xi, &lost.indices),
                    window_moment: window_moment(&v, &k1),
                    v,
                    w,
                });
                bricks.push(b);
            }
        }
        if let (Some(first), Some(k)) = (rot.first(), lost.indices.iter().copied().find(|&k| k >= 2)) {
            let b = reach_second_order(k, Sign::Plus, first.len as f64 * h, first.len, mu, cfg)?;
            for (j, win) in rot.iter().enumerate() {
                let v = place(&b.v, win.start, total);
                let w = place(&b.w, win.start, total);
                let xi = engine.terms(&v, &w, None).xi_t;
                generators.push(Generator {
                    role: BlockRole::Rotated { k, j: j + 1 },
                    windows: vec![(win.start as f64 * h, win.len as f64 * h)],
                    coords: lost_coords(&xi, &lost.indices),
                    window_moment: window_moment(&v, std::slice::from_ref(win)),
                    v,
                    w,
                });
            }
            bricks.push(b);
        }
        Ok(Self { schedule: sched, generators, bricks, engine, n: mu.n })
    }

    pub fn dim(&self) -> usize {
        self.schedule.lost.iter().map(|&k| if k == 1 { 1 } else { 2 }).sum()
    }

    /// Non-negative weights `(generator index, c)` reproducing `coords`.
    pub fn decompose(&self, coords: &[f64]) -> Result<Vec<(usize, f64)>> {
        let d = self.dim();
        if coords.len() != d {
            return Err(SynthesisError::TargetShape { got: coords.len(), expected: d });
        }
        let scale = coords.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return Ok(Vec::new());
        }
        let k1: Vec<usize> = (0..self.generators.len()).filter(|&i| matches!(self.generators[i].role, BlockRole::KOne(_))).collect();
        let rot: Vec<usize> = (0..self.generators.len()).filter(|&i| matches!(self.generators[i].role, BlockRole::Rotated { .. })).collect();
        let mut candidates: Vec<Vec<usize>> = Vec::new();
        let k1_opts: Vec<Option<usize>> = if k1.is_empty() { vec![None] } else { k1.iter().map(|&i| Some(i)).collect() };
        let rot_opts: Vec<Option<(usize, usize)>> =
            if rot.is_empty() { vec![None] } else { (0..4).map(|j| Some((rot[j], rot[(j + 1) % 4]))).collect() };
        for a in &k1_opts {
            for b in &rot_opts {
                let mut set = Vec::new();
                set.extend(a.iter().copied());
                if let Some((x, y)) = b {
                    set.push(*x);
                    set.push(*y);
                }
                candidates.push(set);
            }
        }
        let target = DVector::from_column_slice(coords);
        let mut best: Option<(f64, Vec<(usize, f64)>)> = None;
        for set in candidates {
            let a = DMatrix::from_fn(d, set.len(), |r, c| self.generators[set[c]].coords[r]);
            let Some(x) = a.clone().lu().solve(&target) else { continue };
            let resid = (&a * &x - &target).norm();
            let minc = x.min();
            if resid > 1e-9 * scale || minc < -1e-10 * x.amax() {
                continue;
            }
            let total: f64 = x.iter().map(|c| c.max(0.0)).sum();
            if best.as_ref().is_none_or(|b| total < b.0) {
                best = Some((total, set.iter().zip(x.iter()).map(|(&i, &c)| (i, c.max(0.0))).collect()));
            }
        }
        best.map(|b| b.1).ok_or(SynthesisError::Decomposition)
    }

    /// The plan reaching `ξ(T) = z` (lost coordinates) with `Ψ(T) = 0`.
    pub fn plan(&self, coords: &[f64]) -> Result<SynthesisPlan> {
        let weights = self.decompose(coords)?;
        let h = self.schedule.step;
        let mut v = Control::new(vec![0.0; self.schedule.cells], h);
        let mut w = v.clone();
        let mut blocks = Vec::new();
        let mut predicted = vec![0.0; coords.len()];
        let mut xi_sum = DVector::<C64>::zeros(self.n);
        for &(i, c) in &weights {
            let g = &self.generators[i];
            let (vi, wi) = (g.v.scaled(c.sqrt()), g.w.scaled(c));
            v = v.plus(&vi);
            w = w.plus(&wi);
            xi_sum += self.engine.run(&vi, Some(&wi), None)[1].clone();
            for (p, x) in predicted.iter_mut().zip(&g.coords) {
                *p += c * x;
            }
            blocks.push(PlanBlock { role: g.role, windows: g.windows.clone(), weight: c, window_moment: g.window_moment * c.sqrt() });
        }
        let [a1, a2, _] = self.engine.run(&v, Some(&w), None);
        let t = self.schedule.t;
        let to_state = |a: &DVector<C64>| SpectralState {
            coeffs: DVector::from_fn(self.n, |k, _| a[k] * C64::from_polar(1.0, -lambda(k + 1) * t)),
            time: t,
        };
        let xi = to_state(&a2);
        let z = from_lost_coords(coords, &self.schedule.lost, self.n, t);
        let zn = z.norm();
        let xi_error = (&xi.coeffs - &z.coeffs).norm();
        let additivity = (&a2 - &xi_sum).norm();
        Ok(SynthesisPlan {
            schedule: self.schedule.clone(),
            target: coords.to_vec(),
            blocks,
            v,
            w,
            nu: None,
            achieved: lost_coords(&xi, &self.schedule.lost),
            certificates: Certificates {
                psi_norm: a1.norm(),
                xi_error,
                xi_relative_error: if zn > 0.0 { xi_error / zn } else { xi_error },
                zeta_error: None,
                additivity_defect: additivity,
                predicted,
            },
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanBlock {
    pub role: BlockRole,
    /// `(start, duration)` of each active window.
    pub windows: Vec<(f64, f64)>,
    /// Weight `c` of the generator; its controls are scaled by `(√c, c)`.
    pub weight: f64,
    pub window_moment: f64,
}

/// Expansion-module certificates of a plan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certificates {
    /// `‖Ψ(T)‖`.
    pub psi_norm: f64,
    /// `‖ξ(T) − z‖` (second order) or `‖ξ(T)‖` (third order).
    pub xi_error: f64,
    pub xi_relative_error: f64,
    /// `‖ζ(T) − z‖` for third-order plans.
    pub zeta_error: Option<f64>,
    /// `‖ξ(Σ blocks) − Σ ξ(block)‖` (third order: same for `ζ`).
    pub additivity_defect: f64,
    /// Lost coordinates predicted from the generators.
    pub predicted: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisPlan {
    pub schedule: Schedule,
    /// Lost coordinates of the target.
    pub target: Vec<f64>,
    pub blocks: Vec<PlanBlock>,
    pub v: Control,
    pub w: Control,
    pub nu: Option<Control>,
    /// Lost coordinates of the achieved `ξ(T)` (or `ζ(T)`).
    pub achieved: Vec<f64>,
    pub certificates: Certificates,
}

impl SynthesisPlan {
    /// `u = v + w (+ ν)`: the plan at unit amplitude.
    pub fn control(&self) -> Control {
        let u = self.v.plus(&self.w);
        match &self.nu {
            Some(nu) => u.plus(nu),
            None => u,
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// `Λ_T`: controls with `Ψ(T) = 0` and `ξ(T) = z` for `z` given in lost coordinates.
pub fn lambda_map(coords: &[f64], t: f64, mu: &DipoleModel, cfg: &SynthesisConfig) -> Result<SynthesisPlan> {
    SecondOrderBasis::build(mu, t, cfg)?.plan(coords)
}

/// Third-order brick on one window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThirdOrderBrick {
    pub k: usize,
    pub v: Control,
    pub w: Control,
    pub nu: Control,
    /// `⟨ζ(L), ψ_K(L)⟩`.
    pub value: C64,
    pub search_value: f64,
    pub psi_norm: f64,
    pub xi_norm: f64,
}

fn third_order_brick(
    k: usize,
    cells: usize,
    h: f64,
    mu: &DipoleModel,
    lost: &LostDirectionSet,
    cfg: &SynthesisConfig,
    rng: &mut ChaCha8Rng,
    avoid: Option<C64>,
) -> Result<ThirdOrderBrick> {
    let op = MomentOperator::new(&controlled_freqs(lost, mu.n), cells, h);
    let basis = seed_basis(cells, h, cfg.seed_modes, &op)?;
    let score = |q: C64| match avoid {
        Some(r) => (q * r.conj() / r.norm()).im.abs(),
        None => q.norm(),
    };
    let mut best: Option<(f64, Control)> = None;
    for _ in 0..cfg.trials {
        let c = DVector::from_fn(basis.len(), |_, _| rng.random_range(-1.0..1.0));
        let v = combine(&basis, &c);
        let nv = v.l2_norm();
        if nv == 0.0 {
            continue;
        }
        let v = v.scaled(1.0 / nv);
        let s = score(q3(k, &v, mu, mu.n)?.value());
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, v));
        }
    }
    let (s, v) = best.ok_or(SynthesisError::SearchFloor { k, best: 0.0, floor: cfg.floor })?;
    if s <= cfg.floor {
        return Err(SynthesisError::SearchFloor { k, best: s, floor: cfg.floor });
    }
    let v = v.scaled(1.0 / q3(k, &v, mu, mu.n)?.value().norm().cbrt());
    let l = cells as f64 * h;
    let engine = ExpansionEngine::new(mu, h, 3);
    let zero = Control::new(vec![0.0; cells], h);
    let controlled = lost.controlled(mu.n);
    let t1 = engine.terms(&v, &zero, Some(&zero));
    let cancel: Vec<(usize, C64)> = controlled.iter().map(|&j| (j, -t1.xi_t.coeffs[j - 1])).collect();
    let (w, _, _) = steer_window(&cancel, l, 0.0, cells, h, mu)?;
    let t2 = engine.terms(&v, &w, Some(&zero));
    let zeta = t2.zeta_t.as_ref().expect("third order");
    let cancel: Vec<(usize, C64)> = controlled.iter().map(|&j| (j, -zeta.coeffs[j - 1])).collect();
    let (nu, _, _) = steer_window(&cancel, l, 0.0, cells, h, mu)?;
    let t3 = engine.terms(&v, &w, Some(&nu));
    Ok(ThirdOrderBrick {
        k,
        value: t3.zeta_t.as_ref().unwrap().component(k, l),
        search_value: s,
        psi_norm: t3.psi_t.norm(),
        xi_norm: t3.xi_t.norm(),
        v,
        w,
        nu,
    })
}

/// Amplitudes `(s_a, s_b)` with `s_a³ r_a + s_b³ r_b + s_a² s_b c = z`.
///
/// The map is odd and homogeneous of degree 3, so it suffices to find an angle
/// `t` with `arg γ(t) = arg z` for `γ(t) = G(cos t, sin t)` and rescale.
fn solve_cubic_amplitudes(ra: C64, rb: C64, c: C64, z: C64) -> Result<(f64, f64)> {
    if z == C64::new(0.0, 0.0) {
        return Ok((0.0, 0.0));
    }
    let gamma = |t: f64| {
        let (sn, cs) = t.sin_cos();
        cs.powi(3) * ra + sn.powi(3) * rb + cs * cs * sn * c
    };
    let dir = z / z.norm();
    let cross = |t: f64| (gamma(t) * dir.conj()).im;
    let n = 4096;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n {
        let (mut lo, mut hi) = (PI * i as f64 / n as f64, PI * (i + 1) as f64 / n as f64);
        let (flo, fhi) = (cross(lo), cross(hi));
        if flo == 0.0 || flo.signum() != fhi.signum() {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if cross(mid).signum() == flo.signum() && flo != 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t = 0.5 * (lo + hi);
            // γ(t + π) = −γ(t): pick the branch pointing along z.
            let g = gamma(t);
            let along = (g * dir.conj()).re;
            if along.abs() <= 1e-12 * g.norm().max(f64::MIN_POSITIVE) {
                continue;
            }
            let rho = (z.norm() / along.abs()).cbrt() * along.signum();
            let size = rho.abs();
            if best.is_none_or(|b| size < b.1) {
                best = Some((t, rho));
            }
        }
    }
    let (t, rho) = best.ok_or(SynthesisError::Decomposition)?;
    Ok((rho * t.cos(), rho * t.sin()))
}

/// `Λ̃_T`: controls with `Ψ(T) = 0`, vanishing controlled components of `ξ(T)`
/// and `ζ(T)`, `⟨ξ(T), ψ_K(T)⟩ = 0` and `⟨ζ(T), ψ_K(T)⟩ = z`, for a lost
/// direction `K` of third order.
///
/// Two bricks on the halves of `[0,T]` give two independent directions; signs
/// are reached through `(v, w, ν) → (−v, w, −ν)`. Second-order components on
/// other lost directions are left as they are; they couple the bricks through
/// a single cross term, so `ζ_K` is a homogeneous cubic in the two amplitudes
/// and is solved exactly.
pub fn reach_third_order(k: usize, z: C64, t: f64, cells: usize, mu: &DipoleModel, cfg: &SynthesisConfig) -> Result<SynthesisPlan> {
    let lost = lost_set(mu);
    if !lost.contains(k) {
        return Err(SynthesisError::LostComponent { k, value: mu.m(k, 1) });
    }
    if classify_order(k, mu, mu.n, 1e-10)?.order != Order::Order3 {
        return Err(SynthesisError::NotThirdOrder(k));
    }
    let half = cells / 2;
    let h = t / cells as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = third_order_brick(k, half, h, mu, &lost, cfg, &mut rng, None)?;
    let b = third_order_brick(k, cells - half, h, mu, &lost, cfg, &mut rng, Some(a.value))?;
    let engine = ExpansionEngine::new(mu, h, 3);
    let placed: Vec<(Control, Control, Control)> = [(&a, 0), (&b, half)]
        .into_iter()
        .map(|(br, s)| (place(&br.v, s, cells), place(&br.w, s, cells), place(&br.nu, s, cells)))
        .collect();
    let assemble = |sa: f64, sb: f64| {
        let mut out = (Control::new(vec![0.0; cells], h), Control::new(vec![0.0; cells], h), Control::new(vec![0.0; cells], h));
        for ((pv, pw, pn), s) in placed.iter().zip([sa, sb]) {
            out.0 = out.0.plus(&pv.scaled(s));
            out.1 = out.1.plus(&pw.scaled(s * s));
            out.2 = out.2.plus(&pn.scaled(s * s * s));
        }
        out
    };
    let zeta_k = |sa: f64, sb: f64| {
        let (v, w, nu) = assemble(sa, sb);
        engine.run(&v, Some(&w), Some(&nu))[2][k - 1]
    };
    let ra = zeta_k(1.0, 0.0);
    let rb = zeta_k(0.0, 1.0);
    let cross = zeta_k(1.0, 1.0) - ra - rb;
    let (sa, sb) = solve_cubic_amplitudes(ra, rb, cross, z)?;
    let (v, w, nu0) = assemble(sa, sb);
    // Cross terms between the two bricks on controlled modes, removed through ν.
    let controlled = lost.controlled(mu.n);
    let r3 = engine.run(&v, Some(&w), Some(&nu0))[2].clone();
    let cancel: Vec<(usize, C64)> =
        controlled.iter().map(|&j| (j, -r3[j - 1] * C64::from_polar(1.0, -lambda(j) * t))).collect();
    let (fix, _, _) = steer_window(&cancel, t, 0.0, cells, h, mu)?;
    let nu = nu0.plus(&fix);
    let [a1, a2, a3] = engine.run(&v, Some(&w), Some(&nu));
    let mut checked = controlled;
    checked.push(k);
    let xi_error = checked.iter().map(|&j| a2[j - 1].norm_sqr()).sum::<f64>().sqrt();
    let zeta_error = checked
        .iter()
        .map(|&j| if j == k { (a3[j - 1] - z).norm_sqr() } else { a3[j - 1].norm_sqr() })
        .sum::<f64>()
        .sqrt();
    let predicted = sa.powi(3) * ra + sb.powi(3) * rb + sa * sa * sb * cross;
    let windows = [(0.0, half as f64 * h), (half as f64 * h, (cells - half) as f64 * h)];
    let blocks = windows
        .iter()
        .zip([sa, sb])
        .enumerate()
        .map(|(j, (win, s))| PlanBlock { role: BlockRole::ThirdOrder { k, j: j + 1 }, windows: vec![*win], weight: s.powi(3), window_moment: 0.0 })
        .collect();
    let sched = Schedule {
        lost: vec![k],
        t_requested: t,
        t,
        step: h,
        cells,
        t_sharp: 0.0,
        t2_used: 0.0,
        k1_windows: Vec::new(),
        odd_multiple: None,
        rotation_windows: windows.to_vec(),
        t_theta: None,
    };
    Ok(SynthesisPlan {
        schedule: sched,
        target: vec![z.re, z.im],
        blocks,
        v,
        w,
        nu: Some(nu),
        achieved: vec![a3[k - 1].re, a3[k - 1].im],
        certificates: Certificates {
            psi_norm: a1.norm(),
            xi_error,
            xi_relative_error: xi_error / z.norm().max(f64::MIN_POSITIVE),
            zeta_error: Some(zeta_error),
            additivity_defect: (a3[k - 1] - predicted).norm(),
            predicted: vec![predicted.re, predicted.im],
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Required `‖ψ_u(T) − ψ_f‖`.
    pub tol: f64,
    /// Cells of the final linear-steering window.
    pub tail_cells: usize,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self { max_outer: 10, max_inner: 8, tol: 1e-5, tail_cells: 256 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteeringReport {
    pub t: f64,
    /// `T₁` snapped to the synthesis grid.
    pub t1: f64,
    /// Control on `(0, T₁)`.
    pub head: Control,
    /// Control on `(T₁, T)`.
    pub tail: Control,
    /// Lost coordinates of the fixed point `z*`.
    pub z_star: Vec<f64>,
    pub z_norm: f64,
    /// `‖ψ_u(T) − ψ_f‖` after each outer iteration.
    pub history: Vec<f64>,
    /// `‖F(z) − z‖ / ‖z‖^{3/2}` after each outer iteration with `z ≠ 0`.
    pub defect_ratio: Vec<f64>,
    pub inner_iterations: Vec<usize>,
    pub iterations: usize,
    pub final_error: f64,
    /// `|‖ψ_u(T)‖ − ‖ψ_f‖|`.
    pub norm_defect: f64,
    pub converged: bool,
}

/// Fixed-point steering to `ψ_f` (coefficients at time `T`).
///
/// Each outer step assembles `Λ_{T₁}(z)` on `(0, T₁)`, then matches the
/// controlled components of `ψ_f` on `(T₁, T)` by chord-Newton iterations of
/// [`linear_steer`]'s moment problem, and updates `z ← z + 𝒫_M ψ_f − F(z)`.
pub fn fixed_point_steer(
    psi_f: &SpectralState,
    t: f64,
    t1: f64,
    mu: &DipoleModel,
    cfg: &SynthesisConfig,
    steer: &SteeringConfig,
) -> Result<SteeringReport> {
    if !(t1 < t) {
        return Err(SynthesisError::Timing(format!("T₁ = {t1} must lie below T = {t}")));
    }
    let basis = SecondOrderBasis::build(mu, t1, cfg)?;
    let lost = basis.schedule.lost.clone();
    let t1g = basis.schedule.t;
    let n_tail = steer.tail_cells;
    let h_tail = (t - t1g) / n_tail as f64;
    let controlled = lost_set(mu).controlled(mu.n);
    let prop = Propagator::new(mu);
    let opts = PropagateOptions { scheme: Scheme::ExactCell, record_cells: false, check_drift: false, ..Default::default() };
    let mut target = SpectralState::zeros(mu.n);
    let nf = psi_f.dim().min(mu.n);
    target.coeffs.rows_mut(0, nf).copy_from(&psi_f.coeffs.rows(0, nf));
    target.time = t;
    let y_f = lost_coords(&target, &lost);
    let mut z = vec![0.0; y_f.len()];
    let mut history = Vec::new();
    let mut defect_ratio = Vec::new();
    let mut inner_iterations = Vec::new();
    let psi0 = SpectralState::basis(mu.n, 1);
    for it in 0..steer.max_outer {
        let plan = basis.plan(&z)?;
        let head = plan.control();
        let mid = prop.propagate(&psi0, &head, None, &opts)?.final_state().clone();
        let mut tail = Control::new(vec![0.0; n_tail], h_tail);
        let run = |tail: &Control| -> Result<SpectralState> { Ok(prop.propagate(&mid, tail, None, &opts)?.final_state().clone()) };
        let mut end = run(&tail)?;
        let ctrl_err = |s: &SpectralState| controlled.iter().map(|&k| (target.coeffs[k - 1] - s.coeffs[k - 1]).norm_sqr()).sum::<f64>().sqrt();
        let mut inner = 0;
        let mut err = ctrl_err(&end);
        while inner < steer.max_inner && err > 0.01 * steer.tol {
            let resid: Vec<(usize, C64)> = controlled.iter().map(|&k| (k, target.coeffs[k - 1] - end.coeffs[k - 1])).collect();
            let (du, _, _) = steer_window(&resid, t, t1g, n_tail, h_tail, mu)?;
            let mut step = 1.0;
            loop {
                let cand = tail.plus(&du.scaled(step));
                let e = run(&cand)?;
                let ce = ctrl_err(&e);
                if ce < err || step < 1e-3 {
                    tail = cand;
                    end = e;
                    err = ce;
                    break;
                }
                step *= 0.5;
            }
            inner += 1;
        }
        inner_iterations.push(inner);
        let f = lost_coords(&end, &lost);
        let final_error = (&end.coeffs - &target.coeffs).norm();
        history.push(final_error);
        let zn = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if zn > 0.0 {
            let d = f.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            defect_ratio.push(d / zn.powf(1.5));
        }
        if final_error <= steer.tol {
            return Ok(SteeringReport {
                t,
                t1: t1g,
                head,
                tail,
                z_norm: zn,
                z_star: z,
                history,
                defect_ratio,
                inner_iterations,
                iterations: it,
                final_error,
                norm_defect: (end.norm() - target.norm()).abs(),
                converged: true,
            });
        }
        for ((zi, yf), fi) in z.iter_mut().zip(&y_f).zip(&f) {
            *zi += yf - fi;
        }
    }
    Err(SynthesisError::Divergence { iterations: steer.max_outer, error: history.last().copied().unwrap_or(f64::NAN) })
}

/// Unit-norm state `ψ₁(T) + δ·d` normalised, with `d` a fixed smooth direction
/// scaled so that the truncated `H³` distance to `ψ₁(T)` equals `delta`.
pub fn perturbed_target(n: usize, t: f64, delta: f64, seed: u64) -> SpectralState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = SpectralState::zeros(n);
    d.time = t;
    for k in 1..=n {
        let amp = 1.0 / (k as f64).powi(5);
        d.coeffs[k - 1] = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * amp * C64::from_polar(1.0, -lambda(k) * t);
    }
    let base = SpectralState::eigenstate(n, 1, t);
    let make = |s: f64| {
        let mut c = &base.coeffs + &d.coeffs * C64::new(s, 0.0);
        let nn = c.norm();
        c /= C64::new(nn, 0.0);
        SpectralState { coeffs: c, time: t }
    };
    let dist = |s: f64| {
        let x = make(s);
        sobolev_norm(&SpectralState { coeffs: &x.coeffs - &base.coeffs, time: t }, 3.0)
    };
    // Distance grows monotonically with s near 0; bisect.
    let (mut lo, mut hi) = (0.0, 1.0);
    while dist(hi) < delta {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dist(mid) < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    make(0.5 * (lo + hi))
}
