//! Sign structure of `𝒬_T = 𝒬_{1,T}` on `𝒱_T` and bracketing of the minimal times.
//!
//! `S` is discretised in the continuous piecewise-linear (hat) basis on `n`
//! cells. The kernel part of the form is separable away from the diagonal,
//! so the matrix is a rank-`2J` product plus exact near-diagonal chain
//! integrals. Subspaces are handled by congruence with an explicit basis:
//! `𝒱_T` is the null space of the moment rows `∫ψ_p e^{iω_j t}`, and the
//! `H¹₀` variant starts from `sin(mπt/T)`, `m = 1..M`, sampled on the nodes.

use nalgebra::{DMatrix, DVector, SymmetricEigen, QR, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::chain::chain;
use crate::moment_solver::ingham_constant;
use crate::quadratic_forms::{a_series, c_k_partial_sums, t_star, ASource, FormError};
use crate::spectral_core::{lost_directions, omega_of, DipoleModel};
use crate::C64;

#[derive(Debug, Error)]
pub enum MinTimeError {
    #[error("no sign change on [{lo}, {hi}]: top eigenvalues {f_lo:.3e}, {f_hi:.3e}")]
    NoSignChange { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("grid not converged at T = {t}: {coarse:.6e} (n) vs {fine:.6e} (2n)")]
    NotConverged { t: f64, coarse: f64, fine: f64 },
    #[error("mass matrix not positive definite on the subspace")]
    Mass,
    #[error("⟨μφ₁,φ₁⟩ = {0:.3e} must vanish")]
    NotLost(f64),
    #[error(transparent)]
    Form(#[from] FormError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subspace {
    Full,
    Vt,
    VtH10,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub cells: usize,
    /// Kernel truncation `J`.
    pub j_max: usize,
    /// Number `M` of sine modes spanning the `H¹₀` subspace.
    pub sine_modes: usize,
    /// Moment constraints kept while `ω_j·h ≤ cutoff`.
    pub cutoff: f64,
    /// `H¹₀` constraints kept while `ω_j ≤ sine_band·Mπ/T`.
    pub sine_band: f64,
    pub a_source: ASource,
    /// Relative tolerance of the n vs 2n check.
    pub grid_tol: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { cells: 512, j_max: 256, sine_modes: 64, cutoff: 1.0, sine_band: 1.0, a_source: ASource::Series, grid_tol: 0.01 }
    }
}

impl GridConfig {
    /// Doubles the grid and the sine basis.
    pub fn refined(&self) -> Self {
        Self { cells: 2 * self.cells, sine_modes: 2 * self.sine_modes, ..*self }
    }
}

/// Discretised `𝒬_T` on a subspace.
#[derive(Clone, Debug)]
pub struct FormOperator {
    pub t: f64,
    pub subspace: Subspace,
    pub cells: usize,
    /// Nodal basis of the subspace, `(n+1) × d`.
    pub basis: DMatrix<f64>,
    /// `BᵀQB`, symmetric.
    pub matrix: DMatrix<f64>,
    /// `BᵀMB` with the hat mass matrix `M`.
    pub mass: DMatrix<f64>,
    /// Form on the full hat space.
    pub full: DMatrix<f64>,
    pub full_mass: DMatrix<f64>,
    pub a: f64,
    pub frequencies: Vec<f64>,
}

/// Hat mass matrix on `n` cells.
pub fn hat_mass(cells: usize, h: f64) -> DMatrix<f64> {
    let n = cells + 1;
    let mut m = DMatrix::zeros(n, n);
    for c in 0..cells {
        m[(c, c)] += h / 3.0;
        m[(c + 1, c + 1)] += h / 3.0;
        m[(c, c + 1)] += h / 6.0;
        m[(c + 1, c)] += h / 6.0;
    }
    m
}

/// Restriction of hat `p` to cell `c` as `a + σx`, `x ∈ [0,h]`.
fn piece(p: usize, c: usize, h: f64) -> Option<(f64, f64)> {
    if c + 1 == p {
        Some((0.0, 1.0 / h))
    } else if c == p {
        Some((1.0, -1.0 / h))
    } else {
        None
    }
}

fn cells_of(p: usize, cells: usize) -> impl Iterator<Item = usize> {
    let lo = p.saturating_sub(1);
    let hi = p.min(cells - 1);
    (lo..=hi).filter(move |&c| c + 1 == p || c == p)
}

/// Hat-space matrix of `S ↦ ∫∫_{τ<t} S(t)S(τ) k(t,τ)` with `k = Σ c_j sin(ω_j(t−τ))`.
fn kernel_matrix(cells: usize, h: f64, omegas: &[f64], coeffs: &[f64]) -> DMatrix<f64> {
    let n = cells + 1;
    let jn = omegas.len();
    // Columns of the separable factors, one per mode.
    let cols: Vec<(Vec<C64>, DMatrix<f64>)> = crate::par_map((0..jn).collect(), |j| {
        let w = omegas[j];
        let cj = coeffs[j];
        let c0 = chain(&[w], h);
        let c1 = chain(&[w, 0.0], h);
        let cm0 = chain(&[-w], h);
        let cm1 = chain(&[-w, 0.0], h);
        let s00 = chain(&[w, -w], h);
        let s01 = chain(&[w, -w, 0.0], h);
        let s10 = chain(&[w, 0.0, -w], h) + s01;
        let s11 = chain(&[w, 0.0, -w, 0.0], h) + 2.0 * chain(&[w, -w, 0.0, 0.0], h);
        let ph: Vec<C64> = (0..cells).map(|c| C64::from_polar(1.0, w * c as f64 * h)).collect();
        let up = |p: usize, c: usize| piece(p, c, h).map(|(a, s)| ph[c] * (a * c0 + s * c1));
        let dn = |q: usize, c: usize| piece(q, c, h).map(|(a, s)| ph[c].conj() * (a * cm0 + s * cm1));
        let u: Vec<C64> = (0..n).map(|p| cells_of(p, cells).filter_map(|c| up(p, c)).sum()).collect();
        // Exact values for |p − q| ≤ 1, stored as a 3-band (q = p−1, p, p+1).
        let mut band = DMatrix::<f64>::zeros(n, 3);
        for p in 0..n {
            for (slot, q) in [(0usize, p.wrapping_sub(1)), (1, p), (2, p + 1)] {
                if q >= n {
                    continue;
                }
                let mut e = C64::new(0.0, 0.0);
                for a in cells_of(p, cells) {
                    for b in cells_of(q, cells) {
                        if b < a {
                            e += up(p, a).unwrap() * dn(q, b).unwrap();
                        } else if b == a {
                            let (ap, sp) = piece(p, a, h).unwrap();
                            let (aq, sq) = piece(q, a, h).unwrap();
                            e += ap * aq * s00 + ap * sq * s01 + sp * aq * s10 + sp * sq * s11;
                        }
                    }
                }
                band[(p, slot)] = cj * e.im;
            }
        }
        (u, band)
    });
    let mut x = DMatrix::<f64>::zeros(n, jn);
    let mut y = DMatrix::<f64>::zeros(n, jn);
    let mut wm = DMatrix::<f64>::zeros(n, jn);
    let mut v = DMatrix::<f64>::zeros(n, jn);
    let mut band = DMatrix::<f64>::zeros(n, 3);
    for (j, (u, b)) in cols.iter().enumerate() {
        for p in 0..n {
            x[(p, j)] = coeffs[j] * u[p].im;
            y[(p, j)] = u[p].re;
            wm[(p, j)] = coeffs[j] * u[p].re;
            v[(p, j)] = u[p].im;
        }
        band += b;
    }
    // Im(U_p conj U_q) = Im U_p Re U_q − Re U_p Im U_q.
    let mut k = &x * y.transpose() - &wm * v.transpose();
    for p in 0..n {
        for q in 0..n {
            if q + 1 < p {
                continue;
            }
            k[(p, q)] = if q + 1 == p {
                band[(p, 0)]
            } else if q == p {
                band[(p, 1)]
            } else if q == p + 1 {
                band[(p, 2)]
            } else {
                0.0
            };
        }
    }
    k
}

/// Real moment rows `Re/Im ∫ψ_p e^{iω t}` for the given frequencies.
fn constraint_rows(cells: usize, h: f64, freqs: &[f64]) -> DMatrix<f64> {
    let n = cells + 1;
    let mut rows = DMatrix::<f64>::zeros(2 * freqs.len(), n);
    for (i, &w) in freqs.iter().enumerate() {
        let c0 = chain(&[w], h);
        let c1 = chain(&[w, 0.0], h);
        for p in 0..n {
            let z: C64 = cells_of(p, cells)
                .map(|c| {
                    let (a, s) = piece(p, c, h).unwrap();
                    C64::from_polar(1.0, w * c as f64 * h) * (a * c0 + s * c1)
                })
                .sum();
            rows[(2 * i, p)] = z.re;
            rows[(2 * i + 1, p)] = z.im;
        }
    }
    rows
}

/// Orthonormal basis of `ker(C)` inside the column space of `b` (`C b z = 0`).
fn null_basis(c: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    if c.nrows() == 0 {
        return DMatrix::identity(dim, dim);
    }
    let svd = SVD::new(c.clone(), false, true);
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.iter().fold(0.0f64, |m, s| m.max(*s));
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-12 * smax).count();
    let range = DMatrix::from_fn(dim, rank, |i, r| {
        let idx = svd.singular_values.iter().enumerate().filter(|(_, s)| **s > 1e-12 * smax).nth(r).unwrap().0;
        vt[(idx, i)]
    });
    let qr = QR::new(range);
    let mut qt = DMatrix::<f64>::identity(dim, dim);
    qr.q_tr_mul(&mut qt);
    qt.rows(rank, dim - rank).transpose()
}

/// Controlled frequencies `ω_j`, `j ∈ 𝒥`, resolved by the grid.
pub fn constraint_frequencies(mu: &DipoleModel, j_max: usize, h: f64, cutoff: f64) -> Vec<f64> {
    lost_directions(mu, j_max, 1e-8)
        .controlled(j_max)
        .into_iter()
        .map(omega_of)
        .filter(|w| w * h <= cutoff)
        .collect()
}

pub fn build_form_operator(t: f64, mu: &DipoleModel, cfg: &GridConfig, subspace: Subspace) -> Result<FormOperator, MinTimeError> {
    if cfg.j_max > mu.n {
        return Err(FormError::Truncation { j: cfg.j_max, n: mu.n }.into());
    }
    let m11 = mu.m(1, 1);
    if m11.abs() > 1e-10 {
        return Err(MinTimeError::NotLost(m11));
    }
    let cells = cfg.cells;
    let h = t / cells as f64;
    let n = cells + 1;
    let a = match cfg.a_source {
        ASource::Quadrature => mu.a_coefficient(1),
        ASource::Series => a_series(mu, 1, cfg.j_max),
    };
    let (omegas, coeffs): (Vec<f64>, Vec<f64>) = (1..=cfg.j_max)
        .map(|j| (omega_of(j), omega_of(j).powi(2) * mu.m(1, j).powi(2)))
        .filter(|(_, c)| *c != 0.0)
        .unzip();
    let k = kernel_matrix(cells, h, &omegas, &coeffs);
    let mass = hat_mass(cells, h);
    let full = (&k + k.transpose()) * 0.5 - &mass * a;
    let mut freqs = constraint_frequencies(mu, cfg.j_max, h, cfg.cutoff);
    if subspace == Subspace::VtH10 {
        let band = cfg.sine_band * PI * cfg.sine_modes as f64 / t;
        freqs.retain(|w| *w <= band);
    }
    let start = match subspace {
        Subspace::Full | Subspace::Vt => DMatrix::identity(n, n),
        Subspace::VtH10 => DMatrix::from_fn(n, cfg.sine_modes, |p, m| (PI * (m + 1) as f64 * p as f64 / cells as f64).sin()),
    };
    let basis = match subspace {
        Subspace::Full => start,
        _ => {
            let c = constraint_rows(cells, h, &freqs) * &start;
            let z = null_basis(&c, start.ncols());
            start * z
        }
    };
    let matrix = basis.transpose() * &full * &basis;
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    let smass = basis.transpose() * &mass * &basis;
    Ok(FormOperator { t, subspace, cells, basis, matrix, mass: smass, full, full_mass: mass, a, frequencies: freqs })
}

impl FormOperator {
    /// `𝒬_T(S)` for nodal values `S` on the full hat grid.
    pub fn form_value(&self, s: &DVector<f64>) -> f64 {
        (s.transpose() * &self.full * s)[(0, 0)]
    }

    pub fn norm_sq(&self, s: &DVector<f64>) -> f64 {
        (s.transpose() * &self.full_mass * s)[(0, 0)]
    }

    /// `M`-orthogonal projector onto the subspace, acting on nodal vectors.
    pub fn projector(&self) -> DMatrix<f64> {
        let inv = self.mass.clone().try_inverse().expect("subspace mass");
        &self.basis * inv * self.basis.transpose() * &self.full_mass
    }

    /// Generalised eigen-decomposition; eigenvalues ascending, vectors as nodal values.
    pub fn spectrum(&self) -> Result<(Vec<f64>, DMatrix<f64>), MinTimeError> {
        if self.basis.ncols() == 0 {
            return Ok((Vec::new(), DMatrix::zeros(self.basis.nrows(), 0)));
        }
        let chol = self.mass.clone().cholesky().ok_or(MinTimeError::Mass)?;
        let l = chol.l();
        let linv_q = l.solve_lower_triangular(&self.matrix).ok_or(MinTimeError::Mass)?;
        let a = l.solve_lower_triangular(&linv_q.transpose()).ok_or(MinTimeError::Mass)?;
        let a = (&a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let y = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
        let x = l.transpose().solve_upper_triangular(&y).ok_or(MinTimeError::Mass)?;
        Ok((vals, &self.basis * x))
    }

    /// Largest Rayleigh quotient `sup 𝒬_T(S)/‖S‖²` and its maximiser (unit L² norm).
    /// A trivial subspace gives `-∞` and the zero vector.
    pub fn top(&self) -> Result<(f64, DVector<f64>), MinTimeError> {
        let (vals, vecs) = self.spectrum()?;
        if vals.is_empty() {
            return Ok((f64::NEG_INFINITY, DVector::zeros(self.basis.nrows())));
        }
        let last = vals.len() - 1;
        let mut s = vecs.column(last).into_owned();
        let nrm = self.norm_sq(&s).sqrt();
        s /= nrm;
        if s.iter().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { *x } else { acc }) < 0.0 {
            s = -s;
        }
        Ok((vals[last], s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaReport {
    pub t: f64,
    /// `λ(T) = −sup_{𝒱_T} 𝒬_T/‖S‖²` on `n` cells.
    pub lambda: f64,
    /// Same on `2n` cells.
    pub lambda_fine: f64,
    pub cells: usize,
    pub converged: bool,
}

fn converged(coarse: f64, fine: f64, scale: f64, tol: f64) -> bool {
    (coarse - fine).abs() <= tol * fine.abs().max(scale)
}

/// `λ(T)` with a grid-doubling check; the absolute floor of the check is `A₁/100`.
pub fn lambda_t(t: f64, mu: &DipoleModel, cfg: &GridConfig) -> Result<LambdaReport, MinTimeError> {
    let coarse = build_form_operator(t, mu, cfg, Subspace::Vt)?.top()?.0;
    let fine_op = build_form_operator(t, mu, &cfg.refined(), Subspace::Vt)?;
    let fine = fine_op.top()?.0;
    let ok = converged(coarse, fine, fine_op.a.abs() * 0.01, cfg.grid_tol);
    if !ok {
        return Err(MinTimeError::NotConverged { t, coarse: -coarse, fine: -fine });
    }
    Ok(LambdaReport { t, lambda: -coarse, lambda_fine: -fine, cells: cfg.cells, converged: ok })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TminEstimate {
    pub subspace: Subspace,
    pub interval: Interval,
    /// Same bisection on `2n` cells.
    pub interval_fine: Interval,
    pub cells: usize,
    pub relative_grid_change: f64,
    pub grid_converged: bool,
    pub evaluations: usize,
}

fn bisect(
    f: impl Fn(f64) -> Result<f64, MinTimeError>,
    bracket: (f64, f64),
    tol: f64,
    evals: &mut usize,
) -> Result<Interval, MinTimeError> {
    let (mut lo, mut hi) = bracket;
    let f_lo = f(lo)?;
    let f_hi = f(hi)?;
    *evals += 2;
    if !(f_lo <= 0.0 && f_hi > 0.0) {
        return Err(MinTimeError::NoSignChange { lo, hi, f_lo, f_hi });
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        *evals += 1;
        if f(mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Interval { lo, hi })
}

fn estimate(mu: &DipoleModel, bracket: (f64, f64), tol: f64, cfg: &GridConfig, sub: Subspace) -> Result<TminEstimate, MinTimeError> {
    let mut evals = 0;
    let top = |c: GridConfig| move |t: f64| Ok(build_form_operator(t, mu, &c, sub)?.top()?.0);
    let coarse = bisect(top(*cfg), bracket, tol, &mut evals)?;
    let fine = bisect(top(cfg.refined()), bracket, tol, &mut evals)?;
    let rel = (coarse.mid() - fine.mid()).abs() / fine.mid();
    Ok(TminEstimate {
        subspace: sub,
        interval: coarse,
        interval_fine: fine,
        cells: cfg.cells,
        relative_grid_change: rel,
        grid_converged: rel <= cfg.grid_tol,
        evaluations: evals,
    })
}

/// Bisection on the sign of `sup_{𝒱_T} 𝒬_T` for `T̃¹_min`.
pub fn estimate_tmin1(mu: &DipoleModel, bracket: (f64, f64), tol: f64, cfg: &GridConfig) -> Result<TminEstimate, MinTimeError> {
    estimate(mu, bracket, tol, cfg, Subspace::Vt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: f64,
    /// Nodal values of `S₊` with `𝒬_T(S₊) = 1`.
    pub nodes: Vec<f64>,
    pub form_value: f64,
    pub endpoint_values: (f64, f64),
    pub h1_seminorm: f64,
}

/// Bisection on positivity of `sup_{𝒱_T∩H¹₀} 𝒬_T` for `T̃²_min`, plus a witness `S₊`
/// at the upper end of the fine interval.
pub fn estimate_tmin2(
    mu: &DipoleModel,
    bracket: (f64, f64),
    tol: f64,
    cfg: &GridConfig,
) -> Result<(TminEstimate, Witness), MinTimeError> {
    let est = estimate(mu, bracket, tol, cfg, Subspace::VtH10)?;
    let w = witness(mu, est.interval_fine.hi, &cfg.refined(), Subspace::VtH10)?;
    Ok((est, w))
}

/// Top eigenvector on `sub` scaled to `𝒬_T(S) = 1` (requires a positive top eigenvalue).
pub fn witness(mu: &DipoleModel, t: f64, cfg: &GridConfig, sub: Subspace) -> Result<Witness, MinTimeError> {
    let op = build_form_operator(t, mu, cfg, sub)?;
    let (top, s) = op.top()?;
    if top <= 0.0 {
        return Err(MinTimeError::NoSignChange { lo: t, hi: t, f_lo: top, f_hi: top });
    }
    let scale = op.form_value(&s).sqrt();
    let s = s / scale;
    let h = t / cfg.cells as f64;
    let h1 = s.as_slice().windows(2).map(|w| (w[1] - w[0]).powi(2) / h).sum::<f64>().sqrt();
    Ok(Witness {
        t,
        nodes: s.as_slice().to_vec(),
        form_value: op.form_value(&s),
        endpoint_values: (s[0], s[s.len() - 1]),
        h1_seminorm: h1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaReport {
    pub t: f64,
    pub eta: f64,
    pub lambda: f64,
    pub samples: usize,
    pub violations: usize,
    /// `max 𝒬(S)/‖S‖²` over the samples.
    pub worst_ratio: f64,
    /// Largest η on the tested ladder without violations.
    pub empirical_eta: f64,
    /// Largest η allowed by the perturbation bound of the coercivity proof.
    pub proof_eta: f64,
}

/// Samples `S ∈ 𝒱_{T,η}` and checks `𝒬_T(S) ≤ −λ(T)/2 ‖S‖²`.
pub fn coercivity_eta_check(
    t: f64,
    eta: f64,
    n_samples: usize,
    mu: &DipoleModel,
    cfg: &GridConfig,
    seed: u64,
) -> Result<EtaReport, MinTimeError> {
    let op = build_form_operator(t, mu, cfg, Subspace::Vt)?;
    let (vals, vecs) = op.spectrum()?;
    let lambda = -vals[vals.len() - 1];
    let h = t / cfg.cells as f64;
    let rows = constraint_rows(cfg.cells, h, &op.frequencies);
    // Minimal-M-norm nodal vectors with prescribed real moment rows.
    let minv = op.full_mass.clone().try_inverse().ok_or(MinTimeError::Mass)?;
    let g = &rows * &minv * rows.transpose();
    let g_inv = g.clone().pseudo_inverse(1e-14 * g.norm()).map_err(|_| MinTimeError::Mass)?;
    let lift = &minv * rows.transpose() * g_inv;
    let d = vecs.ncols();
    let run = |eta: f64, rng: &mut ChaCha8Rng| -> (usize, f64) {
        let mut bad = 0;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..n_samples {
            // Mix the top modes with random content of the subspace.
            let mut s0 = DVector::<f64>::zeros(op.full.nrows());
            for k in 0..d {
                let weight = if k + 8 >= d { 1.0 } else { 0.05 };
                s0 += vecs.column(k) * (weight * rng.random_range(-1.0..1.0));
            }
            let n0 = op.norm_sq(&s0).sqrt();
            if n0 == 0.0 {
                continue;
            }
            s0 /= n0;
            let mut mom = DVector::<f64>::from_fn(rows.nrows(), |_, _| rng.random_range(-1.0..1.0));
            let mn = mom.norm();
            if mn > 0.0 {
                mom *= eta / mn;
            }
            let s = &s0 + &lift * mom;
            let ratio = op.form_value(&s) / op.norm_sq(&s);
            worst = worst.max(ratio);
            if ratio > -0.5 * lambda {
                bad += 1;
            }
        }
        (bad, worst)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (violations, worst_ratio) = run(eta, &mut rng);
    let mut empirical_eta = 0.0;
    let mut e = 1e-4;
    while e <= 1e3 {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        if run(e, &mut r).0 > 0 {
            break;
        }
        empirical_eta = e;
        e *= 2.0;
    }
    let proof_eta = proof_eta_bound(t, lambda, mu, cfg, &op.frequencies);
    Ok(EtaReport { t, eta, lambda, samples: n_samples, violations, worst_ratio, empirical_eta, proof_eta })
}

/// Largest η with `−λ(1−Cη)² + (T/2)‖k‖C²η² + 2T‖k‖(1+Cη)Cη ≤ −λ/2`,
/// `C = ‖L_T‖` from the Gram spectrum and `‖k‖∞ ≤ C₁`.
fn proof_eta_bound(t: f64, lambda: f64, mu: &DipoleModel, cfg: &GridConfig, freqs: &[f64]) -> f64 {
    if lambda <= 0.0 || freqs.is_empty() {
        return 0.0;
    }
    let c = ingham_constant(freqs, t, freqs.len()).map(f64::sqrt).unwrap_or(f64::INFINITY);
    let kinf = *c_k_partial_sums(1, mu, cfg.j_max).last().unwrap();
    let g = |eta: f64| {
        -lambda * (1.0 - c * eta).powi(2) + 0.5 * t * kinf * c * c * eta * eta + 2.0 * t * kinf * (1.0 + c * eta) * c * eta + 0.5 * lambda
    };
    if g(0.0) > 0.0 || !c.is_finite() {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0 / c);
    if g(hi) <= 0.0 {
        return hi;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub lambda: f64,
    pub top_h10: f64,
}

/// `λ(T)` and the top `H¹₀` eigenvalue over a list of horizons.
pub fn sweep(mu: &DipoleModel, ts: &[f64], cfg: &GridConfig) -> Result<Vec<SweepRow>, MinTimeError> {
    crate::par_map(ts.to_vec(), |t| {
        let lambda = -build_form_operator(t, mu, cfg, Subspace::Vt)?.top()?.0;
        let top_h10 = build_form_operator(t, mu, cfg, Subspace::VtH10)?.top()?.0;
        Ok(SweepRow { t, lambda, top_h10 })
    })
    .into_iter()
    .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,lambda,top_h10")?;
    for r in rows {
        writeln!(w, "{},{},{}", crate::simulator::fmt_f(r.t), crate::simulator::fmt_f(r.lambda), crate::simulator::fmt_f(r.top_h10))?;
    }
    Ok(())
}

/// Default bracket `(T*₁, 2/π + margin)`.
pub fn default_bracket(mu: &DipoleModel, j_max: usize, margin: f64) -> Result<(f64, f64), MinTimeError> {
    Ok((t_star(1, mu, j_max)?.value, 2.0 / PI + margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadratic_forms::q_s;
    use crate::simulator::Control;

    fn small() -> GridConfig {
        GridConfig { cells: 64, j_max: 64, sine_modes: 16, ..Default::default() }
    }

    #[test]
    fn constant_s_matches_direct_form() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        let cfg = small();
        let op = build_form_operator(0.3, &mu, &cfg, Subspace::Full).unwrap();
        let one = DVector::from_element(cfg.cells + 1, 1.0);
        let s = Control::primitive_from_nodes(vec![1.0; cfg.cells + 1], 0.3 / cfg.cells as f64);
        let want = q_s(1, &s, &mu, 64, ASource::Series).unwrap().re;
        assert!((op.form_value(&one) - want).abs() < 1e-10, "{} vs {want}", op.form_value(&one));
    }

    #[test]
    fn random_s_matches_direct_form() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        let cfg = small();
        let op = build_form_operator(0.5, &mu, &cfg, Subspace::Full).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes: Vec<f64> = (0..=cfg.cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = Control::primitive_from_nodes(nodes.clone(), 0.5 / cfg.cells as f64);
        let want = q_s(1, &s, &mu, 64, ASource::Series).unwrap().re;
        let got = op.form_value(&DVector::from_vec(nodes));
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
        assert!((op.norm_sq(&DVector::from_vec(s.values.clone())) - s.l2_norm().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn projector_idempotent_and_symmetric_matrix() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        let op = build_form_operator(0.4, &mu, &small(), Subspace::Vt).unwrap();
        let p = op.projector();
        assert!((&p * &p - &p).norm() < 1e-10 * p.norm());
        assert!((&op.matrix - op.matrix.transpose()).norm() < 1e-12 * op.matrix.norm());
    }

    #[test]
    fn subspace_sup_below_full_sup() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        let cfg = small();
        let full = build_form_operator(0.5, &mu, &cfg, Subspace::Full).unwrap().top().unwrap().0;
        let vt = build_form_operator(0.5, &mu, &cfg, Subspace::Vt).unwrap().top().unwrap().0;
        let h10 = build_form_operator(0.5, &mu, &cfg, Subspace::VtH10).unwrap().top().unwrap().0;
        assert!(vt <= full + 1e-12 && h10 <= vt + 1e-9);
    }

    #[test]
    fn coercive_floor_below_t_star() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        let ts = t_star(1, &mu, 64).unwrap().value;
        let op = build_form_operator(0.9 * ts, &mu, &small(), Subspace::Vt).unwrap();
        assert!(-op.top().unwrap().0 >= 0.25);
    }

    #[test]
    fn bracket_chain_on_coarse_grid() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        let cfg = GridConfig { cells: 64, j_max: 64, sine_modes: 16, grid_tol: 0.05, ..Default::default() };
        let bracket = default_bracket(&mu, 64, 1e-3).unwrap();
        let t1 = estimate_tmin1(&mu, bracket, 1e-2, &cfg).unwrap();
        let (t2, w) = estimate_tmin2(&mu, bracket, 1e-2, &cfg).unwrap();
        assert!(bracket.0 < t1.interval.lo);
        assert!(t1.interval.lo <= t2.interval.hi + 1e-2);
        assert!(t2.interval.hi <= 2.0 / PI + 1e-3);
        assert!((w.form_value - 1.0).abs() < 1e-10);
        assert!(w.endpoint_values.0.abs() < 1e-12 && w.endpoint_values.1.abs() < 1e-9);
    }

    #[test]
    fn eta_zero_has_no_violations() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        let r = coercivity_eta_check(0.2, 0.0, 50, &mu, &small(), 1).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.lambda > 0.0);
    }
}
