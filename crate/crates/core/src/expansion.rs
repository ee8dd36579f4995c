//! First-, second- and third-order terms of the expansion of `ψ` around the
//! ground state in powers of the control amplitude.
//!
//! Work is done in the interaction picture `a_k = c_k e^{iλ_k t}`, where
//! `a' = i u Ẽ(t) a` with `Ẽ_kl(t) = M_kl e^{i(λ_k−λ_l)t}`. For a cell-constant
//! control the cell propagator is the Dyson series `I + iuΦ₁ + (iu)²Φ₂ + (iu)³Φ₃ + …`
//! and its ordered integrals are [`chain`] values, so every order is exact on
//! the grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::chain;
use crate::simulator::{Control, PropagateOptions, Propagator, Scheme, SimError};
use crate::spectral_core::{lambda, omega_of, DipoleModel, SpectralState};
use crate::C64;

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("ε grid spans {0:.2} decades; at least 1.5 required")]
    ShortGrid(f64),
    #[error("controls live on different grids")]
    GridMismatch,
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug)]
pub struct ExpansionTerms {
    pub psi_t: SpectralState,
    pub xi_t: SpectralState,
    pub zeta_t: Option<SpectralState>,
    pub v: Control,
    pub w: Control,
    pub nu: Option<Control>,
}

impl ExpansionTerms {
    /// `Re⟨Ψ(T),ψ₁(T)⟩`.
    pub fn tangency(&self) -> f64 {
        self.psi_t.component(1, self.psi_t.time).re
    }

    /// `‖Ψ(T)‖² + 2Re⟨ξ(T),ψ₁(T)⟩`.
    pub fn second_order_identity(&self) -> f64 {
        self.psi_t.norm().powi(2) + 2.0 * self.xi_t.component(1, self.xi_t.time).re
    }
}

const I: C64 = C64::new(0.0, 1.0);

/// Cell integrals `Φ₁, Φ₂, Φ₃e₁` at `t = 0` for one grid step.
#[derive(Clone, Debug)]
pub struct ExpansionEngine {
    pub n: usize,
    pub h: f64,
    lam: Vec<f64>,
    phi1: DMatrix<C64>,
    phi2: Option<DMatrix<C64>>,
    phi3e: Option<DVector<C64>>,
}

impl ExpansionEngine {
    /// Precomputes the ordered cell integrals needed up to `order` (1..=3).
    pub fn new(mu: &DipoleModel, h: f64, order: usize) -> Self {
        let n = mu.n;
        let lam: Vec<f64> = (1..=n).map(lambda).collect();
        let m = &mu.matrix;
        let phi1 = DMatrix::from_fn(n, n, |k, l| m[(k, l)] * chain(&[lam[k] - lam[l]], h));
        let phi2 = (order >= 2).then(|| {
            let cols: Vec<Vec<C64>> = crate::par_map((0..n).collect(), |l| {
                (0..n)
                    .map(|k| {
                        let mut acc = C64::new(0.0, 0.0);
                        for j in 0..n {
                            let w = m[(k, j)] * m[(j, l)];
                            if w != 0.0 {
                                acc += w * chain(&[lam[k] - lam[j], lam[j] - lam[l]], h);
                            }
                        }
                        acc
                    })
                    .collect()
            });
            DMatrix::from_fn(n, n, |k, l| cols[l][k])
        });
        let phi3e = (order >= 3).then(|| {
            let vals: Vec<C64> = crate::par_map((0..n).collect(), |k| {
                let mut acc = C64::new(0.0, 0.0);
                for j in 0..n {
                    let mkj = m[(k, j)];
                    if mkj == 0.0 {
                        continue;
                    }
                    for p in 0..n {
                        let w = mkj * m[(j, p)] * m[(p, 0)];
                        if w != 0.0 {
                            acc += w * chain(&[lam[k] - lam[j], lam[j] - lam[p], lam[p] - lam[0]], h);
                        }
                    }
                }
                acc
            });
            DVector::from_vec(vals)
        });
        Self { n, h, lam, phi1, phi2, phi3e }
    }

    /// `D Φ(0) D^* x` with `D = diag(e^{iλ_k t})`.
    fn rotate_apply(&self, phi: &DMatrix<C64>, x: &DVector<C64>, rot: &[C64]) -> DVector<C64> {
        let b = DVector::from_fn(self.n, |k, _| rot[k].conj() * x[k]);
        let mut y = phi * b;
        for k in 0..self.n {
            y[k] *= rot[k];
        }
        y
    }

    /// Interaction-picture terms `(a¹, a², a³)` at the end of the grid.
    pub fn run(&self, v: &Control, w: Option<&Control>, nu: Option<&Control>) -> [DVector<C64>; 3] {
        let n = self.n;
        let cells = v.len();
        let want3 = self.phi3e.is_some();
        let want2 = self.phi2.is_some();
        let mut a1 = DVector::<C64>::zeros(n);
        let mut a2 = DVector::<C64>::zeros(n);
        let mut a3 = DVector::<C64>::zeros(n);
        let mut e1 = DVector::<C64>::zeros(n);
        e1[0] = C64::new(1.0, 0.0);
        let mut rot = vec![C64::new(0.0, 0.0); n];
        for c in 0..cells {
            let t = c as f64 * self.h;
            for k in 0..n {
                rot[k] = C64::from_polar(1.0, self.lam[k] * t);
            }
            let iv = I * v.values[c];
            let iw = I * w.map_or(0.0, |x| x.values[c]);
            let inu = I * nu.map_or(0.0, |x| x.values[c]);
            let p1e = self.rotate_apply(&self.phi1, &e1, &rot);
            let mut d3 = DVector::<C64>::zeros(n);
            let mut d2 = DVector::<C64>::zeros(n);
            if want3 {
                let p2e = self.rotate_apply(self.phi2.as_ref().unwrap(), &e1, &rot);
                let p2a1 = self.rotate_apply(self.phi2.as_ref().unwrap(), &a1, &rot);
                let p1a1 = self.rotate_apply(&self.phi1, &a1, &rot);
                let p1a2 = self.rotate_apply(&self.phi1, &a2, &rot);
                let phi3e = self.phi3e.as_ref().unwrap();
                let p3e = DVector::from_fn(n, |k, _| rot[k] * phi3e[k] * rot[0].conj());
                d3 = p1a2 * iv + p2a1 * (iv * iv) + p3e * (iv * iv * iv) + &p1a1 * iw + &p2e * (2.0 * iv * iw) + &p1e * inu;
                d2 = p1a1 * iv + p2e * (iv * iv) + &p1e * iw;
            } else if want2 {
                let p2e = self.rotate_apply(self.phi2.as_ref().unwrap(), &e1, &rot);
                let p1a1 = self.rotate_apply(&self.phi1, &a1, &rot);
                d2 = p1a1 * iv + p2e * (iv * iv) + &p1e * iw;
            }
            let d1 = &p1e * iv;
            a3 += d3;
            a2 += d2;
            a1 += d1;
        }
        [a1, a2, a3]
    }

    fn to_state(&self, a: &DVector<C64>, t: f64) -> SpectralState {
        SpectralState { coeffs: DVector::from_fn(self.n, |k, _| a[k] * C64::from_polar(1.0, -self.lam[k] * t)), time: t }
    }

    pub fn terms(&self, v: &Control, w: &Control, nu: Option<&Control>) -> ExpansionTerms {
        let t = v.duration();
        let [a1, a2, a3] = self.run(v, Some(w), nu);
        ExpansionTerms {
            psi_t: self.to_state(&a1, t),
            xi_t: self.to_state(&a2, t),
            zeta_t: self.phi3e.as_ref().map(|_| self.to_state(&a3, t)),
            v: v.clone(),
            w: w.clone(),
            nu: nu.cloned(),
        }
    }
}

/// `Ψ(T) = i Σ_j ⟨μφ₁,φ_j⟩ (∫₀ᵀ v e^{iω_j t} dt) ψ_j(T)`.
pub fn first_order(v: &Control, mu: &DipoleModel) -> SpectralState {
    let t = v.duration();
    let coeffs = DVector::from_fn(mu.n, |k, _| {
        let j = k + 1;
        I * mu.m(j, 1) * v.moment(omega_of(j)) * C64::from_polar(1.0, -lambda(j) * t)
    });
    SpectralState { coeffs, time: t }
}

/// `ξ(T)` for the pair `(v, w)`.
pub fn second_order(v: &Control, w: &Control, mu: &DipoleModel) -> SpectralState {
    ExpansionEngine::new(mu, v.step, 2).terms(v, w, None).xi_t
}

/// `ζ(T)` for `(v, w, ν)`.
pub fn third_order(v: &Control, w: &Control, nu: &Control, mu: &DipoleModel) -> SpectralState {
    ExpansionEngine::new(mu, v.step, 3).terms(v, w, Some(nu)).zeta_t.unwrap()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlopeFit {
    pub order: usize,
    pub remainders: Vec<f64>,
    pub slope: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlopeReport {
    pub eps: Vec<f64>,
    /// Remainders after truncation at orders 0..=3.
    pub fits: Vec<SlopeFit>,
}

/// Least-squares slope and R² of `log y` against `log x`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Remainders `‖ψ_ε(T) − Σ_{q≤p} ε^q term_q‖` for `u = εv + ε²w + ε³ν`.
///
/// `ψ_ε` comes from the exact cell propagator.
pub fn order_slopes(mu: &DipoleModel, v: &Control, w: &Control, nu: &Control, eps: &[f64]) -> Result<SlopeReport, ExpansionError> {
    if v.len() != w.len() || v.len() != nu.len() {
        return Err(ExpansionError::GridMismatch);
    }
    let (lo, hi) = eps.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &e| (a.min(e), b.max(e)));
    let span = (hi / lo).log10();
    if eps.len() < 3 || span < 1.5 - 1e-9 {
        return Err(ExpansionError::ShortGrid(span));
    }
    let engine = ExpansionEngine::new(mu, v.step, 3);
    let terms = engine.terms(v, w, Some(nu));
    let t = v.duration();
    let ground = SpectralState::eigenstate(mu.n, 1, t);
    let prop = Propagator::new(mu);
    let opts = PropagateOptions { scheme: Scheme::ExactCell, ..Default::default() };
    let mut rem = vec![Vec::new(); 4];
    for &e in eps {
        let u = Control::new(
            (0..v.len()).map(|c| e * v.values[c] + e * e * w.values[c] + e * e * e * nu.values[c]).collect(),
            v.step,
        );
        let psi = prop.propagate(&SpectralState::basis(mu.n, 1), &u, None, &opts)?;
        let mut r = &psi.final_state().coeffs - &ground.coeffs;
        rem[0].push(r.norm());
        r -= &terms.psi_t.coeffs * C64::new(e, 0.0);
        rem[1].push(r.norm());
        r -= &terms.xi_t.coeffs * C64::new(e * e, 0.0);
        rem[2].push(r.norm());
        r -= &terms.zeta_t.as_ref().unwrap().coeffs * C64::new(e * e * e, 0.0);
        rem[3].push(r.norm());
    }
    let fits = rem
        .into_iter()
        .enumerate()
        .map(|(order, remainders)| {
            let (slope, r2) = loglog_fit(eps, &remainders);
            SlopeFit { order, remainders, slope, r2 }
        })
        .collect();
    Ok(SlopeReport { eps: eps.to_vec(), fits })
}

/// `(Ψ̃(T), ξ̃(T))` of the auxiliary system driven by the nodal primitive `s`.
///
/// In the interaction picture `b¹' = −s D̃ e₁` and `b²' = −s D̃ b¹ − i s² P̃ e₁`
/// with `D = ⟨(2μ'∂ₓ+μ'')φ_l,φ_k⟩` and `P = ⟨(μ')²φ_l,φ_k⟩`; `s` is linear on
/// each cell and every cell integral is a chain with polynomial weights.
pub fn gauge_expansion_terms(s: &Control, mu: &DipoleModel) -> (SpectralState, SpectralState) {
    assert!(s.primitive, "gauge expansion needs a nodal primitive");
    let n = mu.n;
    let h = s.step;
    let lam: Vec<f64> = (1..=n).map(lambda).collect();
    let d = mu.gauge_drift_matrix();
    let p = mu.mu1sq_matrix();
    // First order: ∫ (a + σx) e^{iα x} on a cell.
    let m0: Vec<C64> = (0..n).map(|k| chain(&[lam[k] - lam[0]], h)).collect();
    let m1: Vec<C64> = (0..n).map(|k| chain(&[lam[k] - lam[0], 0.0], h)).collect();
    let m2: Vec<C64> = (0..n).map(|k| 2.0 * chain(&[lam[k] - lam[0], 0.0, 0.0], h)).collect();
    // Same-cell double integrals, split by the powers of the outer and inner weights.
    let mut c00 = DMatrix::<C64>::zeros(n, n);
    let mut c01 = DMatrix::<C64>::zeros(n, n);
    let mut c10 = DMatrix::<C64>::zeros(n, n);
    let mut c11 = DMatrix::<C64>::zeros(n, n);
    for k in 0..n {
        for j in 0..n {
            let (a, b) = (lam[k] - lam[j], lam[j] - lam[0]);
            c00[(k, j)] = chain(&[a, b], h);
            c01[(k, j)] = chain(&[a, b, 0.0], h);
            c10[(k, j)] = chain(&[a, 0.0, b], h) + chain(&[a, b, 0.0], h);
            c11[(k, j)] = chain(&[a, 0.0, b, 0.0], h) + 2.0 * chain(&[a, b, 0.0, 0.0], h);
        }
    }
    let mut b1 = DVector::<C64>::zeros(n);
    let mut b2 = DVector::<C64>::zeros(n);
    for cell in 0..s.cells() {
        let t = cell as f64 * h;
        let a0 = s.values[cell];
        let sig = (s.values[cell + 1] - a0) / h;
        let rot: Vec<C64> = (0..n).map(|k| C64::from_polar(1.0, lam[k] * t)).collect();
        // b² cross term uses b¹ at the cell start plus the in-cell growth.
        let mut db2 = DVector::<C64>::zeros(n);
        for k in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            let mut same = C64::new(0.0, 0.0);
            for j in 0..n {
                let dkj = d[(k, j)];
                if dkj == 0.0 {
                    continue;
                }
                let ph = C64::from_polar(1.0, (lam[k] - lam[j]) * t);
                let outer = a0 * chain(&[lam[k] - lam[j]], h) + sig * chain(&[lam[k] - lam[j], 0.0], h);
                acc += dkj * ph * outer * b1[j];
                let w = dkj * d[(j, 0)];
                if w != 0.0 {
                    let inner = a0 * a0 * c00[(k, j)] + a0 * sig * (c01[(k, j)] + c10[(k, j)]) + sig * sig * c11[(k, j)];
                    same += w * inner;
                }
            }
            // b¹ within the cell contributes −s D̃ e₁, so the same-cell term enters with (+).
            let quad = a0 * a0 * m0[k] + 2.0 * a0 * sig * m1[k] + sig * sig * m2[k];
            db2[k] = -acc + same * rot[k] * rot[0].conj() - I * p[(k, 0)] * quad * rot[k] * rot[0].conj();
        }
        for k in 0..n {
            let lin = a0 * m0[k] + sig * m1[k];
            b1[k] -= d[(k, 0)] * lin * rot[k] * rot[0].conj();
        }
        b2 += db2;
    }
    let t = s.duration();
    let to_state = |b: &DVector<C64>| SpectralState {
        coeffs: DVector::from_fn(n, |k, _| b[k] * C64::from_polar(1.0, -lam[k] * t)),
        time: t,
    };
    (to_state(&b1), to_state(&b2))
}

/// `Im⟨ξ̃(T), φ_K e^{−iλ₁T}⟩`.
pub fn gauge_component(xi_tilde: &SpectralState, k: usize) -> f64 {
    (xi_tilde.coeffs[k - 1] * C64::from_polar(1.0, lambda(1) * xi_tilde.time)).im
}
