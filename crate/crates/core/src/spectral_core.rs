//! Dirichlet eigenbasis on (0,1), dipole profiles and their Galerkin matrices.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::converged_trig_moments;
use crate::C64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("unknown dipole: {0}")]
    UnknownDipole(String),
    #[error("mode index must be at least 1")]
    ZeroMode,
    #[error("quadrature did not converge with {panels} panels of order {order}")]
    QuadratureNotConverged { panels: usize, order: usize },
    #[error("truncation must be at least 2, got {0}")]
    Truncation(usize),
}

/// Mode index `k ≥ 1` of the eigenbasis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModeIndex(usize);

impl ModeIndex {
    pub fn new(k: usize) -> Result<Self, SpectralError> {
        if k == 0 {
            Err(SpectralError::ZeroMode)
        } else {
            Ok(Self(k))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `λ_k = (kπ)²`.
pub fn eigenvalue(k: ModeIndex) -> f64 {
    lambda(k.0)
}

/// `ω_j = λ_j − λ_1`.
pub fn omega(j: ModeIndex) -> f64 {
    omega_of(j.0)
}

#[inline]
pub fn lambda(k: usize) -> f64 {
    let kf = k as f64;
    kf * kf * PI * PI
}

#[inline]
pub fn omega_of(j: usize) -> f64 {
    let jf = j as f64;
    (jf * jf - 1.0) * PI * PI
}

/// `φ_k(x) = √2 sin(kπx)`.
pub fn phi(k: usize, x: f64) -> f64 {
    std::f64::consts::SQRT_2 * (k as f64 * PI * x).sin()
}

/// `μ(x) = Σ_i p_i x^i + Σ_m c_m cos(mπx)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct DipoleProfile {
    pub poly: Vec<f64>,
    pub cos_terms: Vec<(usize, f64)>,
}

impl DipoleProfile {
    pub fn polynomial(coeffs: &[f64]) -> Self {
        Self { poly: coeffs.to_vec(), cos_terms: Vec::new() }
    }

    /// Adds `w·φ₂/φ₁ = 2w cos(πx)`.
    pub fn with_ratio_weight(mut self, w: f64) -> Self {
        if w != 0.0 {
            self.cos_terms.push((1, 2.0 * w));
        }
        self
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.deriv(x, 0)
    }

    pub fn d1(&self, x: f64) -> f64 {
        self.deriv(x, 1)
    }

    pub fn d2(&self, x: f64) -> f64 {
        self.deriv(x, 2)
    }

    fn deriv(&self, x: f64, order: u32) -> f64 {
        let mut poly = 0.0;
        for (i, &c) in self.poly.iter().enumerate() {
            if (i as u32) < order {
                continue;
            }
            let falling: f64 = (0..order).map(|r| (i as u32 - r) as f64).product();
            poly += c * falling * x.powi((i as u32 - order) as i32);
        }
        let mut trig = 0.0;
        for &(m, c) in &self.cos_terms {
            let a = m as f64 * PI;
            let (s, co) = (a * x).sin_cos();
            trig += c * match order % 4 {
                0 => co,
                1 => -a * s,
                2 => -a * a * co,
                _ => a * a * a * s,
            };
        }
        poly + trig
    }

    /// Non-polynomial part vanishes and all polynomial terms beyond degree 1 are zero.
    pub fn is_affine(&self) -> bool {
        self.cos_terms.iter().all(|&(_, c)| c == 0.0) && self.poly.iter().skip(2).all(|&c| c == 0.0)
    }
}

/// Quadrature settings for dipole integrals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub order: usize,
    pub min_panels: usize,
    pub tol: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { order: 64, min_panels: 8, tol: 1e-13 }
    }
}

/// Dipole profile with its Galerkin data on the first `n` modes.
///
/// Entries come from the cosine moments `C(m) = ∫₀¹ μ cos(mπx)`:
/// `⟨μφ_j,φ_k⟩ = C(|j−k|) − C(j+k)`.
#[derive(Clone, Debug)]
pub struct DipoleModel {
    pub name: String,
    pub profile: DipoleProfile,
    pub n: usize,
    /// `⟨μφ_j,φ_k⟩`, `j,k = 1..n` (zero-based storage).
    pub matrix: DMatrix<f64>,
    /// Cosine moments of μ up to `2n`.
    cos_mu: Vec<f64>,
    /// Cosine moments of (μ')² up to `2n`.
    cos_mu1sq: Vec<f64>,
    quad: QuadratureConfig,
}

pub const PRESETS: [&str; 5] = [
    "x_minus_half",
    "x_squared",
    "x_squared_corrected",
    "two_lost",
    "x_minus_projection_<K>",
];

impl DipoleModel {
    /// Named preset. `x_minus_projection_K` (K even) removes the `φ_K` coupling of `x`.
    pub fn preset(name: &str, n: usize) -> Result<Self, SpectralError> {
        let q = QuadratureConfig::default();
        let profile = preset_profile(name, &q)?;
        Self::from_profile(name, profile, n, q)
    }

    pub fn from_profile(
        name: &str,
        profile: DipoleProfile,
        n: usize,
        quad: QuadratureConfig,
    ) -> Result<Self, SpectralError> {
        if n < 2 {
            return Err(SpectralError::Truncation(n));
        }
        let m_max = 2 * n + 2;
        let mu = |x: f64| profile.eval(x);
        let mu1sq = |x: f64| {
            let d = profile.d1(x);
            d * d
        };
        let (cos_mu, _) = converged_trig_moments(&mu, m_max, quad.order, quad.min_panels, quad.tol)
            .map_err(|panels| SpectralError::QuadratureNotConverged { panels, order: quad.order })?;
        let (cos_mu1sq, _) = converged_trig_moments(&mu1sq, m_max, quad.order, quad.min_panels, quad.tol)
            .map_err(|panels| SpectralError::QuadratureNotConverged { panels, order: quad.order })?;
        let matrix = product_matrix(&cos_mu, n);
        Ok(Self { name: name.to_string(), profile, n, matrix, cos_mu, cos_mu1sq, quad })
    }

    /// Same profile at a different truncation.
    pub fn with_truncation(&self, n: usize) -> Result<Self, SpectralError> {
        Self::from_profile(&self.name, self.profile.clone(), n, self.quad)
    }

    /// `⟨μφ_j,φ_k⟩` for one-based `j,k`.
    #[inline]
    pub fn m(&self, j: usize, k: usize) -> f64 {
        if j <= self.n && k <= self.n {
            self.matrix[(j - 1, k - 1)]
        } else {
            self.coefficient_direct(j, k)
        }
    }

    fn coefficient_direct(&self, j: usize, k: usize) -> f64 {
        let m_max = j + k;
        let mu = |x: f64| self.profile.eval(x);
        let (c, _) = converged_trig_moments(&mu, m_max, self.quad.order, self.quad.min_panels, self.quad.tol)
            .expect("dipole quadrature");
        c[j.abs_diff(k)] - c[j + k]
    }

    /// `⟨(μ')²φ_j,φ_k⟩` on the first `n` modes.
    pub fn mu1sq_matrix(&self) -> DMatrix<f64> {
        product_matrix(&self.cos_mu1sq, self.n)
    }

    /// Galerkin matrix of `2μ'∂ₓ + μ''`: `D_kl = ⟨(2μ'∂ₓ+μ'')φ_l, φ_k⟩`.
    pub fn gauge_drift_matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        let m_max = 2 * n + 2;
        let d1 = |x: f64| self.profile.d1(x);
        let d2 = |x: f64| self.profile.d2(x);
        let (_, s1) = converged_trig_moments(&d1, m_max, self.quad.order, self.quad.min_panels, self.quad.tol)
            .expect("dipole quadrature");
        let (c2, _) = converged_trig_moments(&d2, m_max, self.quad.order, self.quad.min_panels, self.quad.tol)
            .expect("dipole quadrature");
        let sine = |m: i64| if m >= 0 { s1[m as usize] } else { -s1[(-m) as usize] };
        DMatrix::from_fn(n, n, |r, c| {
            let (k, l) = ((r + 1) as i64, (c + 1) as i64);
            2.0 * l as f64 * PI * (sine(k + l) + sine(k - l)) + c2[(k - l).unsigned_abs() as usize] - c2[(k + l) as usize]
        })
    }

    /// `⟨(μ')²φ₁,φ_K⟩` from its own cosine moments.
    pub fn a_coefficient(&self, k: usize) -> f64 {
        if k + 1 < self.cos_mu1sq.len() {
            self.cos_mu1sq[k - 1] - self.cos_mu1sq[k + 1]
        } else {
            let f = |x: f64| {
                let d = self.profile.d1(x);
                d * d
            };
            let (c, _) = converged_trig_moments(&f, k + 1, self.quad.order, self.quad.min_panels, self.quad.tol)
                .expect("dipole quadrature");
            c[k - 1] - c[k + 1]
        }
    }

    pub fn cosine_moments(&self) -> &[f64] {
        &self.cos_mu
    }
}

fn product_matrix(cos: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |r, c| {
        let (j, k) = (r + 1, c + 1);
        cos[j.abs_diff(k)] - cos[j + k]
    })
}

fn inner_with_phi1(profile: &DipoleProfile, k: usize, q: &QuadratureConfig) -> Result<f64, SpectralError> {
    let f = |x: f64| profile.eval(x);
    let (c, _) = converged_trig_moments(&f, k + 1, q.order, q.min_panels, q.tol)
        .map_err(|panels| SpectralError::QuadratureNotConverged { panels, order: q.order })?;
    Ok(c[k - 1] - c[k + 1])
}

fn preset_profile(name: &str, q: &QuadratureConfig) -> Result<DipoleProfile, SpectralError> {
    match name {
        "x_minus_half" => Ok(DipoleProfile::polynomial(&[-0.5, 1.0])),
        "x_squared" => Ok(DipoleProfile::polynomial(&[0.0, 0.0, 1.0])),
        "x_squared_corrected" => {
            let base = DipoleProfile::polynomial(&[0.0, 0.0, 1.0]);
            let b = inner_with_phi1(&base, 2, q)?;
            Ok(base.with_ratio_weight(-b))
        }
        "two_lost" => {
            let base = DipoleProfile::polynomial(&[0.0, 0.0, 1.0]);
            let a = inner_with_phi1(&base, 1, q)?;
            let b = inner_with_phi1(&base, 2, q)?;
            Ok(DipoleProfile::polynomial(&[-a, 0.0, 1.0]).with_ratio_weight(-b))
        }
        other => {
            if let Some(k) = other.strip_prefix("x_minus_projection_").and_then(|s| s.parse::<usize>().ok()) {
                if k >= 2 && k % 2 == 0 {
                    let base = DipoleProfile::polynomial(&[0.0, 1.0]);
                    let c = inner_with_phi1(&base, k, q)?;
                    // φ_K/φ₁ = 2 Σ_{m odd < K} cos(mπx) for even K.
                    let mut p = base;
                    for m in (1..k).step_by(2) {
                        p.cos_terms.push((m, -2.0 * c));
                    }
                    return Ok(p);
                }
            }
            Err(SpectralError::UnknownDipole(other.to_string()))
        }
    }
}

/// `⟨μφ_j,φ_k⟩` for one-based `j,k`.
pub fn dipole_coefficient(mu: &DipoleModel, j: ModeIndex, k: ModeIndex) -> f64 {
    mu.m(j.0, k.0)
}

/// Leading-order prediction `4K[(−1)^{K+n}μ'(1) − μ'(0)]/(n³π²)` of `⟨μφ_K,φ_n⟩`.
pub fn asymptotic_dipole(mu: &DipoleModel, big_k: ModeIndex, n: ModeIndex) -> f64 {
    let (kk, nn) = (big_k.0 as f64, n.0 as f64);
    let sign = if (big_k.0 + n.0).is_multiple_of(2) { 1.0 } else { -1.0 };
    4.0 * kk * (sign * mu.profile.d1(1.0) - mu.profile.d1(0.0)) / (nn.powi(3) * PI * PI)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondMoment {
    /// `A_K = ⟨(μ')²φ₁,φ_K⟩`.
    pub value: f64,
    /// Sign of `A_K` (0 when degenerate).
    pub alpha: i8,
    pub degenerate: bool,
}

pub fn second_moment_coeff(mu: &DipoleModel, big_k: ModeIndex, tol: f64) -> SecondMoment {
    let value = mu.a_coefficient(big_k.0);
    let degenerate = value.abs() < tol;
    let alpha = if degenerate { 0 } else if value > 0.0 { 1 } else { -1 };
    SecondMoment { value, alpha, degenerate }
}

/// Coefficients `c_k = ⟨ψ,φ_k⟩`, `k = 1..N`, at a time stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub coeffs: DVector<C64>,
    pub time: f64,
}

impl SpectralState {
    pub fn zeros(n: usize) -> Self {
        Self { coeffs: DVector::zeros(n), time: 0.0 }
    }

    /// Unit coefficient on mode `k` (one-based).
    pub fn basis(n: usize, k: usize) -> Self {
        let mut s = Self::zeros(n);
        s.coeffs[k - 1] = C64::new(1.0, 0.0);
        s
    }

    /// `ψ_k(t) = φ_k e^{−iλ_k t}`.
    pub fn eigenstate(n: usize, k: usize, t: f64) -> Self {
        let mut s = Self::zeros(n);
        s.coeffs[k - 1] = C64::from_polar(1.0, -lambda(k) * t);
        s.time = t;
        s
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.norm()
    }

    /// `⟨self, other⟩ = Σ a_k conj(b_k)`.
    pub fn inner(&self, other: &SpectralState) -> C64 {
        self.coeffs.iter().zip(other.coeffs.iter()).map(|(a, b)| a * b.conj()).sum()
    }

    /// `⟨self, ψ_k(t)⟩`.
    pub fn component(&self, k: usize, t: f64) -> C64 {
        self.coeffs[k - 1] * C64::from_polar(1.0, lambda(k) * t)
    }
}

/// Truncated `H^s_(0)` norm `(Σ|k^s c_k|²)^{1/2}`.
pub fn sobolev_norm(psi: &SpectralState, s: f64) -> f64 {
    psi.coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| ((i + 1) as f64).powf(2.0 * s) * c.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LostDirectionSet {
    pub indices: Vec<usize>,
    pub tolerance: f64,
    /// `min |⟨μφ₁,φ_k⟩|·k³` over the controlled modes.
    pub c: f64,
}

impl LostDirectionSet {
    pub fn contains(&self, k: usize) -> bool {
        self.indices.binary_search(&k).is_ok()
    }

    /// Controlled modes `𝒥 ∩ [1,n]`.
    pub fn controlled(&self, n: usize) -> Vec<usize> {
        (1..=n).filter(|k| !self.contains(*k)).collect()
    }
}

/// Modes `k ≤ n` with `|⟨μφ₁,φ_k⟩|·k³ < tol`.
pub fn lost_directions(mu: &DipoleModel, n: usize, tol: f64) -> LostDirectionSet {
    let mut indices = Vec::new();
    let mut c = f64::INFINITY;
    for k in 1..=n {
        let scaled = mu.m(1, k).abs() * (k as f64).powi(3);
        if scaled < tol {
            indices.push(k);
        } else {
            c = c.min(scaled);
        }
    }
    LostDirectionSet { indices, tolerance: tol, c }
}

/// Tail bound `C² Σ_{j>J} j⁻⁶` for products of two `C/j³` coefficient sequences.
pub fn product_tail_bound(c: f64, j: usize) -> f64 {
    let jf = j as f64;
    c * c / (5.0 * jf.powi(5))
}
