//! Second- and third-order forms along lost directions.
//!
//! With `b_j = ⟨μφ_K,φ_j⟩⟨μφ_j,φ₁⟩`:
//!
//! ```text
//! Q²_K(v)  = −Σ_j b_j ∫∫_{τ<t} v(t)v(τ) e^{i[(λ_K−λ_j)t + ω_j τ]}
//! Q̃²_K(v)  =  Σ_j b_j ∫∫_{τ<t} v(t)v(τ) sin[(λ_j−λ_K)t − ω_j τ + (λ_K−λ₁)T]
//! 𝒬_K(S)   = −A_K ∫ S² cos[(λ_K−λ₁)(t−T)] + ∫∫_{τ<t} S(t)S(τ) k_K(t,τ)
//! Q³_K(v)  = −i Σ_{l,m} B_{lm} ∫∫∫_{t₃<t₂<t₁} v v v e^{i[(λ_K−λ_l)t₁ + (λ_l−λ_m)t₂ + (λ_m−λ₁)t₃]}
//! ```
//!
//! Controls are cell-constant and primitives cell-linear, so each mode's
//! contribution is a cell recursion over exact [`chain`] integrals.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{cell_moment, chain};
use crate::simulator::Control;
use crate::spectral_core::{lambda, lost_directions, omega_of, DipoleModel};
use crate::C64;

#[derive(Debug, Error)]
pub enum FormError {
    #[error("A_{k} = {value:.3e} is degenerate; no coercivity threshold")]
    DegenerateA { k: usize, value: f64 },
    #[error("truncation J = {j} exceeds the dipole model size {n}")]
    Truncation { j: usize, n: usize },
    #[error("expected a {0}")]
    Shape(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormKind {
    Q2,
    Q2Tilde,
    QS,
    Q3,
}

/// Where the `A_K` coefficient of `𝒬` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ASource {
    /// `⟨(μ')²φ₁,φ_K⟩` by quadrature.
    Quadrature,
    /// `Σ_{j≤J}(λ_j − (λ₁+λ_K)/2)⟨μφ₁,φ_j⟩⟨μφ_K,φ_j⟩`, matching the truncated kernel.
    Series,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormReport {
    pub kind: FormKind,
    pub k: usize,
    pub t: f64,
    pub truncation: usize,
    pub cells: usize,
    pub re: f64,
    pub im: f64,
    pub tail_estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_used: Option<f64>,
}

impl FormReport {
    pub fn value(&self) -> C64 {
        C64::new(self.re, self.im)
    }
}

/// `e^{iθn}` for consecutive `n`, resynchronised periodically.
struct Phasor {
    theta: f64,
    step: C64,
    cur: C64,
    n: usize,
}

impl Phasor {
    fn new(theta: f64) -> Self {
        Self { theta, step: C64::from_polar(1.0, theta), cur: C64::new(1.0, 0.0), n: 0 }
    }

    fn next(&mut self) -> C64 {
        let z = self.cur;
        self.n += 1;
        self.cur = if self.n.is_multiple_of(128) { C64::from_polar(1.0, self.theta * self.n as f64) } else { self.cur * self.step };
        z
    }
}

fn check_control(v: &Control) -> Result<(), FormError> {
    if v.primitive {
        Err(FormError::Shape("cell-constant control"))
    } else {
        Ok(())
    }
}

fn check_truncation(mu: &DipoleModel, j: usize) -> Result<(), FormError> {
    if j > mu.n {
        Err(FormError::Truncation { j, n: mu.n })
    } else {
        Ok(())
    }
}

/// `b_j = ⟨μφ_K,φ_j⟩⟨μφ_j,φ₁⟩`, `j = 1..=J`.
pub fn pair_products(mu: &DipoleModel, k: usize, j_max: usize) -> Vec<f64> {
    (1..=j_max).map(|j| mu.m(k, j) * mu.m(j, 1)).collect()
}

/// `∫∫_{τ<t} v(t)v(τ) e^{i(αt + βτ)} dτ dt` for a cell-constant `v`.
pub fn triangle_integral(v: &Control, alpha: f64, beta: f64) -> C64 {
    let h = v.step;
    let ca = chain(&[alpha], h);
    let cb = chain(&[beta], h);
    let cab = chain(&[alpha, beta], h);
    let mut pa = Phasor::new(alpha * h);
    let mut pb = Phasor::new(beta * h);
    let mut inner = C64::new(0.0, 0.0);
    let mut acc = C64::new(0.0, 0.0);
    for &x in &v.values {
        let ea = pa.next();
        let eb = pb.next();
        if x != 0.0 {
            acc += x * ea * (ca * inner + x * eb * cab);
            inner += x * eb * cb;
        }
    }
    acc
}

/// Tail estimate `C²Σ_{j>J}j⁻⁶·(∫|v|)²/2` with `C` from the boundary slopes of μ.
fn q2_tail(mu: &DipoleModel, k: usize, j_max: usize, l1: f64) -> f64 {
    let c = boundary_constant(mu, k.max(1));
    c * c / (5.0 * (j_max as f64).powi(5)) * 0.5 * l1 * l1
}

/// `max_K' 4K'(|μ'(0)| + |μ'(1)|)/π²` over `K' ∈ {1, K}`: asymptotic `|⟨μφ_K',φ_n⟩|·n³`.
fn boundary_constant(mu: &DipoleModel, k: usize) -> f64 {
    let s = mu.profile.d1(0.0).abs() + mu.profile.d1(1.0).abs();
    4.0 * k as f64 * s / (PI * PI)
}

fn l1_norm(v: &Control) -> f64 {
    v.values.iter().map(|x| x.abs()).sum::<f64>() * v.step
}

fn q2_raw(k: usize, v: &Control, mu: &DipoleModel, j_max: usize) -> C64 {
    let b = pair_products(mu, k, j_max);
    let terms = crate::par_map((1..=j_max).collect(), |j| {
        let bj = b[j - 1];
        if bj == 0.0 {
            C64::new(0.0, 0.0)
        } else {
            -bj * triangle_integral(v, lambda(k) - lambda(j), omega_of(j))
        }
    });
    terms.into_iter().sum()
}

/// `Q²_{K,T}(v) = ⟨ξ(T),ψ_K(T)⟩` for `v ∈ V_T`, kernel truncated at `J`.
pub fn q2(k: usize, v: &Control, mu: &DipoleModel, j_max: usize) -> Result<FormReport, FormError> {
    check_control(v)?;
    check_truncation(mu, j_max)?;
    let z = q2_raw(k, v, mu, j_max);
    Ok(FormReport {
        kind: FormKind::Q2,
        k,
        t: v.duration(),
        truncation: j_max,
        cells: v.len(),
        re: z.re,
        im: z.im,
        tail_estimate: q2_tail(mu, k, j_max, l1_norm(v)),
        a_used: None,
    })
}

/// `Q̃²_{K,T}(v) = Im⟨ξ(T), φ_K e^{−iλ₁T}⟩`.
pub fn q2_tilde(k: usize, v: &Control, mu: &DipoleModel, j_max: usize) -> Result<FormReport, FormError> {
    check_control(v)?;
    check_truncation(mu, j_max)?;
    let t = v.duration();
    let z = q2_raw(k, v, mu, j_max) * C64::from_polar(1.0, -(lambda(k) - lambda(1)) * t);
    Ok(FormReport {
        kind: FormKind::Q2Tilde,
        k,
        t,
        truncation: j_max,
        cells: v.len(),
        re: z.im,
        im: 0.0,
        tail_estimate: q2_tail(mu, k, j_max, l1_norm(v)),
        a_used: None,
    })
}

/// `Σ_{j≤J}(λ_j − (λ₁+λ_K)/2)⟨μφ₁,φ_j⟩⟨μφ_K,φ_j⟩`.
pub fn a_series(mu: &DipoleModel, k: usize, j_max: usize) -> f64 {
    let shift = 0.5 * (lambda(1) + lambda(k));
    (1..=j_max).map(|j| (lambda(j) - shift) * mu.m(1, j) * mu.m(k, j)).sum()
}

/// `∫∫_{τ<t} S(t)S(τ) e^{i(βt − ωτ)}` for a cell-linear nodal `S`.
fn linear_triangle(s: &Control, beta: f64, omega: f64) -> C64 {
    let h = s.step;
    let w = -omega;
    let ob0 = chain(&[beta], h);
    let ob1 = chain(&[beta, 0.0], h);
    let iw0 = chain(&[w], h);
    let iw1 = chain(&[w, 0.0], h);
    let c00 = chain(&[beta, w], h);
    let c01 = chain(&[beta, w, 0.0], h);
    let c10 = chain(&[beta, 0.0, w], h) + c01;
    let c11 = chain(&[beta, 0.0, w, 0.0], h) + 2.0 * chain(&[beta, w, 0.0, 0.0], h);
    let mut pb = Phasor::new(beta * h);
    let mut pw = Phasor::new(w * h);
    let mut inner = C64::new(0.0, 0.0);
    let mut acc = C64::new(0.0, 0.0);
    for win in s.values.windows(2) {
        let a = win[0];
        let sig = (win[1] - win[0]) / h;
        let eb = pb.next();
        let ew = pw.next();
        let outer = a * ob0 + sig * ob1;
        let same = a * a * c00 + a * sig * (c01 + c10) + sig * sig * c11;
        acc += eb * (outer * inner + ew * same);
        inner += ew * (a * iw0 + sig * iw1);
    }
    acc
}

/// `∫₀ᵀ S² cos[γ(t−T)]` for cell-linear `S`.
fn mass_term(s: &Control, gamma: f64) -> f64 {
    let h = s.step;
    let t = s.duration();
    let m0 = cell_moment(0, gamma, h);
    let m1 = cell_moment(1, gamma, h);
    let m2 = cell_moment(2, gamma, h);
    let mut p = Phasor::new(gamma * h);
    let mut acc = C64::new(0.0, 0.0);
    for win in s.values.windows(2) {
        let a = win[0];
        let sig = (win[1] - win[0]) / h;
        acc += p.next() * (a * a * m0 + 2.0 * a * sig * m1 + sig * sig * m2);
    }
    (acc * C64::from_polar(1.0, -gamma * t)).re
}

/// `𝒬_{K,T}(S)` for a nodal primitive `S`, kernel truncated at `J`.
pub fn q_s(k: usize, s: &Control, mu: &DipoleModel, j_max: usize, a: ASource) -> Result<FormReport, FormError> {
    if !s.primitive {
        return Err(FormError::Shape("nodal primitive"));
    }
    check_truncation(mu, j_max)?;
    let t = s.duration();
    let gamma = lambda(k) - lambda(1);
    let a_k = match a {
        ASource::Quadrature => mu.a_coefficient(k),
        ASource::Series => a_series(mu, k, j_max),
    };
    let b = pair_products(mu, k, j_max);
    let rot = C64::from_polar(1.0, gamma * t);
    let terms = crate::par_map((1..=j_max).collect(), |j| {
        let cj = (lambda(j) - lambda(k)) * omega_of(j) * b[j - 1];
        if cj == 0.0 {
            0.0
        } else {
            cj * (linear_triangle(s, lambda(j) - lambda(k), omega_of(j)) * rot).im
        }
    });
    let value = -a_k * mass_term(s, gamma) + terms.into_iter().sum::<f64>();
    let (tail_c, _) = c_tail(mu, k, j_max);
    let l1: f64 = s.values.windows(2).map(|w| 0.5 * (w[0].abs() + w[1].abs())).sum::<f64>() * s.step;
    Ok(FormReport {
        kind: FormKind::QS,
        k,
        t,
        truncation: j_max,
        cells: s.cells(),
        re: value,
        im: 0.0,
        tail_estimate: 0.5 * tail_c * l1 * l1,
        a_used: Some(a_k),
    })
}

/// Asymptotic bound on `Σ_{j>J}|(λ_j−λ_K)ω_j b_j|` and the constant behind it.
fn c_tail(mu: &DipoleModel, k: usize, j_max: usize) -> (f64, f64) {
    let c1 = boundary_constant(mu, 1);
    let ck = boundary_constant(mu, k);
    let coef = PI.powi(4) * c1 * ck;
    (coef / j_max as f64, coef)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TStar {
    pub k: usize,
    pub value: f64,
    pub a_k: f64,
    /// Partial sum of `C_K` over `j ≤ J`.
    pub c_partial: f64,
    pub c_tail: f64,
    pub truncation: usize,
}

/// Coercivity threshold `T*_K`, with `C_K = partial sum + tail bound`.
pub fn t_star(k: usize, mu: &DipoleModel, j_max: usize) -> Result<TStar, FormError> {
    check_truncation(mu, j_max)?;
    let a_k = mu.a_coefficient(k);
    if a_k.abs() < 1e-12 {
        return Err(FormError::DegenerateA { k, value: a_k });
    }
    let c_partial: f64 = (1..=j_max)
        .map(|j| ((lambda(j) - lambda(k)) * omega_of(j) * mu.m(1, j) * mu.m(k, j)).abs())
        .sum();
    let (tail, _) = c_tail(mu, k, j_max);
    let c = c_partial + tail;
    let mut value = a_k.abs() / (2.0 * c);
    if k >= 2 {
        value = value.min(PI / (3.0 * (lambda(k) - lambda(1))));
    }
    Ok(TStar { k, value, a_k, c_partial, c_tail: tail, truncation: j_max })
}

/// Partial sums of `C_K` for `J = 1..=j_max`.
pub fn c_k_partial_sums(k: usize, mu: &DipoleModel, j_max: usize) -> Vec<f64> {
    let mut acc = 0.0;
    (1..=j_max)
        .map(|j| {
            acc += ((lambda(j) - lambda(k)) * omega_of(j) * mu.m(1, j) * mu.m(k, j)).abs();
            acc
        })
        .collect()
}

/// `∫∫∫_{t₃<t₂<t₁} v v v e^{i(αt₁ + βt₂ + γt₃)}` for a cell-constant `v`.
pub fn simplex_integral3(v: &Control, alpha: f64, beta: f64, gamma: f64) -> C64 {
    let h = v.step;
    let ca = chain(&[alpha], h);
    let cb = chain(&[beta], h);
    let cg = chain(&[gamma], h);
    let cab = chain(&[alpha, beta], h);
    let cbg = chain(&[beta, gamma], h);
    let cabg = chain(&[alpha, beta, gamma], h);
    let mut pa = Phasor::new(alpha * h);
    let mut pb = Phasor::new(beta * h);
    let mut pg = Phasor::new(gamma * h);
    // g1: cells strictly before for the innermost; g2: two-level strict prefix.
    let mut g1 = C64::new(0.0, 0.0);
    let mut g2 = C64::new(0.0, 0.0);
    let mut acc = C64::new(0.0, 0.0);
    for &x in &v.values {
        let ea = pa.next();
        let eb = pb.next();
        let eg = pg.next();
        if x == 0.0 {
            continue;
        }
        acc += x * ea * (ca * g2 + x * eb * cab * g1 + x * x * eb * eg * cabg);
        g2 += x * eb * (cb * g1 + x * eg * cbg);
        g1 += x * eg * cg;
    }
    acc
}

/// `Q³_{K,T}(v)` with `B_{lm}` truncated at `J×J`.
pub fn q3(k: usize, v: &Control, mu: &DipoleModel, j_max: usize) -> Result<FormReport, FormError> {
    check_control(v)?;
    check_truncation(mu, j_max)?;
    let rows = crate::par_map((1..=j_max).collect(), |l| {
        let mut acc = C64::new(0.0, 0.0);
        let mkl = mu.m(k, l);
        if mkl == 0.0 {
            return acc;
        }
        for m in 1..=j_max {
            let bb = mkl * mu.m(l, m) * mu.m(m, 1);
            if bb != 0.0 {
                acc += bb * simplex_integral3(v, lambda(k) - lambda(l), lambda(l) - lambda(m), omega_of(m));
            }
        }
        acc
    });
    let z = C64::new(0.0, -1.0) * rows.into_iter().sum::<C64>();
    let c = boundary_constant(mu, k);
    let l1 = l1_norm(v);
    Ok(FormReport {
        kind: FormKind::Q3,
        k,
        t: v.duration(),
        truncation: j_max,
        cells: v.len(),
        re: z.re,
        im: z.im,
        tail_estimate: c * c * c * 2.0 / (5.0 * (j_max as f64).powi(5)) * l1.powi(3) / 6.0,
        a_used: None,
    })
}

/// `h²_K(t,τ)` for explicit coefficients `b_j`, `j = 1..`.
pub fn kernel_h2(k: usize, b: &[f64], t: f64, tau: f64) -> C64 {
    b.iter()
        .enumerate()
        .map(|(i, &bj)| {
            let j = i + 1;
            -bj * C64::from_polar(1.0, (lambda(k) - lambda(j)) * t + omega_of(j) * tau)
        })
        .sum()
}

/// `Σ_{j≥2}⟨μφ₁,φ_j⟩²(j²−1)/(π³j²(j²−2))`.
pub fn v_plus_series(mu: &DipoleModel, j_max: usize) -> f64 {
    (2..=j_max)
        .map(|j| {
            let jf = j as f64;
            mu.m(1, j).powi(2) * (jf * jf - 1.0) / (PI.powi(3) * jf * jf * (jf * jf - 2.0))
        })
        .sum()
}

/// `cos(π²t)` on `[0, 2/π]`.
pub fn v_plus_control(cells: usize) -> Control {
    Control::from_fn(2.0 / PI, cells, |t| (PI * PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Order2,
    Order3,
    Undecided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub k: usize,
    pub order: Order,
    pub truncation: usize,
    /// Modes with `b_j` above threshold.
    pub support: Vec<usize>,
    /// Resonant pairs `(j*, k*)` with `j*² + k*² = K² + 1`.
    pub resonant_pairs: Vec<(usize, usize)>,
    /// A witness `(n₁, n₂)` with `n₁, n₂ > K` and nonzero triple product.
    pub triple_witness: Option<(usize, usize)>,
    pub threshold: f64,
}

/// Decides whether the lost direction `K` is recovered at second or third order.
///
/// Products are compared against `tol·max_{j,k}|⟨μφ_j,φ_k⟩|ⁿ` (`n` = number of factors).
pub fn classify_order(k: usize, mu: &DipoleModel, j_max: usize, tol: f64) -> Result<Classification, FormError> {
    check_truncation(mu, j_max)?;
    let scale = mu.matrix.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let thr2 = tol * scale * scale;
    let thr3 = tol * scale * scale * scale;
    let b = pair_products(mu, k, j_max);
    let support: Vec<usize> = (1..=j_max).filter(|&j| b[j - 1].abs() > thr2).collect();
    let lost = lost_directions(mu, j_max, tol.max(1e-9) * 1e3);
    let controlled: Vec<usize> = lost.controlled(k.min(j_max));
    let mut resonant_pairs = Vec::new();
    for &js in &controlled {
        for &ks in &controlled {
            if js * js + ks * ks == k * k + 1 {
                resonant_pairs.push((js, ks));
            }
        }
    }
    let in_resonant = |j: usize| resonant_pairs.iter().any(|&(a, _)| a == j);
    let degenerate = support.iter().all(|&j| in_resonant(j))
        && resonant_pairs.iter().all(|&(a, c)| (b[a - 1] - b[c - 1]).abs() <= thr2);
    let mut triple_witness = None;
    if degenerate {
        'outer: for n1 in k + 1..=j_max {
            let a = mu.m(k, n1);
            if a.abs() <= thr3 {
                continue;
            }
            for n2 in k + 1..=j_max {
                if (a * mu.m(n1, n2) * mu.m(n2, 1)).abs() > thr3 {
                    triple_witness = Some((n1, n2));
                    break 'outer;
                }
            }
        }
    }
    let order = if !degenerate {
        Order::Order2
    } else if triple_witness.is_some() {
        Order::Order3
    } else {
        Order::Undecided
    };
    Ok(Classification { k, order, truncation: j_max, support, resonant_pairs, triple_witness, threshold: thr2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::{second_order, third_order};
    use crate::moment_solver::project_vt;
    use crate::quadrature::CompositeRule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_control(seed: u64, cells: usize, t: f64) -> Control {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Control::new((0..cells).map(|_| rng.random_range(-1.0..1.0)).collect(), t / cells as f64)
    }

    fn vt_control(mu: &DipoleModel, seed: u64, cells: usize, t: f64) -> Control {
        let lost = lost_directions(mu, mu.n, 1e-8);
        let freqs: Vec<f64> = lost.controlled(mu.n).into_iter().map(omega_of).collect();
        project_vt(&rand_control(seed, cells, t), &freqs).unwrap()
    }

    #[test]
    fn triangle_matches_nested_quadrature() {
        let v = rand_control(1, 5, 0.2);
        let (a, b) = (13.0, -40.0);
        let rule = CompositeRule::new(20, 1);
        let mut want = C64::new(0.0, 0.0);
        for n in 0..5 {
            for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                let t = (n as f64 + x) * v.step;
                let mut inner = C64::new(0.0, 0.0);
                for m in 0..=n {
                    let top = if m == n { t } else { (m + 1) as f64 * v.step };
                    let lo = m as f64 * v.step;
                    for (&y, &u) in rule.nodes.iter().zip(&rule.weights) {
                        let tau = lo + y * (top - lo);
                        inner += v.values[m] * u * (top - lo) * C64::from_polar(1.0, b * tau);
                    }
                }
                want += v.values[n] * w * v.step * C64::from_polar(1.0, a * t) * inner;
            }
        }
        assert!((triangle_integral(&v, a, b) - want).norm() < 1e-13);
    }

    #[test]
    fn q2_zero_control() {
        let mu = DipoleModel::preset("x_minus_half", 16).unwrap();
        let r = q2(1, &Control::zeros(10, 0.3), &mu, 16).unwrap();
        assert_eq!(r.value(), C64::new(0.0, 0.0));
    }

    #[test]
    fn q2_matches_expansion_on_vt() {
        let mu = DipoleModel::preset("x_minus_half", 24).unwrap();
        let v = vt_control(&mu, 2, 120, 0.3);
        let xi = second_order(&v, &Control::zeros(120, 0.3), &mu);
        for k in [1usize, 3] {
            let want = xi.component(k, 0.3);
            let got = q2(k, &v, &mu, 24).unwrap().value();
            assert!((got - want).norm() < 1e-10, "K={k}: {got} vs {want}");
        }
    }

    #[test]
    fn q2_tilde_is_phased_q2() {
        let mu = DipoleModel::preset("x_minus_half", 16).unwrap();
        let v = rand_control(3, 40, 0.2);
        let z = q2(3, &v, &mu, 16).unwrap().value();
        let want = (z * C64::from_polar(1.0, -(lambda(3) - lambda(1)) * 0.2)).im;
        assert!((q2_tilde(3, &v, &mu, 16).unwrap().re - want).abs() < 1e-15);
    }

    #[test]
    fn correspondence_identity() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        for (seed, t) in [(4u64, 0.1), (5, 0.3)] {
            let v = vt_control(&mu, seed, 200, t);
            for k in [1usize, 2] {
                let lhs = q2_tilde(k, &v, &mu, 64).unwrap().re;
                let rhs = q_s(k, &v.primitive(), &mu, 64, ASource::Series).unwrap().re;
                let nv = v.l2_norm().powi(2);
                assert!((lhs - rhs).abs() < 1e-9 * nv.max(1.0), "K={k} T={t}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn a_series_converges_to_quadrature() {
        let mu = DipoleModel::preset("x_minus_half", 256).unwrap();
        for k in [1usize, 2, 3] {
            let a = mu.a_coefficient(k);
            let s = a_series(&mu, k, 256);
            if a.abs() > 1e-12 {
                assert!(((s - a) / a).abs() < 1e-3, "K={k}: {s} vs {a}");
            }
        }
        assert!((mu.a_coefficient(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn t_star_values() {
        let mu = DipoleModel::preset("x_minus_half", 128).unwrap();
        let t1 = t_star(1, &mu, 128).unwrap();
        assert!((t1.a_k - 1.0).abs() < 1e-12);
        assert!(t1.value > 0.0 && t1.value < 0.05);
        let sums = c_k_partial_sums(1, &mu, 128);
        assert!(sums.windows(2).all(|w| w[1] >= w[0]));
        let mu2 = DipoleModel::preset("x_squared", 64).unwrap();
        let t2 = t_star(2, &mu2, 64).unwrap();
        assert!(t2.value <= 1.0 / (9.0 * PI) + 1e-15);
    }

    #[test]
    fn t_star_degenerate() {
        // (μ')² ≡ 1 is orthogonal to φ₁φ₂.
        let mu = DipoleModel::preset("x_minus_half", 16).unwrap();
        assert!(matches!(t_star(2, &mu, 16), Err(FormError::DegenerateA { .. })));
    }

    #[test]
    fn coercive_below_threshold() {
        let mu = DipoleModel::preset("x_minus_half", 128).unwrap();
        let ts = t_star(1, &mu, 128).unwrap();
        let t = 0.9 * ts.value;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let nodes: Vec<f64> = (0..=64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = Control::primitive_from_nodes(nodes, t / 64.0);
            let q = q_s(1, &s, &mu, 128, ASource::Series).unwrap().re;
            assert!(q <= -0.25 * s.l2_norm().powi(2));
        }
    }

    #[test]
    fn q3_odd_and_matches_expansion() {
        let mu = DipoleModel::preset("x_minus_projection_2", 16).unwrap();
        let v = vt_control(&mu, 7, 60, 0.2);
        let a = q3(2, &v, &mu, 16).unwrap().value();
        let b = q3(2, &v.scaled(-1.0), &mu, 16).unwrap().value();
        assert_eq!(a, -b);
        let z = Control::zeros(60, 0.2);
        let zeta = third_order(&v, &z, &z, &mu);
        let want = zeta.component(2, 0.2);
        assert!((a - want).norm() < 1e-10 * want.norm().max(1e-3), "{a} vs {want}");
    }

    #[test]
    fn simplex3_matches_brute_force() {
        let v = rand_control(8, 4, 0.3);
        let rule = CompositeRule::new(12, 4);
        let f = |t: f64| v.value_at(t);
        let (a, b, g) = (5.0, -7.0, 2.0);
        let mut want = C64::new(0.0, 0.0);
        let t = 0.3;
        for (&x1, &w1) in rule.nodes.iter().zip(&rule.weights) {
            let t1 = x1 * t;
            for (&x2, &w2) in rule.nodes.iter().zip(&rule.weights) {
                let t2 = x2 * t1;
                for (&x3, &w3) in rule.nodes.iter().zip(&rule.weights) {
                    let t3 = x3 * t2;
                    want += w1 * t * w2 * t1 * w3 * t2 * f(t1) * f(t2) * f(t3) * C64::from_polar(1.0, a * t1 + b * t2 + g * t3);
                }
            }
        }
        // The discontinuities of v limit the brute-force accuracy.
        assert!((simplex_integral3(&v, a, b, g) - want).norm() < 1e-4);
    }

    #[test]
    fn classification_examples() {
        let mu = DipoleModel::preset("x_minus_half", 64).unwrap();
        assert_eq!(classify_order(1, &mu, 64, 1e-10).unwrap().order, Order::Order2);
        let mu = DipoleModel::preset("x_minus_projection_2", 64).unwrap();
        let c = classify_order(2, &mu, 64, 1e-10).unwrap();
        assert_eq!(c.order, Order::Order3, "{c:?}");
        assert!(c.support.is_empty());
    }

    #[test]
    fn gauge_second_order_is_qs() {
        use crate::expansion::{gauge_component, gauge_expansion_terms};
        let mu = DipoleModel::preset("x_minus_half", 32).unwrap();
        let s = Control::from_fn(0.3, 90, |t| (7.0 * t).sin() + t * t).primitive();
        let (_, xi) = gauge_expansion_terms(&s, &mu);
        for k in [1usize, 3] {
            let q = q_s(k, &s, &mu, 32, ASource::Quadrature).unwrap().re;
            assert!((gauge_component(&xi, k) - q).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_kernel_for_resonant_pair() {
        // K = 7: 1² + 7² = 7² + 1 pairs (1,7); 5² + 5² = 50 pairs (5,5).
        let k = 7;
        let mut b = vec![0.0; 10];
        b[4] = 0.3;
        for &(t, tau) in &[(0.1, 0.05), (0.7, 0.2), (0.33, 0.9)] {
            let d = kernel_h2(k, &b, t, tau) - kernel_h2(k, &b, tau, t);
            assert!(d.norm() < 1e-12);
        }
    }

    #[test]
    fn v_plus_matches_series() {
        let mu = DipoleModel::preset("x_minus_half", 500).unwrap();
        let series = v_plus_series(&mu, 500);
        // independent oracle: the closed form of ⟨μφ₁,φ_j⟩ for μ = x − 1/2
        let oracle: f64 = (2..=500)
            .filter(|j| j % 2 == 0)
            .map(|j| {
                let jf = j as f64;
                let m = 8.0 * jf / (PI * PI * (jf * jf - 1.0).powi(2));
                m * m * (jf * jf - 1.0) / (PI.powi(3) * jf * jf * (jf * jf - 2.0))
            })
            .sum();
        assert!((series - oracle).abs() < 1e-12 * oracle);
        let v = v_plus_control(4000);
        let q = q2_tilde(1, &v, &mu, 500).unwrap();
        assert!(((q.re - series) / series).abs() < 1e-6, "{} {series}", q.re);
    }
}
