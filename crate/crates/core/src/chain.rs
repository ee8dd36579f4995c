//! Ordered-simplex oscillatory integrals.
//!
//! `chain(&[α₁,…,α_r], h)` is the iterated integral
//!
//! ```text
//! ∫₀ʰ e^{iα₁s₁} ∫₀^{s₁} e^{iα₂s₂} … ∫₀^{s_{r-1}} e^{iα_r s_r} ds_r … ds₁
//! ```
//!
//! Writing it in gap variables turns it into the divided difference of `e^{z}`
//! at the nodes `i h (α₁+…+α_k)`, `k = 0..r`, scaled by `h^r`. Separated nodes use
//! the Newton table; clustered ones use the exponential of the bidiagonal
//! matrix whose first-row last entry is that divided difference.
//!
//! Polynomial weights reduce to zero frequencies, e.g. `∫₀ʰ s e^{iαs} ds = chain(&[α, 0.0], h)`.

use crate::C64;

const MAX_ORDER: usize = 6;

/// Iterated simplex integral of exponentials with the given frequencies.
pub fn chain(alphas: &[f64], h: f64) -> C64 {
    let r = alphas.len();
    if r == 0 {
        return C64::new(1.0, 0.0);
    }
    assert!(r < MAX_ORDER, "chain order {r} exceeds {}", MAX_ORDER - 1);
    if r == 1 {
        return h * phi1(alphas[0] * h);
    }
    let mut x = [0.0; MAX_ORDER];
    let mut acc = 0.0;
    for (k, a) in alphas.iter().enumerate() {
        acc += a * h;
        x[k + 1] = acc;
    }
    let x = &x[..=r];
    let dd = if min_gap(x) >= 1.0 { newton_dd(x) } else { bidiagonal_dd(x) };
    dd * h.powi(r as i32)
}

/// `(e^{ix} - 1)/(ix)` with a series near zero.
pub fn phi1(x: f64) -> C64 {
    if x.abs() < 1e-2 {
        let ix = C64::new(0.0, x);
        let mut term = C64::new(1.0, 0.0);
        let mut sum = term;
        for k in 2..12 {
            term = term * ix / k as f64;
            sum += term;
        }
        sum
    } else {
        (C64::new(0.0, x).exp() - 1.0) / C64::new(0.0, x)
    }
}

/// `∫₀ʰ s^p e^{iαs} ds` for `p ≤ 3`.
pub fn cell_moment(p: usize, alpha: f64, h: f64) -> C64 {
    let mut freqs = vec![alpha];
    freqs.extend(std::iter::repeat_n(0.0, p));
    let fact: f64 = (1..=p).map(|k| k as f64).product();
    fact * chain(&freqs, h)
}

fn min_gap(x: &[f64]) -> f64 {
    let mut g = f64::INFINITY;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            g = g.min((x[i] - x[j]).abs());
        }
    }
    g
}

fn newton_dd(x: &[f64]) -> C64 {
    let n = x.len();
    let mut d = [C64::new(0.0, 0.0); MAX_ORDER];
    for k in 0..n {
        d[k] = C64::new(0.0, x[k]).exp();
    }
    for m in 1..n {
        for k in 0..n - m {
            d[k] = (d[k + 1] - d[k]) / C64::new(0.0, x[k + m] - x[k]);
        }
    }
    d[0]
}

type Tri = [[C64; MAX_ORDER]; MAX_ORDER];

fn tri_mul(a: &Tri, b: &Tri, n: usize) -> Tri {
    let mut c = [[C64::new(0.0, 0.0); MAX_ORDER]; MAX_ORDER];
    for i in 0..n {
        for j in i..n {
            let mut s = C64::new(0.0, 0.0);
            for k in i..=j {
                s += a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    c
}

fn bidiagonal_dd(x: &[f64]) -> C64 {
    let n = x.len();
    let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut s = 0;
    while (xmax + 1.0) / f64::powi(2.0, s) > 0.5 {
        s += 1;
    }
    let scale = f64::powi(2.0, -s);
    let mut b: Tri = [[C64::new(0.0, 0.0); MAX_ORDER]; MAX_ORDER];
    for i in 0..n {
        b[i][i] = C64::new(0.0, x[i] * scale);
        if i + 1 < n {
            b[i][i + 1] = C64::new(scale, 0.0);
        }
    }
    let mut e: Tri = [[C64::new(0.0, 0.0); MAX_ORDER]; MAX_ORDER];
    let mut term: Tri = [[C64::new(0.0, 0.0); MAX_ORDER]; MAX_ORDER];
    for i in 0..n {
        e[i][i] = C64::new(1.0, 0.0);
        term[i][i] = C64::new(1.0, 0.0);
    }
    for k in 1..30 {
        term = tri_mul(&term, &b, n);
        let inv = 1.0 / k as f64;
        let mut mag = 0.0f64;
        for i in 0..n {
            for j in i..n {
                term[i][j] *= inv;
                e[i][j] += term[i][j];
                mag = mag.max(term[i][j].norm());
            }
        }
        if mag < 1e-20 {
            break;
        }
    }
    for _ in 0..s {
        e = tri_mul(&e, &e, n);
    }
    e[0][n - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::CompositeRule;

    /// Nested Gauss–Legendre evaluation of the iterated integral.
    fn nested(alphas: &[f64], upper: f64, rule: &CompositeRule) -> C64 {
        if alphas.is_empty() {
            return C64::new(1.0, 0.0);
        }
        let mut acc = C64::new(0.0, 0.0);
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let s = x * upper;
            acc += w * upper * C64::new(0.0, alphas[0] * s).exp() * nested(&alphas[1..], s, rule);
        }
        acc
    }

    #[test]
    fn first_order_closed_form() {
        for &a in &[0.0f64, 1e-9, 0.3, 7.0, -40.0] {
            let h = 0.37;
            let exact = if a.abs() < 1e-6 {
                C64::new(h, 0.5 * a * h * h)
            } else {
                (C64::new(0.0, a * h).exp() - 1.0) / C64::new(0.0, a)
            };
            assert!((chain(&[a], h) - exact).norm() < 1e-15);
        }
    }

    #[test]
    fn matches_nested_quadrature() {
        let rule = CompositeRule::new(24, 4);
        let cases: [&[f64]; 7] = [
            &[3.0, -3.0],
            &[0.0, 0.0, 0.0],
            &[50.0, -20.0, 1e-6],
            &[10.0, 0.0, -10.0],
            &[2.0, 2.5, -4.5],
            &[30.0, -30.0, 30.0],
            &[0.1, 0.2, 0.3],
        ];
        for alphas in cases {
            let h = 0.2;
            let got = chain(alphas, h);
            let want = nested(alphas, h, &rule);
            assert!((got - want).norm() < 1e-13, "{alphas:?}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_frequencies_give_simplex_volume() {
        let h: f64 = 0.7;
        for r in 1..5 {
            let z = vec![0.0; r];
            let fact: f64 = (1..=r).map(|k| k as f64).product();
            assert!((chain(&z, h) - h.powi(r as i32) / fact).norm() < 1e-15);
        }
    }

    #[test]
    fn cell_moments_closed_form() {
        let (a, h) = (3.0f64, 0.5f64);
        let e = C64::new(0.0, a * h).exp();
        let ia = C64::new(0.0, a);
        let m1 = h * e / ia - (e - 1.0) / (ia * ia);
        assert!((cell_moment(1, a, h) - m1).norm() < 1e-15);
    }

    #[test]
    fn branches_agree_near_threshold() {
        // Same integral evaluated on both sides of the separation switch.
        for &a in &[0.99, 1.0, 1.01, 1.5] {
            let x = [0.0, a, 2.0 * a];
            assert!((newton_dd(&x) - bidiagonal_dd(&x)).norm() < 1e-14);
        }
    }
}
