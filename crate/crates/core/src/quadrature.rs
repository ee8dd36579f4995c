//! Composite Gauss–Legendre rules on [0,1] and trigonometric moments of profiles.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

/// Composite rule: `panels` equal subintervals of [0,1], `order` nodes each.
#[derive(Clone, Debug)]
pub struct CompositeRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub order: usize,
    pub panels: usize,
}

impl CompositeRule {
    pub fn new(order: usize, panels: usize) -> Self {
        let order = order.max(1);
        let panels = panels.max(1);
        let rule = GaussLegendre::new(NonZeroUsize::new(order).unwrap());
        let width = 1.0 / panels as f64;
        let mut nodes = Vec::with_capacity(order * panels);
        let mut weights = Vec::with_capacity(order * panels);
        for p in 0..panels {
            let a = p as f64 * width;
            for &(x, w) in rule.as_node_weight_pairs() {
                nodes.push(a + 0.5 * width * (x + 1.0));
                weights.push(0.5 * width * w);
            }
        }
        Self { nodes, weights, order, panels }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// `∫₀¹ f(x) cos(mπx) dx` for `m = 0..=m_max`, using a cosine recurrence per node.
    pub fn cosine_moments(&self, f: impl Fn(f64) -> f64, m_max: usize) -> Vec<f64> {
        self.trig_moments(f, m_max).0
    }

    /// Cosine and sine moments `∫₀¹ f(x) cos(mπx)`, `∫₀¹ f(x) sin(mπx)` for `m = 0..=m_max`.
    pub fn trig_moments(&self, f: impl Fn(f64) -> f64, m_max: usize) -> (Vec<f64>, Vec<f64>) {
        let mut c = vec![0.0; m_max + 1];
        let mut s = vec![0.0; m_max + 1];
        // Chunked restart of the angle-addition recurrence keeps rounding drift below 1e-15.
        const RESTART: usize = 64;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let fw = f(x) * w;
            let (s1, c1) = (PI * x).sin_cos();
            let mut m = 0;
            while m <= m_max {
                let (mut sm, mut cm) = (m as f64 * PI * x).sin_cos();
                let end = (m + RESTART).min(m_max + 1);
                for k in m..end {
                    c[k] += fw * cm;
                    s[k] += fw * sm;
                    let cn = cm * c1 - sm * s1;
                    sm = sm * c1 + cm * s1;
                    cm = cn;
                }
                m = end;
            }
        }
        (c, s)
    }
}

/// Panel count that resolves `cos(mπx)` up to `m_max` with a 64-node rule.
pub fn panels_for(m_max: usize, min_panels: usize) -> usize {
    let need = m_max.div_ceil(16).max(1);
    need.next_power_of_two().max(min_panels)
}

/// Trig moments with a doubling check: the panel count is doubled until two
/// successive rules agree to `tol` (absolute) or `max_panels` is exceeded.
pub fn converged_trig_moments(
    f: &dyn Fn(f64) -> f64,
    m_max: usize,
    order: usize,
    min_panels: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>), usize> {
    let mut panels = panels_for(m_max, min_panels);
    let max_panels = 1 << 16;
    let mut prev = CompositeRule::new(order, panels).trig_moments(f, m_max);
    loop {
        panels *= 2;
        if panels > max_panels {
            return Err(panels / 2);
        }
        let next = CompositeRule::new(order, panels).trig_moments(f, m_max);
        let diff = prev
            .0
            .iter()
            .zip(&next.0)
            .chain(prev.1.iter().zip(&next.1))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if diff <= tol {
            return Ok(next);
        }
        prev = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exactness() {
        let rule = CompositeRule::new(8, 3);
        let v = rule.integrate(|x| x.powi(9));
        assert!((v - 0.1).abs() < 1e-15);
    }

    #[test]
    fn moments_match_closed_form() {
        // ∫ x cos(mπx) = ((-1)^m - 1)/(mπ)^2 for m ≥ 1
        let rule = CompositeRule::new(64, 16);
        let c = rule.cosine_moments(|x| x, 200);
        assert!((c[0] - 0.5).abs() < 1e-15);
        for m in 1..=200usize {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            let exact = (sign - 1.0) / (m as f64 * PI).powi(2);
            assert!((c[m] - exact).abs() < 1e-14, "m={m}");
        }
    }

    #[test]
    fn sine_moments_match_closed_form() {
        // ∫ sin(mπx) = (1 - (-1)^m)/(mπ)
        let rule = CompositeRule::new(64, 8);
        let (_, s) = rule.trig_moments(|_| 1.0, 120);
        for m in 1..=120usize {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            let exact = (1.0 - sign) / (m as f64 * PI);
            assert!((s[m] - exact).abs() < 1e-14);
        }
    }
}
