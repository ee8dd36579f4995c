//! Trigonometric moment problems `∫₀ᵀ v(t) e^{iω_j t} dt = d_j` for real `v`.
//!
//! Controls are cell-constant, so each moment is an exact linear functional
//! `m_j(v) = Σ_n v_n W_jn` with `W_jn = ∫_cell e^{iω_j t} dt`. The minimal-L²
//! real solution is `v = R^T y / h`, where `R` stacks the real and imaginary
//! parts of `W` and `(R R^T / h + εI) y = d`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::phi1;
use crate::simulator::Control;
use crate::C64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("frequencies must be strictly increasing")]
    Unsorted,
    #[error("targets ({targets}) and frequencies ({freqs}) differ in length")]
    Length { targets: usize, freqs: usize },
    #[error("target for frequency 0 must be real, got imaginary part {0:e}")]
    ComplexZeroTarget(f64),
    #[error("moment residual {residual:e} above tolerance {tol:e}; Gram condition number {condition:e}")]
    IllConditioned { residual: f64, tol: f64, condition: f64 },
    #[error("Gram matrix singular at T = {t}: smallest eigenvalue {lambda_min:e}")]
    Unbounded { t: f64, lambda_min: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentProblem {
    pub frequencies: Vec<f64>,
    pub targets: Vec<C64>,
    pub t: f64,
    pub regularization: f64,
}

impl MomentProblem {
    pub fn new(frequencies: Vec<f64>, targets: Vec<C64>, t: f64) -> Self {
        Self { frequencies, targets, t, regularization: 1e-12 * t }
    }

    fn validate(&self) -> Result<(), MomentError> {
        if self.frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MomentError::Unsorted);
        }
        if self.targets.len() != self.frequencies.len() {
            return Err(MomentError::Length { targets: self.targets.len(), freqs: self.frequencies.len() });
        }
        for (w, d) in self.frequencies.iter().zip(&self.targets) {
            if *w == 0.0 && d.im.abs() > 1e-14 * (1.0 + d.re.abs()) {
                return Err(MomentError::ComplexZeroTarget(d.im));
            }
        }
        Ok(())
    }
}

/// Closed-form Gram matrix `G_jk = ∫₀ᵀ e^{i(ω_j−ω_k)t} dt`.
pub fn gram_matrix(frequencies: &[f64], t: f64) -> DMatrix<C64> {
    let n = frequencies.len();
    DMatrix::from_fn(n, n, |j, k| {
        if j == k {
            C64::new(t, 0.0)
        } else {
            t * phi1((frequencies[j] - frequencies[k]) * t)
        }
    })
}

/// Real constraint rows for the cell grid: `Re W_j` for every frequency and
/// `Im W_j` for the nonzero ones.
#[derive(Clone, Debug)]
pub struct MomentOperator {
    pub frequencies: Vec<f64>,
    pub cells: usize,
    pub step: f64,
    /// `(row, frequency index, is_imaginary)`.
    pub layout: Vec<(usize, bool)>,
    pub rows: DMatrix<f64>,
}

impl MomentOperator {
    pub fn new(frequencies: &[f64], cells: usize, step: f64) -> Self {
        let mut layout = Vec::new();
        for (j, w) in frequencies.iter().enumerate() {
            layout.push((j, false));
            if *w != 0.0 {
                layout.push((j, true));
            }
        }
        let mut rows = DMatrix::<f64>::zeros(layout.len(), cells);
        let mut r = 0;
        for &w in frequencies {
            let cell = step * phi1(w * step);
            for n in 0..cells {
                let z = cell * C64::from_polar(1.0, w * n as f64 * step);
                rows[(r, n)] = z.re;
                if w != 0.0 {
                    rows[(r + 1, n)] = z.im;
                }
            }
            r += if w != 0.0 { 2 } else { 1 };
        }
        Self { frequencies: frequencies.to_vec(), cells, step, layout, rows }
    }

    pub fn moments(&self, v: &Control) -> Vec<C64> {
        let raw = &self.rows * DVector::from_column_slice(&v.values);
        let mut out = vec![C64::new(0.0, 0.0); self.frequencies.len()];
        for (r, &(j, imag)) in self.layout.iter().enumerate() {
            if imag {
                out[j].im = raw[r];
            } else {
                out[j].re = raw[r];
            }
        }
        out
    }

    fn stack(&self, d: &[C64]) -> DVector<f64> {
        DVector::from_iterator(self.layout.len(), self.layout.iter().map(|&(j, imag)| if imag { d[j].im } else { d[j].re }))
    }

    /// Discrete Gram `R R^T / h`.
    pub fn gram(&self) -> DMatrix<f64> {
        (&self.rows * self.rows.transpose()) / self.step
    }
}

/// Solution record with conditioning diagnostics.
#[derive(Clone, Debug)]
pub struct MomentSolution {
    pub control: Control,
    pub residual: f64,
    pub condition: f64,
    pub multiplier_norm: f64,
}

/// Minimal-norm real solve on a grid of `cells` cells.
pub fn solve_moments(p: &MomentProblem, cells: usize) -> Result<MomentSolution, MomentError> {
    p.validate()?;
    let op = MomentOperator::new(&p.frequencies, cells, p.t / cells as f64);
    solve_with(&op, &p.targets, p.regularization, 1e-9)
}

pub(crate) fn solve_with(op: &MomentOperator, targets: &[C64], reg: f64, rel_tol: f64) -> Result<MomentSolution, MomentError> {
    let d = op.stack(targets);
    let dn = d.norm();
    if dn == 0.0 {
        return Ok(MomentSolution {
            control: Control::new(vec![0.0; op.cells], op.step),
            residual: 0.0,
            condition: 1.0,
            multiplier_norm: 0.0,
        });
    }
    let mut g = op.gram();
    let eig = SymmetricEigen::new(g.clone());
    let (lmin, lmax) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    let condition = lmax / lmin.max(f64::MIN_POSITIVE);
    for i in 0..g.nrows() {
        g[(i, i)] += reg;
    }
    let y = match g.clone().cholesky() {
        Some(ch) if lmin > 1e-13 * lmax => ch.solve(&d),
        _ => {
            let cut = 1e-13 * lmax;
            let coeffs = eig.eigenvectors.transpose() * &d;
            let scaled = DVector::from_iterator(
                coeffs.len(),
                coeffs.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| if *l > cut { c / (l + reg) } else { 0.0 }),
            );
            &eig.eigenvectors * scaled
        }
    };
    let v = op.rows.transpose() * &y / op.step;
    let control = Control::new(v.as_slice().to_vec(), op.step);
    let residual = (&op.rows * &v - &d).norm();
    let tol = rel_tol * dn.max(1e-300) + reg * y.norm();
    if residual > tol.max(1e-14) {
        return Err(MomentError::IllConditioned { residual, tol, condition });
    }
    Ok(MomentSolution { control, residual, condition, multiplier_norm: y.norm() })
}

/// Orthogonal projection of `v` onto the controls whose moments at
/// `frequencies` vanish.
pub fn project_vt(v: &Control, frequencies: &[f64]) -> Result<Control, MomentError> {
    let op = MomentOperator::new(frequencies, v.len(), v.step);
    project_with(&op, v)
}

pub(crate) fn project_with(op: &MomentOperator, v: &Control) -> Result<Control, MomentError> {
    let m = op.moments(v);
    let corr = solve_with(op, &m, 0.0, 1e-9)?;
    Ok(v.plus(&corr.control.scaled(-1.0)))
}

/// `C(T) = 1/λ_min(G)` over the first `n` frequencies.
pub fn ingham_constant(frequencies: &[f64], t: f64, n: usize) -> Result<f64, MomentError> {
    let f = &frequencies[..n.min(frequencies.len())];
    let g = gram_matrix(f, t);
    let eig = SymmetricEigen::new(g);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lmin <= 1e-14 * t {
        return Err(MomentError::Unbounded { t, lambda_min: lmin });
    }
    Ok(1.0 / lmin)
}

/// Smallest eigenpair of the Gram matrix with its residual `‖Ga − λa‖`.
pub fn gram_min_eigenpair(frequencies: &[f64], t: f64) -> (f64, DVector<C64>, f64) {
    let g = gram_matrix(frequencies, t);
    let eig = SymmetricEigen::new(g.clone());
    let (i, &l) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let a = eig.eigenvectors.column(i).into_owned();
    let res = (&g * &a - a.scale(l).map(|z| z)).norm();
    (l, a, res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral_core::omega_of;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn freqs(n: usize) -> Vec<f64> {
        (1..=n).map(omega_of).collect()
    }

    #[test]
    fn gram_examples() {
        let g = gram_matrix(&[0.0], 2.5);
        assert_eq!(g[(0, 0)], C64::new(2.5, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let mut f: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..200.0)).collect();
            f.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let g = gram_matrix(&f, 0.7);
            for j in 0..6 {
                assert_eq!(g[(j, j)].re, 0.7);
                for k in 0..6 {
                    assert!((g[(j, k)] - g[(k, j)].conj()).norm() < 1e-14);
                }
            }
            let eig = SymmetricEigen::new(g);
            assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
        }
    }

    #[test]
    fn zero_targets_zero_control() {
        let p = MomentProblem::new(freqs(5), vec![C64::new(0.0, 0.0); 5], 1.0);
        let s = solve_moments(&p, 200).unwrap();
        assert!(s.control.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn roundtrip_twelve_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = freqs(12);
        let mut d: Vec<C64> = (0..12).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        d[0].im = 0.0;
        let p = MomentProblem::new(f.clone(), d.clone(), 1.0);
        let s = solve_moments(&p, 4000).unwrap();
        for (w, dj) in f.iter().zip(&d) {
            assert!((s.control.moment(*w) - dj).norm() < 1e-8);
        }
    }

    #[test]
    fn norm_bound_from_gram() {
        let f = freqs(8);
        let mut d = vec![C64::new(0.0, 0.0); 8];
        d[0] = C64::new(1.0, 0.0);
        let p = MomentProblem::new(f.clone(), d, 1.0);
        let s = solve_moments(&p, 4000).unwrap();
        // ‖v‖² ≤ ‖d‖²/λ_min of the real doubled Gram, which is ≥ λ_min(G)/2.
        let c = ingham_constant(&f, 1.0, 8).unwrap();
        assert!(s.control.l2_norm() <= (2.0 * c).sqrt() * 1.0001);
    }

    #[test]
    fn projection_properties() {
        let f = freqs(6);
        let v = Control::from_fn(0.8, 400, |t| (omega_of(2) * t).cos() + 0.3 * t);
        let p = project_vt(&v, &f).unwrap();
        for w in &f {
            assert!(p.moment(*w).norm() < 1e-9);
        }
        let pp = project_vt(&p, &f).unwrap();
        let diff: f64 = pp.values.iter().zip(&p.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8);
    }

    #[test]
    fn ingham_examples() {
        assert!((ingham_constant(&[0.0], 2.0, 1).unwrap() - 0.5).abs() < 1e-15);
        let f = freqs(6);
        let mut prev = f64::INFINITY;
        for i in 1..=20 {
            let t = 0.1 * i as f64;
            let c = ingham_constant(&f, t, 6).unwrap();
            assert!(c <= prev * (1.0 + 1e-12));
            prev = c;
        }
        let (_, _, res) = gram_min_eigenpair(&f, 0.5);
        assert!(res < 1e-10);
    }

    #[test]
    fn complex_zero_target_rejected() {
        let p = MomentProblem::new(vec![0.0, 3.0], vec![C64::new(1.0, 0.5), C64::new(0.0, 0.0)], 1.0);
        assert!(matches!(solve_moments(&p, 10), Err(MomentError::ComplexZeroTarget(_))));
    }
}
