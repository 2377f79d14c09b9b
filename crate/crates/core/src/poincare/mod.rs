//! Poincaré constants as generalized symmetric eigenproblems.
//!
//! For a distribution `ρ` the constant is
//!
//! ```text
//! c(ρ) = inf { ρ(Γf) / V^ρ(f) : f ∈ ℝ^d, V^ρ(f) > 0 }
//! ```
//!
//! `ρ(Γf) = fᵀ M f` with `M` assembled from the rates weighted by `ρ`, and
//! `V^ρ(f) = fᵀ C f` with `C = diag(ρ) - ρρᵀ`. Only states in `supp(ρ)` enter
//! the variance; values of `f` off the support still enter `ρ(Γf)` through
//! rates leaving the support, and are minimized out exactly (Schur
//! complement of `M`). The remaining problem lives on the ρ-mean-zero
//! subspace of the support, where `C` is positive definite and is whitened
//! by its inverse square root.

mod jacobi;

pub use jacobi::{symmetric_eigensolver, SymmetricEigen};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterTrajectory;
use crate::linalg::complement_basis;
use crate::model::{Generator, Simplex};

/// States with mass below this are outside `supp(ρ)`.
pub const SUPPORT_TOL: f64 = 1e-12;
/// Smallest admissible eigenvalue of the restricted variance form.
pub const VARIANCE_FORM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiResult {
    pub constant: f64,
    /// `f*` with `ρ(f*) = 0`, `V^ρ(f*) = 1` and `ρ(Γf*) = constant`.
    pub minimizer: Vec<f64>,
    pub support: Vec<usize>,
}

/// Matrix `M` of the quadratic form `f ↦ Σ_x ρ(x) Σ_y A(x,y)(f(x) - f(y))²`.
pub fn energy_form(a: &Generator, rho: &[f64]) -> DMatrix<f64> {
    let d = a.dim();
    let mut m = DMatrix::<f64>::zeros(d, d);
    for x in 0..d {
        for y in 0..d {
            if x == y {
                continue;
            }
            let w = rho[x] * a.rate(x, y);
            if w == 0.0 {
                continue;
            }
            m[(x, x)] += w;
            m[(y, y)] += w;
            m[(x, y)] -= w;
            m[(y, x)] -= w;
        }
    }
    (&m + m.transpose()) * 0.5
}

fn pseudo_inverse(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let e = symmetric_eigensolver(s)?;
    let cut = 1e-12 * e.values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut out = DMatrix::<f64>::zeros(n, n);
    for (i, &lam) in e.values.iter().enumerate() {
        if lam.abs() > cut {
            let v = e.vectors.column(i);
            out += (v * v.transpose()) / lam;
        }
    }
    Ok(out)
}

/// Largest `c` with `ρ(Γf) ≥ c V^ρ(f)` for all `f`, and a minimizer.
pub fn conditional_pi_constant(a: &Generator, rho: &Simplex) -> Result<PiResult> {
    let d = a.dim();
    if rho.dim() != d {
        return Err(Error::DimensionMismatch(format!("ρ has {} states, generator {}", rho.dim(), d)));
    }
    let support: Vec<usize> = (0..d).filter(|&x| rho[x] >= SUPPORT_TOL).collect();
    let off: Vec<usize> = (0..d).filter(|&x| rho[x] < SUPPORT_TOL).collect();
    let n = support.len();
    if n < 2 {
        return Err(Error::DegenerateVarianceForm { support: n });
    }
    let m_full = energy_form(a, rho.as_slice());
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| m_full[(rows[i], cols[j])]);
    let m_ss = pick(&support, &support);
    let m_so = pick(&support, &off);
    let m_oo_pinv = pseudo_inverse(&pick(&off, &off))?;
    let schur = if off.is_empty() {
        m_ss
    } else {
        let s = &m_ss - &m_so * &m_oo_pinv * m_so.transpose();
        (&s + s.transpose()) * 0.5
    };

    let mass: f64 = support.iter().map(|&x| rho[x]).sum();
    let r = DVector::from_iterator(n, support.iter().map(|&x| rho[x] / mass));
    let c = DMatrix::from_diagonal(&r) - &r * r.transpose();
    let basis = complement_basis(&r);
    let k = basis.transpose() * &c * &basis;
    let ke = symmetric_eigensolver(&((&k + k.transpose()) * 0.5))?;
    if ke.values[0] <= VARIANCE_FORM_TOL {
        return Err(Error::DegenerateVarianceForm { support: n });
    }
    let inv_sqrt = &ke.vectors
        * DMatrix::from_diagonal(&DVector::from_iterator(n - 1, ke.values.iter().map(|v| 1.0 / v.sqrt())))
        * ke.vectors.transpose();
    let w = &inv_sqrt * basis.transpose() * &schur * &basis * &inv_sqrt;
    let we = symmetric_eigensolver(&((&w + w.transpose()) * 0.5))?;
    let f_s = &basis * &inv_sqrt * we.vectors.column(0);

    let mut minimizer = vec![0.0; d];
    for (i, &x) in support.iter().enumerate() {
        minimizer[x] = f_s[i];
    }
    if !off.is_empty() {
        let f_o = -(&m_oo_pinv * m_so.transpose() * &f_s);
        for (i, &x) in off.iter().enumerate() {
            minimizer[x] = f_o[i];
        }
    }
    Ok(PiResult {
        constant: we.values[0],
        minimizer,
        support,
    })
}

/// Classical constant `inf μ̄(Γf) / var^μ̄(f)` for an invariant measure `μ̄`.
pub fn classical_pi_constant(a: &Generator, mu_bar: &Simplex) -> Result<PiResult> {
    conditional_pi_constant(a, mu_bar)
}

/// `c(ρ)`, with `+∞` when `ρ` carries no nonconstant variance direction.
pub fn conditional_pi_value(a: &Generator, rho: &Simplex) -> f64 {
    match conditional_pi_constant(a, rho) {
        Ok(r) => r.constant,
        Err(_) => f64::INFINITY,
    }
}

/// Smallest conditional constant met along a set of filter trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiInfimum {
    /// `+∞` when every evaluated state was degenerate.
    pub c_inf: f64,
    pub trajectory: usize,
    pub time_index: usize,
    pub time: f64,
    pub evaluations: usize,
}

impl PiInfimum {
    pub fn empty() -> Self {
        PiInfimum {
            c_inf: f64::INFINITY,
            trajectory: 0,
            time_index: 0,
            time: 0.0,
            evaluations: 0,
        }
    }

    pub fn observe(&mut self, a: &Generator, pi: &[f64], trajectory: usize, time_index: usize, time: f64) {
        self.evaluations += 1;
        let Ok(rho) = Simplex::normalized(pi.to_vec()) else {
            return;
        };
        let c = conditional_pi_value(a, &rho);
        if c < self.c_inf {
            *self = PiInfimum {
                c_inf: c,
                trajectory,
                time_index,
                time,
                evaluations: self.evaluations,
            };
        }
    }

    /// Combines two partial sweeps; ties keep the earlier location.
    pub fn merge(self, other: PiInfimum) -> PiInfimum {
        let evaluations = self.evaluations + other.evaluations;
        let best = if other.c_inf < self.c_inf { other } else { self };
        PiInfimum { evaluations, ..best }
    }
}

/// Evaluates `c(π_t)` at every `stride`-th grid point of every trajectory.
pub fn trajectory_pi_infimum(a: &Generator, trajectories: &[FilterTrajectory], stride: usize) -> PiInfimum {
    let stride = stride.max(1);
    let mut inf = PiInfimum::empty();
    for (i, traj) in trajectories.iter().enumerate() {
        for k in (0..=traj.n_steps).step_by(stride) {
            inf.observe(a, traj.at(k), i, k, traj.time(k));
        }
    }
    inf
}
