//! Finite-state HMM objects: generator, observation function, priors, and
//! the structural quantities derived from them.
//!
//! Functions on `S = {0, .., d-1}` are plain length-`d` vectors. The model
//! keeps both the raw observation matrix `H` and its unit-noise rescaling
//! `H / r`, so every filter formula downstream can be written for
//! `dZ = h(X) dt + dW`.
//!
//! Ergodicity is decided on the undirected transition graph. On a finite
//! state space `Γf(x) = Σ_y A(x,y)(f(x) - f(y))²` vanishes for every `x`
//! exactly when `f(x) = f(y)` along every edge with `A(x,y) > 0`, so
//! `Γf ≡ 0 ⟹ f constant` holds iff that graph is connected.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::orthogonalize;

/// Row sums above this are rejected; smaller ones are absorbed into the diagonal.
pub const ROW_SUM_TOL: f64 = 1e-9;
pub const SIMPLEX_TOL: f64 = 1e-10;
pub const NULLSPACE_TOL: f64 = 1e-9;
pub const OBSERVABLE_RANK_TOL: f64 = 1e-12;

/// Transition-rate matrix of the signal chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator(DMatrix<f64>);

impl Generator {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "generator is {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generator"));
        }
        let d = a.nrows();
        let mut a = a;
        for x in 0..d {
            let mut off = 0.0;
            for y in 0..d {
                if x != y {
                    let v = a[(x, y)];
                    if v < 0.0 {
                        return Err(Error::NegativeOffDiagonal { row: x, col: y, value: v });
                    }
                    off += v;
                }
            }
            let sum = off + a[(x, x)];
            if sum.abs() > ROW_SUM_TOL {
                return Err(Error::RowSumNonZero { row: x, sum });
            }
            a[(x, x)] = -off;
        }
        Ok(Generator(a))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("generator rows must have length d".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(DMatrix::from_row_slice(d, d, &flat))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    #[inline]
    pub fn rate(&self, x: usize, y: usize) -> f64 {
        self.0[(x, y)]
    }

    /// Total jump rate out of `x`.
    pub fn exit_rate(&self, x: usize) -> f64 {
        -self.0[(x, x)]
    }

    /// `(Af)(x) = Σ_y A(x,y) f(y)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|x| (0..d).map(|y| self.0[(x, y)] * f[y]).sum())
            .collect()
    }

    /// Forward (Kolmogorov) action on a measure: `(Aᵀp)(y) = Σ_x p(x) A(x,y)`.
    pub fn apply_adjoint(&self, p: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for y in 0..d {
            let mut s = 0.0;
            for x in 0..d {
                s += p[x] * self.0[(x, y)];
            }
            out[y] = s;
        }
    }

    pub fn apply_adjoint_vec(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply_adjoint(p, &mut out);
        out
    }

    pub fn scaled(&self, s: f64) -> Generator {
        Generator(&self.0 * s)
    }

    /// Generator restricted to `states`; only valid as a generator when the set is closed.
    pub fn restricted(&self, states: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(states.len(), states.len(), |i, j| self.0[(states[i], states[j])])
    }
}

/// Observation function as a d×m matrix; row `x` is `h(x)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix(DMatrix<f64>);

impl ObservationMatrix {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation matrix"));
        }
        Ok(ObservationMatrix(h))
    }

    /// Scalar observation, one value per state.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn channels(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    #[inline]
    pub fn value(&self, x: usize, j: usize) -> f64 {
        self.0[(x, j)]
    }

    pub fn row(&self, x: usize) -> Vec<f64> {
        self.0.row(x).iter().copied().collect()
    }

    pub fn channel(&self, j: usize) -> Vec<f64> {
        self.0.column(j).iter().copied().collect()
    }

    pub fn scaled(&self, s: f64) -> ObservationMatrix {
        ObservationMatrix(&self.0 * s)
    }

    /// Horizontal concatenation `[H | H']`.
    pub fn augmented(&self, other: &ObservationMatrix) -> Result<ObservationMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch("observation matrices differ in d".into()));
        }
        let m = self.channels() + other.channels();
        let h = DMatrix::from_fn(self.dim(), m, |x, j| {
            if j < self.channels() {
                self.0[(x, j)]
            } else {
                other.0[(x, j - self.channels())]
            }
        });
        ObservationMatrix::new(h)
    }
}

/// Probability vector on the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Simplex(Vec<f64>);

impl Simplex {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidSimplex("empty vector".into()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probability vector"));
        }
        if let Some(v) = p.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidSimplex(format!("negative entry {v}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidSimplex(format!("entries sum to {s}")));
        }
        Ok(Simplex(p))
    }

    /// Normalizes a nonnegative vector onto the simplex.
    pub fn normalized(mut p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidSimplex("entries must be finite and nonnegative".into()));
        }
        let s: f64 = p.iter().sum();
        if s <= 0.0 {
            return Err(Error::InvalidSimplex("zero total mass".into()));
        }
        p.iter_mut().for_each(|v| *v /= s);
        Ok(Simplex(p))
    }

    pub fn uniform(d: usize) -> Self {
        Simplex(vec![1.0 / d as f64; d])
    }

    pub fn point_mass(d: usize, x: usize) -> Self {
        let mut p = vec![0.0; d];
        p[x] = 1.0;
        Simplex(p)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `ρ(f) = Σ_x ρ(x) f(x)`.
    pub fn expect(&self, f: &[f64]) -> f64 {
        self.0.iter().zip(f).map(|(p, v)| p * v).sum()
    }

    /// `self ≪ other`: every state charged by `self` is charged by `other`.
    pub fn abs_continuous_wrt(&self, other: &Simplex) -> bool {
        self.0.iter().zip(&other.0).all(|(p, q)| *p <= 0.0 || *q > 0.0)
    }
}

impl TryFrom<Vec<f64>> for Simplex {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Simplex::new(v)
    }
}

impl From<Simplex> for Vec<f64> {
    fn from(s: Simplex) -> Vec<f64> {
        s.0
    }
}

impl std::ops::Index<usize> for Simplex {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Validated model `(A, h)` with observation noise standard deviation `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    generator: Generator,
    observation: ObservationMatrix,
    unit_observation: ObservationMatrix,
    noise_std: f64,
}

impl HmmModel {
    /// Builds a model with `r > 0`; a zero noise level must go through [`HmmModel::noiseless`].
    pub fn new(a: Generator, h: ObservationMatrix, r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::NonPositiveNoise(r));
        }
        Self::build(a, h, r)
    }

    /// Observation `Z_t = h(X_t)` without noise; only the level-set filter accepts it.
    pub fn noiseless(a: Generator, h: ObservationMatrix) -> Result<Self> {
        Self::build(a, h, 0.0)
    }

    fn build(a: Generator, h: ObservationMatrix, r: f64) -> Result<Self> {
        if a.dim() != h.dim() {
            return Err(Error::DimensionMismatch(format!(
                "generator has d = {}, observation has d = {}",
                a.dim(),
                h.dim()
            )));
        }
        let unit = if r > 0.0 { h.scaled(1.0 / r) } else { h.clone() };
        Ok(HmmModel {
            generator: a,
            observation: h,
            unit_observation: unit,
            noise_std: r,
        })
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn channels(&self) -> usize {
        self.observation.channels()
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    /// Raw observation function `h`.
    pub fn observation(&self) -> &ObservationMatrix {
        &self.observation
    }

    /// `h / r`, the observation in unit-noise form.
    pub fn unit_observation(&self) -> &ObservationMatrix {
        &self.unit_observation
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_std == 0.0
    }

    /// Same signal and observation function with a different noise level (`r = 0` allowed).
    pub fn with_noise(&self, r: f64) -> Result<HmmModel> {
        if r == 0.0 {
            HmmModel::noiseless(self.generator.clone(), self.observation.clone())
        } else {
            HmmModel::new(self.generator.clone(), self.observation.clone(), r)
        }
    }

    pub fn with_observation(&self, h: ObservationMatrix) -> Result<HmmModel> {
        Self::build(self.generator.clone(), h, self.noise_std)
    }
}

/// Validates raw matrices into a model; `r = 0` is accepted only with `allow_noiseless`.
pub fn validate_model(a: DMatrix<f64>, h: DMatrix<f64>, r: f64, allow_noiseless: bool) -> Result<HmmModel> {
    let a = Generator::new(a)?;
    let h = ObservationMatrix::new(h)?;
    if r == 0.0 && allow_noiseless {
        HmmModel::noiseless(a, h)
    } else {
        HmmModel::new(a, h, r)
    }
}

/// Carré du champ `(Γf)(x) = Σ_y A(x,y)(f(x) - f(y))²`.
pub fn carre_du_champ(a: &Generator, f: &[f64]) -> Vec<f64> {
    let d = a.dim();
    (0..d)
        .map(|x| {
            (0..d)
                .filter(|&y| y != x)
                .map(|y| {
                    let diff = f[x] - f[y];
                    a.rate(x, y) * diff * diff
                })
                .sum()
        })
        .collect()
}

/// Nullity of `Aᵀ` by singular values, relative to the largest rate.
pub fn invariant_nullity(a: &Generator) -> usize {
    let at = a.matrix().transpose();
    let scale = a.matrix().amax().max(1.0);
    let svd = at.svd(false, false);
    svd.singular_values.iter().filter(|s| **s <= NULLSPACE_TOL * scale).count()
}

/// The unique invariant probability measure, from the least-squares system `[Aᵀ; 1ᵀ] μ = [0; 1]`.
pub fn invariant_measure(a: &Generator) -> Result<Simplex> {
    let nullity = invariant_nullity(a);
    if nullity > 1 {
        return Err(Error::NonUniqueInvariantMeasure { nullity });
    }
    Ok(solve_stationary(a.matrix()))
}

/// One invariant measure, also when it is not unique: the equal-weight
/// mixture of the stationary laws of the closed communicating classes.
pub fn invariant_measure_any(a: &Generator) -> Simplex {
    let d = a.dim();
    let classes = closed_classes(a);
    let mut mu = vec![0.0; d];
    let w = 1.0 / classes.len() as f64;
    for class in &classes {
        let local = solve_stationary(&a.restricted(class));
        for (i, &x) in class.iter().enumerate() {
            mu[x] += w * local[i];
        }
    }
    Simplex::normalized(mu).expect("closed classes carry positive mass")
}

fn solve_stationary(a: &DMatrix<f64>) -> Simplex {
    let d = a.nrows();
    let mut sys = DMatrix::<f64>::zeros(d + 1, d);
    sys.view_mut((0, 0), (d, d)).copy_from(&a.transpose());
    sys.row_mut(d).fill(1.0);
    let mut rhs = DVector::<f64>::zeros(d + 1);
    rhs[d] = 1.0;
    let svd = sys.svd(true, true);
    let sol = svd.solve(&rhs, 1e-14).expect("svd solve with both factors");
    let clipped: Vec<f64> = sol.iter().map(|v| v.max(0.0)).collect();
    Simplex::normalized(clipped).expect("stationary solution has positive mass")
}

fn reachability(a: &Generator) -> Vec<Vec<bool>> {
    let d = a.dim();
    let mut reach = vec![vec![false; d]; d];
    for (s, row) in reach.iter_mut().enumerate() {
        let mut stack = vec![s];
        row[s] = true;
        while let Some(x) = stack.pop() {
            for y in 0..d {
                if y != x && a.rate(x, y) > 0.0 && !row[y] {
                    row[y] = true;
                    stack.push(y);
                }
            }
        }
    }
    reach
}

/// Closed communicating classes, each sorted, in order of their smallest state.
pub fn closed_classes(a: &Generator) -> Vec<Vec<usize>> {
    let d = a.dim();
    let reach = reachability(a);
    let mut seen = vec![false; d];
    let mut out = Vec::new();
    for x in 0..d {
        if seen[x] {
            continue;
        }
        let class: Vec<usize> = (0..d).filter(|&y| reach[x][y] && reach[y][x]).collect();
        let closed = (0..d).all(|y| !reach[x][y] || reach[y][x]);
        for &y in &class {
            seen[y] = true;
        }
        if closed {
            out.push(class);
        }
    }
    out
}

/// Connected components of the undirected graph with an edge wherever either rate is positive.
pub fn undirected_components(a: &Generator) -> Vec<Vec<usize>> {
    let d = a.dim();
    let mut label = vec![usize::MAX; d];
    let mut comps = Vec::new();
    for s in 0..d {
        if label[s] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = vec![];
        let mut stack = vec![s];
        label[s] = id;
        while let Some(x) = stack.pop() {
            comp.push(x);
            for y in 0..d {
                if label[y] == usize::MAX && (a.rate(x, y) > 0.0 || a.rate(y, x) > 0.0) {
                    label[y] = id;
                    stack.push(y);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// `Γf = 0 everywhere ⟹ f constant`, decided by graph connectivity.
pub fn is_ergodic(a: &Generator) -> bool {
    undirected_components(a).len() == 1
}

/// Orthonormal basis of a subspace of ℝ^d.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    pub vectors: Vec<Vec<f64>>,
}

impl SubspaceBasis {
    pub fn dim(&self) -> usize {
        self.vectors.len()
    }
}

/// Smallest subspace containing `1` and closed under `g ↦ Ag` and `g ↦ g∘h_j`.
pub fn observable_space(a: &Generator, h: &ObservationMatrix) -> SubspaceBasis {
    let d = a.dim();
    let mut basis: Vec<DVector<f64>> = vec![DVector::from_element(d, 1.0 / (d as f64).sqrt())];
    let channels: Vec<DVector<f64>> = (0..h.channels())
        .map(|j| DVector::from_vec(h.channel(j)))
        .collect();
    let amat = a.matrix();
    loop {
        let before = basis.len();
        let snapshot = basis.clone();
        for g in &snapshot {
            let mut candidates = vec![amat * g];
            candidates.extend(channels.iter().map(|hj| g.component_mul(hj)));
            for c in candidates {
                if basis.len() == d {
                    break;
                }
                let n = c.norm();
                if n == 0.0 {
                    continue;
                }
                let r = orthogonalize(&(c / n), &basis);
                let nr = r.norm();
                if nr > OBSERVABLE_RANK_TOL {
                    basis.push(r / nr);
                }
            }
        }
        if basis.len() == before || basis.len() == d {
            break;
        }
    }
    SubspaceBasis {
        vectors: basis.into_iter().map(|v| v.iter().copied().collect()).collect(),
    }
}

/// Closed-form lower bounds on the exponential stability rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    /// `min_{i≠j} √(A(i,j) A(j,i))`
    pub pairwise: f64,
    /// `Σ_i μ̄(i) min_{j≠i} A(i,j)`
    pub invariant_weighted: f64,
    /// `Σ_j min_{i≠j} A(i,j)`
    pub column_minimum: f64,
}

pub fn rate_bounds(a: &Generator, mu_bar: &Simplex) -> RateBounds {
    let d = a.dim();
    if d < 2 {
        return RateBounds {
            pairwise: 0.0,
            invariant_weighted: 0.0,
            column_minimum: 0.0,
        };
    }
    let mut pairwise = f64::INFINITY;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                pairwise = pairwise.min((a.rate(i, j) * a.rate(j, i)).sqrt());
            }
        }
    }
    let invariant_weighted = (0..d)
        .map(|i| {
            let m = (0..d).filter(|&j| j != i).map(|j| a.rate(i, j)).fold(f64::INFINITY, f64::min);
            mu_bar[i] * m
        })
        .sum();
    let column_minimum = (0..d)
        .map(|j| (0..d).filter(|&i| i != j).map(|i| a.rate(i, j)).fold(f64::INFINITY, f64::min))
        .sum();
    RateBounds {
        pairwise,
        invariant_weighted,
        column_minimum,
    }
}

/// Small-noise limits `(u1, u2)` bounding `r² γ̄` from above by `-u1` and `-u2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallNoiseBounds {
    pub nearest_level: f64,
    pub all_pairs: f64,
}

/// Uses the raw observation `h` (not rescaled by `r`).
pub fn nonergodic_limit_bounds(h: &ObservationMatrix, mu_bar: &Simplex) -> SmallNoiseBounds {
    let d = h.dim();
    let dist2 = |i: usize, j: usize| -> f64 {
        (0..h.channels())
            .map(|c| {
                let v = h.value(i, c) - h.value(j, c);
                v * v
            })
            .sum()
    };
    let mut u1 = 0.0;
    let mut u2 = 0.0;
    for i in 0..d {
        let mut nearest = f64::INFINITY;
        for j in 0..d {
            let v = dist2(i, j);
            u2 += mu_bar[i] * v;
            if j != i {
                nearest = nearest.min(v);
            }
        }
        if nearest.is_finite() {
            u1 += mu_bar[i] * nearest;
        }
    }
    SmallNoiseBounds {
        nearest_level: 0.5 * u1,
        all_pairs: 0.5 * u2,
    }
}

/// Generator of the four-state cycle `1→2→3→4→1` with unit rates.
pub fn cyclic_generator() -> Generator {
    Generator::from_rows(&[
        &[-1.0, 1.0, 0.0, 0.0],
        &[0.0, -1.0, 1.0, 0.0],
        &[0.0, 0.0, -1.0, 1.0],
        &[1.0, 0.0, 0.0, -1.0],
    ])
    .expect("static generator")
}

/// Two disconnected two-state blocks with rates 1 and 2.
pub fn block_generator() -> Generator {
    Generator::from_rows(&[
        &[-1.0, 1.0, 0.0, 0.0],
        &[2.0, -2.0, 0.0, 0.0],
        &[0.0, 0.0, -1.0, 1.0],
        &[0.0, 0.0, 2.0, -2.0],
    ])
    .expect("static generator")
}

pub fn two_state_generator(l12: f64, l21: f64) -> Generator {
    Generator::from_rows(&[&[-l12, l12], &[l21, -l21]]).expect("two-state rates are nonnegative")
}
