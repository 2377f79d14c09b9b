//! Exact finite-state nonlinear filter.
//!
//! With `h` in unit-noise form the Kushner-Stratonovich equation on the
//! simplex reads
//!
//! ```text
//! dπ(x) = (Aᵀπ)(x) dt + π(x) (h(x) - π(h))ᵀ (dZ - π(h) dt)
//! ```
//!
//! and is integrated by Euler-Maruyama followed by clipping at zero and
//! renormalization. Several priors are always advanced together against
//! one observation path so they see identical innovations.
//!
//! For noise-free observations `Z_t = h(X_t)` the filter is the level-set
//! filter: between level changes it follows the forward equation restricted
//! to the observed level (renormalized), and at a level change the mass is
//! moved along the generator's cross-level rates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::expm;
use crate::model::{HmmModel, ObservationMatrix, Simplex};
use crate::sim::{ObservationPath, StatePath};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrajectory {
    pub label: String,
    pub dt: f64,
    pub n_steps: usize,
    pub d: usize,
    /// Row-major `(n_steps + 1) × d`; row `k` is `π_{t_k}`.
    pub pis: Vec<f64>,
}

impl FilterTrajectory {
    pub fn at(&self, k: usize) -> &[f64] {
        &self.pis[k * self.d..(k + 1) * self.d]
    }

    pub fn last(&self) -> &[f64] {
        self.at(self.n_steps)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// Reusable Euler-Maruyama stepper for one model.
pub struct WonhamStepper<'a> {
    model: &'a HmmModel,
    d: usize,
    m: usize,
    inv_r: f64,
    drift: Vec<f64>,
    innovation: Vec<f64>,
    mean_h: Vec<f64>,
}

impl<'a> WonhamStepper<'a> {
    pub fn new(model: &'a HmmModel) -> Result<Self> {
        if model.is_noiseless() {
            return Err(Error::Noiseless("the Euler-Maruyama filter needs r > 0"));
        }
        let d = model.dim();
        let m = model.channels();
        Ok(WonhamStepper {
            model,
            d,
            m,
            inv_r: 1.0 / model.noise_std(),
            drift: vec![0.0; d],
            innovation: vec![0.0; m],
            mean_h: vec![0.0; m],
        })
    }

    /// Advances `pi` in place by one step with raw increment `dz`.
    /// Returns `false` when all mass is clipped away.
    pub fn step(&mut self, pi: &mut [f64], dz: &[f64], dt: f64) -> bool {
        let h = self.model.unit_observation();
        for j in 0..self.m {
            let mut s = 0.0;
            for x in 0..self.d {
                s += pi[x] * h.value(x, j);
            }
            self.mean_h[j] = s;
            self.innovation[j] = dz[j] * self.inv_r - s * dt;
        }
        self.model.generator().apply_adjoint(pi, &mut self.drift);
        let mut gain_sum = 0.0;
        for x in 0..self.d {
            let mut g = 0.0;
            for j in 0..self.m {
                g += (h.value(x, j) - self.mean_h[j]) * self.innovation[j];
            }
            g *= pi[x];
            gain_sum += g;
            pi[x] += dt * self.drift[x] + g;
        }
        debug_assert!(!gain_sum.is_finite() || gain_sum.abs() <= 1e-12 * (1.0 + self.innovation.iter().map(|v| v.abs()).sum::<f64>()));
        let mut total = 0.0;
        for v in pi.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
            total += *v;
        }
        if !(total > 0.0) {
            return false;
        }
        for v in pi.iter_mut() {
            *v /= total;
        }
        true
    }
}

/// One Euler-Maruyama step of the filter from `pi` with raw increment `dz`.
pub fn wonham_step(pi: &Simplex, dz: &[f64], dt: f64, model: &HmmModel) -> Result<Simplex> {
    let mut stepper = WonhamStepper::new(model)?;
    let mut next = pi.as_slice().to_vec();
    if !stepper.step(&mut next, dz, dt) {
        return Err(Error::DegenerateMass { step: 0 });
    }
    Ok(Simplex::normalized(next).expect("stepper output is on the simplex"))
}

/// Runs one filter per prior against `obs`, calling `visit(k, states)` at every
/// grid index `k = 0..=n_steps` with the filters at time `t_k`.
pub fn advance_filters<F>(priors: &[&Simplex], obs: &ObservationPath, model: &HmmModel, mut visit: F) -> Result<()>
where
    F: FnMut(usize, &[Vec<f64>]) -> Result<()>,
{
    check_priors(priors, model.dim())?;
    let mut stepper = WonhamStepper::new(model)?;
    let mut states: Vec<Vec<f64>> = priors.iter().map(|p| p.as_slice().to_vec()).collect();
    visit(0, &states)?;
    for k in 0..obs.n_steps {
        let dz = obs.increment(k);
        for s in states.iter_mut() {
            if !stepper.step(s, dz, obs.dt) {
                return Err(Error::DegenerateMass { step: k });
            }
        }
        visit(k + 1, &states)?;
    }
    Ok(())
}

fn check_priors(priors: &[&Simplex], d: usize) -> Result<()> {
    if let Some(p) = priors.iter().find(|p| p.dim() != d) {
        return Err(Error::DimensionMismatch(format!("prior has {} states, model {}", p.dim(), d)));
    }
    Ok(())
}

fn collect_trajectories<F>(labels: &[&str], n_steps: usize, dt: f64, d: usize, run: F) -> Result<Vec<FilterTrajectory>>
where
    F: FnOnce(&mut dyn FnMut(usize, &[Vec<f64>]) -> Result<()>) -> Result<()>,
{
    let mut out: Vec<FilterTrajectory> = labels
        .iter()
        .map(|l| FilterTrajectory {
            label: l.to_string(),
            dt,
            n_steps,
            d,
            pis: Vec::with_capacity((n_steps + 1) * d),
        })
        .collect();
    run(&mut |_, states| {
        for (t, s) in out.iter_mut().zip(states) {
            t.pis.extend_from_slice(s);
        }
        Ok(())
    })?;
    Ok(out)
}

/// Filters for several labelled priors over the same observation path.
pub fn run_filters(priors: &[(&str, &Simplex)], obs: &ObservationPath, model: &HmmModel) -> Result<Vec<FilterTrajectory>> {
    let labels: Vec<&str> = priors.iter().map(|(l, _)| *l).collect();
    let ps: Vec<&Simplex> = priors.iter().map(|(_, p)| *p).collect();
    collect_trajectories(&labels, obs.n_steps, obs.dt, model.dim(), |visit| {
        advance_filters(&ps, obs, model, visit)
    })
}

pub fn run_filter(prior: &Simplex, obs: &ObservationPath, model: &HmmModel) -> Result<FilterTrajectory> {
    Ok(run_filters(&[("prior", prior)], obs, model)?.remove(0))
}

/// Level-set filter for `Z_t = h(X_t)`.
pub struct LevelSetFilter {
    level_of: Vec<usize>,
    levels: Vec<Vec<usize>>,
    restricted: Vec<DMatrix<f64>>,
    step_propagator: Vec<DMatrix<f64>>,
    rates: DMatrix<f64>,
    dt: f64,
}

/// Two states share a level when their observation rows agree to this tolerance.
pub const LEVEL_TOL: f64 = 1e-12;

impl LevelSetFilter {
    pub fn new(model: &HmmModel, dt: f64) -> Self {
        let h = model.observation();
        let d = model.dim();
        let mut level_of = vec![usize::MAX; d];
        let mut levels: Vec<Vec<usize>> = Vec::new();
        for x in 0..d {
            if level_of[x] != usize::MAX {
                continue;
            }
            let id = levels.len();
            let members: Vec<usize> = (x..d)
                .filter(|&y| level_of[y] == usize::MAX && same_level(h, x, y))
                .collect();
            for &y in &members {
                level_of[y] = id;
            }
            levels.push(members);
        }
        let restricted: Vec<DMatrix<f64>> = levels.iter().map(|l| model.generator().restricted(l)).collect();
        let step_propagator = restricted.iter().map(|a| expm(&(a * dt)).transpose()).collect();
        LevelSetFilter {
            level_of,
            levels,
            restricted,
            step_propagator,
            rates: model.generator().matrix().clone(),
            dt,
        }
    }

    pub fn level_of(&self, x: usize) -> usize {
        self.level_of[x]
    }

    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    /// Conditions `prior` on the level observed at time 0.
    pub fn initialize(&self, prior: &Simplex, x0: usize) -> Result<Vec<f64>> {
        let level = self.level_of[x0];
        let mut pi: Vec<f64> = prior
            .as_slice()
            .iter()
            .enumerate()
            .map(|(x, p)| if self.level_of[x] == level { *p } else { 0.0 })
            .collect();
        normalize(&mut pi).ok_or(Error::EmptyLevelSet { time: 0.0 })?;
        Ok(pi)
    }

    fn evolve(&self, pi: &mut [f64], level: usize, tau: f64, full_step: bool) {
        if tau <= 0.0 {
            return;
        }
        let members = &self.levels[level];
        let local = DVector::from_iterator(members.len(), members.iter().map(|&x| pi[x]));
        let next = if full_step {
            &self.step_propagator[level] * local
        } else {
            expm(&(&self.restricted[level] * tau)).transpose() * local
        };
        for (i, &x) in members.iter().enumerate() {
            pi[x] = next[i];
        }
        // The restricted dynamics leak mass; only the conditional law matters.
        let _ = normalize(pi);
    }

    fn transfer(&self, pi: &mut [f64], to_level: usize, time: f64) -> Result<()> {
        let d = pi.len();
        let mut next = vec![0.0; d];
        for &y in &self.levels[to_level] {
            next[y] = (0..d)
                .filter(|&x| self.level_of[x] != to_level)
                .map(|x| pi[x] * self.rates[(x, y)])
                .sum();
        }
        normalize(&mut next).ok_or(Error::EmptyLevelSet { time })?;
        pi.copy_from_slice(&next);
        Ok(())
    }

    /// Runs the filter for every prior along `path`, visiting each grid index.
    pub fn run<F>(&self, priors: &[&Simplex], path: &StatePath, n_steps: usize, mut visit: F) -> Result<()>
    where
        F: FnMut(usize, &[Vec<f64>]) -> Result<()>,
    {
        let mut states: Vec<Vec<f64>> = priors
            .iter()
            .map(|p| self.initialize(p, path.x0))
            .collect::<Result<_>>()?;
        visit(0, &states)?;
        let mut level = self.level_of[path.x0];
        let mut next_jump = 0;
        for k in 0..n_steps {
            let mut t = k as f64 * self.dt;
            let end = if k + 1 == n_steps { path.horizon } else { (k + 1) as f64 * self.dt };
            let mut had_event = false;
            while next_jump < path.jump_times.len() && path.jump_times[next_jump] <= end {
                let s = path.jump_times[next_jump];
                let new_level = self.level_of[path.states[next_jump + 1]];
                next_jump += 1;
                if new_level == level {
                    continue;
                }
                for pi in states.iter_mut() {
                    self.evolve(pi, level, s - t, false);
                    self.transfer(pi, new_level, s)?;
                }
                t = s;
                level = new_level;
                had_event = true;
            }
            for pi in states.iter_mut() {
                self.evolve(pi, level, end - t, !had_event);
            }
            visit(k + 1, &states)?;
        }
        Ok(())
    }
}

fn same_level(h: &ObservationMatrix, x: usize, y: usize) -> bool {
    (0..h.channels()).all(|j| (h.value(x, j) - h.value(y, j)).abs() <= LEVEL_TOL)
}

fn normalize(p: &mut [f64]) -> Option<()> {
    let s: f64 = p.iter().sum();
    if !(s > 0.0) {
        return None;
    }
    p.iter_mut().for_each(|v| *v /= s);
    Some(())
}

/// Noise-free filter along the true state path; row 0 is the prior conditioned on `h(X_0)`.
pub fn run_exact_noiseless_filter(
    prior: &Simplex,
    path: &StatePath,
    model: &HmmModel,
    n_steps: usize,
    dt: f64,
) -> Result<FilterTrajectory> {
    let filter = LevelSetFilter::new(model, dt);
    Ok(collect_trajectories(&["prior"], n_steps, dt, model.dim(), |visit| {
        filter.run(&[prior], path, n_steps, visit)
    })?
    .remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalMoments {
    pub mean: f64,
    pub variance: f64,
    /// `V(f, g)` when a second function was supplied.
    pub covariance: Option<f64>,
}

/// `π(f)`, `V(f) = π(f²) - π(f)²` and optionally `V(f, g)`.
pub fn conditional_moments(pi: &[f64], f: &[f64], g: Option<&[f64]>) -> ConditionalMoments {
    let mean = expect(pi, f);
    let variance = covariance(pi, f, f);
    ConditionalMoments {
        mean,
        variance,
        covariance: g.map(|g| covariance(pi, f, g)),
    }
}

/// `V(f, g) = π((f - π(f))(g - π(g)))`, centered form for accuracy.
pub fn covariance(pi: &[f64], f: &[f64], g: &[f64]) -> f64 {
    let mf = expect(pi, f);
    let mg = expect(pi, g);
    pi.iter()
        .zip(f.iter().zip(g))
        .map(|(p, (a, b))| p * (a - mf) * (b - mg))
        .sum()
}

/// Componentwise `V(f, h_j)` over the observation channels.
pub fn covariance_with_channels(pi: &[f64], f: &[f64], h: &ObservationMatrix) -> Vec<f64> {
    (0..h.channels()).map(|j| covariance(pi, f, &h.channel(j))).collect()
}

pub fn expect(pi: &[f64], f: &[f64]) -> f64 {
    pi.iter().zip(f).map(|(p, v)| p * v).sum()
}
