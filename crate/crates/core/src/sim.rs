//! Signal and observation sampling.
//!
//! Every random draw comes from a [`RngStream`], a ChaCha8 generator keyed by
//! `(master_seed, stream_id)`. ChaCha exposes 2^64 independent streams per
//! key, so path `i` of an ensemble always sees the same draws no matter how
//! paths are scheduled across workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Generator, HmmModel, ObservationMatrix, Simplex};

/// Tolerance for `dt` dividing the horizon.
pub const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

pub fn spawn_rng(master_seed: u64, stream_id: u64) -> RngStream {
    RngStream { master_seed, stream_id }
}

/// Right-continuous piecewise-constant trajectory of the signal on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub x0: usize,
    pub horizon: f64,
    /// Strictly increasing jump times in `(0, T]`.
    pub jump_times: Vec<f64>,
    /// `states[0] = x0`; `states[i + 1]` is occupied from `jump_times[i]` on.
    pub states: Vec<usize>,
}

impl StatePath {
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        self.states[k]
    }

    pub fn final_state(&self) -> usize {
        *self.states.last().expect("path has at least one state")
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Time spent in each state over `[0, T]`.
    pub fn occupation(&self, d: usize) -> Vec<f64> {
        let mut occ = vec![0.0; d];
        let mut t = 0.0;
        for (i, &s) in self.jump_times.iter().enumerate() {
            occ[self.states[i]] += s - t;
            t = s;
        }
        occ[self.final_state()] += self.horizon - t;
        occ
    }

    /// `∫_0^T h(X_s) ds` for every channel, integrated segment by segment.
    pub fn integral(&self, h: &ObservationMatrix) -> Vec<f64> {
        let occ = self.occupation(h.dim());
        (0..h.channels())
            .map(|j| occ.iter().enumerate().map(|(x, o)| o * h.value(x, j)).sum())
            .collect()
    }
}

/// Observation increments `ΔZ_k` on the uniform grid `t_k = k dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub dt: f64,
    pub n_steps: usize,
    pub channels: usize,
    /// Row-major `n_steps × channels`.
    pub increments: Vec<f64>,
}

impl ObservationPath {
    #[inline]
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.channels..(k + 1) * self.channels]
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// Number of grid steps for `(horizon, dt)`, and the exact step `horizon / n`.
pub fn grid(horizon: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::GridMismatch { horizon, dt });
    }
    let n = (horizon / dt).round();
    if n < 1.0 || (n * dt - horizon).abs() > GRID_TOL {
        return Err(Error::GridMismatch { horizon, dt });
    }
    let n = n as usize;
    Ok((n, horizon / n as f64))
}

/// Exact draw from a categorical law.
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in p.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn sample_initial_state<R: Rng + ?Sized>(prior: &Simplex, rng: &mut R) -> usize {
    sample_categorical(prior.as_slice(), rng)
}

/// Gillespie sampling on `[0, T]`; states with zero exit rate are absorbing.
pub fn sample_ctmc_path<R: Rng + ?Sized>(a: &Generator, x0: usize, horizon: f64, rng: &mut R) -> StatePath {
    let d = a.dim();
    let mut jump_times = Vec::new();
    let mut states = vec![x0];
    let mut t = 0.0;
    let mut x = x0;
    let mut weights = vec![0.0; d];
    loop {
        let rate = a.exit_rate(x);
        if rate <= 0.0 {
            break;
        }
        // Inverse CDF with U in (0, 1].
        let u = 1.0 - rng.random::<f64>();
        t += -u.ln() / rate;
        if t > horizon {
            break;
        }
        for (y, w) in weights.iter_mut().enumerate() {
            *w = if y == x { 0.0 } else { a.rate(x, y) };
        }
        x = sample_categorical(&weights, rng);
        jump_times.push(t);
        states.push(x);
    }
    StatePath {
        x0,
        horizon,
        jump_times,
        states,
    }
}

/// Drift part `∫_{t_k}^{t_{k+1}} h(X_s) ds` of each increment, split at jump times.
///
/// A jump falling exactly on a grid point is handled in the step that ends there.
pub fn observation_drift(path: &StatePath, h: &ObservationMatrix, n_steps: usize, dt: f64) -> Vec<f64> {
    let m = h.channels();
    let mut out = vec![0.0; n_steps * m];
    let mut next = 0;
    let mut state = path.x0;
    for k in 0..n_steps {
        let mut t = k as f64 * dt;
        let end = if k + 1 == n_steps { path.horizon } else { (k + 1) as f64 * dt };
        let row = &mut out[k * m..(k + 1) * m];
        while next < path.jump_times.len() && path.jump_times[next] <= end {
            let s = path.jump_times[next];
            for (j, r) in row.iter_mut().enumerate() {
                *r += h.value(state, j) * (s - t);
            }
            t = s;
            state = path.states[next + 1];
            next += 1;
        }
        for (j, r) in row.iter_mut().enumerate() {
            *r += h.value(state, j) * (end - t);
        }
    }
    out
}

/// `ΔZ_k = ∫ h(X_s) ds + r √dt ξ_k` with the raw observation function and noise level.
pub fn integrate_observation<R: Rng + ?Sized>(
    path: &StatePath,
    model: &HmmModel,
    dt: f64,
    rng: &mut R,
) -> Result<ObservationPath> {
    let (n_steps, dt) = grid(path.horizon, dt)?;
    let mut increments = observation_drift(path, model.observation(), n_steps, dt);
    let r = model.noise_std();
    if r > 0.0 {
        let scale = r * dt.sqrt();
        for v in increments.iter_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *v += scale * xi;
        }
    }
    Ok(ObservationPath {
        dt,
        n_steps,
        channels: model.channels(),
        increments,
    })
}

/// One sample of `(X, Z)` under `P^prior`, drawn entirely from `stream`.
pub fn simulate(
    model: &HmmModel,
    prior: &Simplex,
    horizon: f64,
    dt: f64,
    stream: RngStream,
) -> Result<(StatePath, ObservationPath)> {
    let mut rng = stream.rng();
    let x0 = sample_initial_state(prior, &mut rng);
    simulate_from(model, x0, horizon, dt, &mut rng)
}

pub fn simulate_from<R: Rng + ?Sized>(
    model: &HmmModel,
    x0: usize,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<(StatePath, ObservationPath)> {
    let path = sample_ctmc_path(model.generator(), x0, horizon, rng);
    let obs = integrate_observation(&path, model, dt, rng)?;
    Ok((path, obs))
}
