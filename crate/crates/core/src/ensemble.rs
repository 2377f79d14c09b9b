//! Monte Carlo ensembles of filter pairs.
//!
//! Path `i` of an ensemble draws `X_0` from the true prior `μ` and then the
//! signal and observation from its own [`RngStream`], so results do not
//! depend on how paths are spread over workers. Per-path records are
//! collected in path order and reduced with pairwise summation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{aggregate, chi2_drift_terms, divergences, DivergenceSeries, Estimate, PathSeries};
use crate::error::{Error, Result};
use crate::filter::{advance_filters, expect, FilterTrajectory, LevelSetFilter};
use crate::model::{HmmModel, Simplex};
use crate::poincare::PiInfimum;
use crate::sim::{grid, sample_initial_state, simulate_from, ObservationPath, RngStream, StatePath};

/// Stream-id domains, so different experiments never share draws.
pub mod domain {
    pub const ENSEMBLE: u64 = 1;
    pub const BACKWARD_PLAIN: u64 = 2;
    pub const BACKWARD_RB: u64 = 3;
    pub const DIAGNOSTICS: u64 = 4;
    pub const VERIFY: u64 = 5;
}

/// `domain` in the top 16 bits, `group` in the next 16, `index` in the low 32.
pub fn stream_id(domain: u64, group: u64, index: u64) -> u64 {
    (domain << 48) | ((group & 0xffff) << 32) | (index & 0xffff_ffff)
}

/// Maps `f` over `0..n` on a pool of `workers` threads (0 = all cores), keeping index order.
pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(|| (0..n).into_par_iter().map(|i| f(i).map_err(|e| e.in_path(i))).collect())
}

#[derive(Debug, Clone)]
pub struct EnsembleSpec<'a> {
    pub model: &'a HmmModel,
    pub mu: &'a Simplex,
    pub nu: &'a Simplex,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    /// Divergences are recorded every `record_every` grid steps.
    pub record_every: usize,
    pub seed: u64,
    /// Distinguishes ensembles of one run (sweep index).
    pub group: u64,
    pub workers: usize,
    /// Integrate the χ² drift along each path.
    pub track_dynamics: bool,
    /// Evaluate conditional Poincaré constants at the record times.
    pub track_poincare: bool,
}

/// Everything kept from one path, at the record times.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub x0: usize,
    pub series: PathSeries,
    /// `½ ∫_0^t |π^μ(h) - π^ν(h)|² ds` in unit-noise form; empty when noise-free.
    pub clark: Vec<f64>,
    /// `∫_0^t drift ds` of the χ² process; empty unless tracked.
    pub drift_integral: Vec<f64>,
    pub pi_infimum: PiInfimum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub series: DivergenceSeries,
    /// Mean of `KL_t + ½∫|π^μ(h) - π^ν(h)|²`, bounded by `D(μ|ν)`.
    pub clark: Option<Vec<Estimate>>,
    /// Mean of `χ²_t - χ²_0 - ∫ drift`, which has zero expectation.
    pub dynamics_residual: Option<Vec<Estimate>>,
    /// Mean of `KL_{t_{k+1}} - KL_{t_k}` with paired standard errors.
    pub kl_increments: Vec<Estimate>,
    pub pi_infimum: PiInfimum,
}

impl<'a> EnsembleSpec<'a> {
    pub fn stream(&self, path: usize) -> RngStream {
        RngStream {
            master_seed: self.seed,
            stream_id: stream_id(domain::ENSEMBLE, self.group, path as u64),
        }
    }

    fn validate(&self) -> Result<usize> {
        let d = self.model.dim();
        if self.mu.dim() != d || self.nu.dim() != d {
            return Err(Error::DimensionMismatch(format!("priors must have {d} states")));
        }
        if !self.mu.abs_continuous_wrt(self.nu) {
            return Err(Error::config("mu", "mu is not absolutely continuous with respect to nu"));
        }
        if self.n_paths == 0 {
            return Err(Error::config("n_paths", "must be positive"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_dt", "must be at least one grid step"));
        }
        let (n, _) = grid(self.horizon, self.dt)?;
        Ok(n)
    }

    /// Signal and observation of path `i`.
    pub fn sample(&self, i: usize) -> Result<(StatePath, ObservationPath)> {
        let mut rng = self.stream(i).rng();
        let x0 = sample_initial_state(self.mu, &mut rng);
        simulate_from(self.model, x0, self.horizon, self.dt, &mut rng)
    }

    /// Filters from `μ` and `ν` along path `i`, at full grid resolution.
    pub fn trajectories(&self, i: usize) -> Result<(StatePath, ObservationPath, Vec<FilterTrajectory>)> {
        let (path, obs) = self.sample(i)?;
        let mut out: Vec<FilterTrajectory> = ["mu", "nu"]
            .iter()
            .map(|l| FilterTrajectory {
                label: l.to_string(),
                dt: obs.dt,
                n_steps: obs.n_steps,
                d: self.model.dim(),
                pis: Vec::with_capacity((obs.n_steps + 1) * self.model.dim()),
            })
            .collect();
        let visit = |_: usize, states: &[Vec<f64>]| {
            for (t, s) in out.iter_mut().zip(states) {
                t.pis.extend_from_slice(s);
            }
            Ok(())
        };
        if self.model.is_noiseless() {
            LevelSetFilter::new(self.model, obs.dt).run(&[self.mu, self.nu], &path, obs.n_steps, visit)?;
        } else {
            advance_filters(&[self.mu, self.nu], &obs, self.model, visit)?;
        }
        Ok((path, obs, out))
    }

    fn run_path(&self, i: usize, n_steps: usize) -> Result<PathRecord> {
        let (path, obs) = self.sample(i)?;
        let dt = obs.dt;
        let n_records = n_steps / self.record_every + 1;
        let noisy = !self.model.is_noiseless();
        let track_dynamics = self.track_dynamics && noisy;
        let h = self.model.unit_observation();
        let channels: Vec<Vec<f64>> = (0..h.channels()).map(|j| h.channel(j)).collect();

        let mut series = PathSeries::with_capacity(n_records);
        let mut clark = Vec::new();
        let mut drift_integral = Vec::new();
        let mut pi_infimum = PiInfimum::empty();
        let mut clark_acc = 0.0;
        let mut drift_acc = 0.0;
        let mut drift_prev = 0.0;

        let mut visit = |k: usize, states: &[Vec<f64>]| -> Result<()> {
            let (pm, pn) = (&states[0], &states[1]);
            if track_dynamics {
                let drift = chi2_drift_terms(pm, pn, self.model).map_err(|e| e.at_time(k))?.drift;
                if k > 0 {
                    drift_acc += 0.5 * (drift_prev + drift) * dt;
                }
                drift_prev = drift;
            }
            if k.is_multiple_of(self.record_every) {
                let t = k as f64 * dt;
                series.push(t, divergences(pm, pn).map_err(|e| e.at_time(k))?);
                if noisy {
                    clark.push(clark_acc);
                }
                if track_dynamics {
                    drift_integral.push(drift_acc);
                }
                if self.track_poincare {
                    let a = self.model.generator();
                    pi_infimum.observe(a, pm, i, k, t);
                    pi_infimum.observe(a, pn, i, k, t);
                }
            }
            if k < n_steps && noisy {
                let sq: f64 = channels
                    .iter()
                    .map(|c| {
                        let diff = expect(pm, c) - expect(pn, c);
                        diff * diff
                    })
                    .sum();
                clark_acc += 0.5 * sq * dt;
            }
            Ok(())
        };
        if noisy {
            advance_filters(&[self.mu, self.nu], &obs, self.model, &mut visit)?;
        } else {
            LevelSetFilter::new(self.model, dt).run(&[self.mu, self.nu], &path, n_steps, &mut visit)?;
        }
        Ok(PathRecord {
            x0: path.x0,
            series,
            clark,
            drift_integral,
            pi_infimum,
        })
    }

    /// Per-path records in path order.
    pub fn run_paths(&self) -> Result<Vec<PathRecord>> {
        let n_steps = self.validate()?;
        if n_steps % self.record_every != 0 {
            return Err(Error::config("record_dt", "must divide the horizon"));
        }
        par_map(self.n_paths, self.workers, |i| self.run_path(i, n_steps))
    }

    pub fn run(&self) -> Result<EnsembleResult> {
        summarize(&self.run_paths()?)
    }
}

fn column_estimates(n: usize, f: impl Fn(usize) -> Vec<f64>) -> Vec<Estimate> {
    (0..n).map(|k| Estimate::from_samples(&f(k), None)).collect()
}

/// Reduces per-path records to ensemble estimates.
pub fn summarize(paths: &[PathRecord]) -> Result<EnsembleResult> {
    let series: Vec<PathSeries> = paths.iter().map(|p| p.series.clone()).collect();
    let agg = aggregate(&series, None)?;
    let n_t = agg.times.len();
    let clark = (!paths[0].clark.is_empty()).then(|| {
        column_estimates(n_t, |k| paths.iter().map(|p| p.series.kl[k] + p.clark[k]).collect())
    });
    let dynamics_residual = (!paths[0].drift_integral.is_empty()).then(|| {
        column_estimates(n_t, |k| {
            paths
                .iter()
                .map(|p| p.series.chi2[k] - p.series.chi2[0] - p.drift_integral[k])
                .collect()
        })
    });
    let kl_increments = column_estimates(n_t.saturating_sub(1), |k| {
        paths.iter().map(|p| p.series.kl[k + 1] - p.series.kl[k]).collect()
    });
    let pi_infimum = paths
        .iter()
        .map(|p| p.pi_infimum)
        .fold(PiInfimum::empty(), PiInfimum::merge);
    Ok(EnsembleResult {
        series: agg,
        clark,
        dynamics_residual,
        kl_increments,
        pi_infimum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cyclic_generator, ObservationMatrix};

    fn spec<'a>(model: &'a HmmModel, mu: &'a Simplex, nu: &'a Simplex, workers: usize) -> EnsembleSpec<'a> {
        EnsembleSpec {
            model,
            mu,
            nu,
            horizon: 1.0,
            dt: 1e-2,
            n_paths: 12,
            record_every: 10,
            seed: 7,
            group: 0,
            workers,
            track_dynamics: true,
            track_poincare: true,
        }
    }

    #[test]
    fn stream_ids_do_not_collide() {
        assert_ne!(stream_id(1, 0, 5), stream_id(2, 0, 5));
        assert_ne!(stream_id(1, 1, 5), stream_id(1, 0, 5));
        assert_eq!(stream_id(1, 2, 3) & 0xffff_ffff, 3);
    }

    #[test]
    fn identical_priors_give_zero_series() {
        let model = HmmModel::new(cyclic_generator(), ObservationMatrix::column(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 1.0).unwrap();
        let p = Simplex::uniform(4);
        let r = spec(&model, &p, &p, 2).run().unwrap();
        assert!(r.series.chi2.iter().all(|e| e.mean == 0.0));
        assert!(r.series.tv.iter().all(|e| e.mean == 0.0));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let model = HmmModel::new(cyclic_generator(), ObservationMatrix::column(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 1.0).unwrap();
        let mu = Simplex::new(vec![0.35, 0.35, 0.15, 0.15]).unwrap();
        let nu = Simplex::uniform(4);
        let a = spec(&model, &mu, &nu, 1).run().unwrap();
        let b = spec(&model, &mu, &nu, 4).run().unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn rejects_prior_without_continuity() {
        let model = HmmModel::new(cyclic_generator(), ObservationMatrix::column(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 1.0).unwrap();
        let mu = Simplex::uniform(4);
        let nu = Simplex::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(spec(&model, &mu, &nu, 1).run(), Err(Error::Config { .. })));
    }
}
