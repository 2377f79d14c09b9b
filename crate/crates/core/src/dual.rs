//! Backward map and variance-decay diagnostics.
//!
//! `y₀(x) = E^ν(γ_T(X_T) | X₀ = x)` is estimated by stratifying on the initial
//! state: for every `x` in `supp(ν)` the same number of paths start at `x`,
//! and each path runs the filters from `μ`, `ν` and `δ_x` on one observation.
//! Expectations under `P^ν` and `P^μ` are then weighted sums of stratum means
//! with weights `ν(x)` and `μ(x)`, which lets `R_T` use one set of paths for
//! its numerator and denominator.

use serde::{Deserialize, Serialize};

use crate::divergence::{chi2, likelihood_ratio, Estimate};
use crate::ensemble::{domain, par_map, stream_id};
use crate::error::{Error, Result};
use crate::filter::advance_filters;
use crate::linalg::pairwise_sum;
use crate::model::{HmmModel, Simplex};
use crate::sim::{grid, simulate_from, RngStream};

/// States with `ν(x)` below this carry no stratum; `y₀` is reported as 0 there.
pub const STRATUM_TOL: f64 = 1e-12;
/// Standard errors used by every statistical comparison.
pub const SIGMA_TOL: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Average of `γ_T(X_T)`.
    Plain,
    /// Average of `π_T^{δx}(γ_T)`.
    RaoBlackwell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardMapEstimate {
    pub horizon: f64,
    pub kind: EstimatorKind,
    pub y0: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Sample standard deviation of the per-path values, per state.
    pub spread: Vec<f64>,
    pub n_paths: usize,
    /// States outside `supp(ν)`.
    pub skipped: Vec<bool>,
}

impl BackwardMapEstimate {
    /// `ν(y₀)`, which equals one for the exact map.
    pub fn nu_mean(&self, nu: &Simplex) -> Estimate {
        let terms: Vec<f64> = (0..self.y0.len()).map(|x| nu[x] * self.y0[x]).collect();
        let var: Vec<f64> = (0..self.y0.len()).map(|x| (nu[x] * self.stderr[x]).powi(2)).collect();
        Estimate {
            mean: pairwise_sum(&terms),
            se: pairwise_sum(&var).sqrt(),
        }
    }
}

/// Shared settings of the stratified estimators.
#[derive(Debug, Clone)]
pub struct BackwardSpec<'a> {
    pub model: &'a HmmModel,
    pub mu: &'a Simplex,
    pub nu: &'a Simplex,
    pub dt: f64,
    /// Paths per initial state.
    pub n_paths: usize,
    pub seed: u64,
    pub group: u64,
    pub workers: usize,
}

/// Per-path values at each requested horizon.
#[derive(Debug, Clone)]
struct StratumPath {
    plain: Vec<f64>,
    rb: Vec<f64>,
    chi2: Vec<f64>,
}

struct Strata {
    support: Vec<usize>,
    /// `paths[s]` are the paths started from `support[s]`.
    paths: Vec<Vec<StratumPath>>,
}

impl<'a> BackwardSpec<'a> {
    fn check(&self, horizons: &[f64]) -> Result<(Vec<usize>, f64)> {
        if self.model.is_noiseless() {
            return Err(Error::Noiseless("the backward map is estimated with the noisy filter"));
        }
        let d = self.model.dim();
        if self.mu.dim() != d || self.nu.dim() != d {
            return Err(Error::DimensionMismatch(format!("priors must have {d} states")));
        }
        if !self.mu.abs_continuous_wrt(self.nu) {
            return Err(Error::AbsoluteContinuityViolation {
                state: (0..d).find(|&x| self.mu[x] > 0.0 && self.nu[x] == 0.0).unwrap_or(0),
                time_index: Some(0),
            });
        }
        if self.n_paths < 2 {
            return Err(Error::config("n_paths", "at least two paths per state are needed"));
        }
        if horizons.is_empty() || horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("t_list", "horizons must be non-empty and increasing"));
        }
        let t_max = *horizons.last().expect("non-empty");
        let (n, dt) = grid(t_max, self.dt)?;
        let mut idx = Vec::with_capacity(horizons.len());
        for &t in horizons {
            let k = (t / dt).round();
            if (k * dt - t).abs() > 1e-9 || k < 1.0 {
                return Err(Error::GridMismatch { horizon: t, dt: self.dt });
            }
            idx.push(k as usize);
        }
        debug_assert_eq!(*idx.last().expect("non-empty"), n);
        Ok((idx, t_max))
    }

    fn run_strata(&self, horizons: &[f64], dom: u64) -> Result<Strata> {
        let (idx, t_max) = self.check(horizons)?;
        let d = self.model.dim();
        let support: Vec<usize> = (0..d).filter(|&x| self.nu[x] >= STRATUM_TOL).collect();
        let n = self.n_paths;
        let flat = par_map(support.len() * n, self.workers, |u| {
            let x = support[u / n];
            let stream = RngStream {
                master_seed: self.seed,
                stream_id: stream_id(dom, self.group, u as u64),
            };
            self.stratum_path(x, &idx, t_max, stream)
        })?;
        let mut paths = vec![Vec::with_capacity(n); support.len()];
        for (u, p) in flat.into_iter().enumerate() {
            paths[u / n].push(p);
        }
        Ok(Strata { support, paths })
    }

    fn stratum_path(&self, x: usize, idx: &[usize], t_max: f64, stream: RngStream) -> Result<StratumPath> {
        let mut rng = stream.rng();
        let (path, obs) = simulate_from(self.model, x, t_max, self.dt, &mut rng)?;
        let delta = Simplex::point_mass(self.model.dim(), x);
        let mut out = StratumPath {
            plain: Vec::with_capacity(idx.len()),
            rb: Vec::with_capacity(idx.len()),
            chi2: Vec::with_capacity(idx.len()),
        };
        let mut next = 0;
        advance_filters(&[self.mu, self.nu, &delta], &obs, self.model, |k, states| {
            if next < idx.len() && k == idx[next] {
                let (pm, pn, pd) = (&states[0], &states[1], &states[2]);
                let gamma = likelihood_ratio(pm, pn).map_err(|e| e.at_time(k))?;
                out.plain.push(gamma[path.state_at(obs.time(k))]);
                out.rb.push(pd.iter().zip(&gamma).map(|(p, g)| p * g).sum());
                out.chi2.push(chi2(pm, pn).map_err(|e| e.at_time(k))?);
                next += 1;
            }
            Ok(())
        })?;
        Ok(out)
    }
}

fn backward_map_from(strata: &Strata, d: usize, horizon: f64, slot: usize, kind: EstimatorKind, n: usize) -> BackwardMapEstimate {
    let mut y0 = vec![0.0; d];
    let mut stderr = vec![0.0; d];
    let mut spread = vec![0.0; d];
    let mut skipped = vec![true; d];
    for (s, &x) in strata.support.iter().enumerate() {
        let xs: Vec<f64> = strata.paths[s]
            .iter()
            .map(|p| match kind {
                EstimatorKind::Plain => p.plain[slot],
                EstimatorKind::RaoBlackwell => p.rb[slot],
            })
            .collect();
        let e = Estimate::from_samples(&xs, None);
        y0[x] = e.mean;
        stderr[x] = e.se;
        spread[x] = e.se * (n as f64).sqrt();
        skipped[x] = false;
    }
    BackwardMapEstimate {
        horizon,
        kind,
        y0,
        stderr,
        spread,
        n_paths: n,
        skipped,
    }
}

/// Stratified estimate of `y₀` at horizon `T`.
///
/// The two kinds draw from disjoint stream domains, so their estimates are
/// independent and can be compared with combined standard errors.
pub fn estimate_backward_map(spec: &BackwardSpec, horizon: f64, kind: EstimatorKind) -> Result<BackwardMapEstimate> {
    let dom = match kind {
        EstimatorKind::Plain => domain::BACKWARD_PLAIN,
        EstimatorKind::RaoBlackwell => domain::BACKWARD_RB,
    };
    let strata = spec.run_strata(&[horizon], dom)?;
    Ok(backward_map_from(&strata, spec.model.dim(), horizon, 0, kind, spec.n_paths))
}

/// `min μ/ν` over `supp(ν)`.
pub fn a_lower(mu: &Simplex, nu: &Simplex) -> f64 {
    (0..nu.dim())
        .filter(|&x| nu[x] >= STRATUM_TOL)
        .map(|x| mu[x] / nu[x])
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayDiagnostics {
    pub horizon: f64,
    pub n_paths_per_state: usize,
    /// `χ²(μ|ν)`.
    pub chi2_prior: f64,
    pub a_lower: f64,
    /// `var^ν(y₀(X₀))`, from the Rao-Blackwell map with a finite-sample bias correction.
    pub var_nu_y0: Estimate,
    /// `var^ν(γ_T(X_T)) = E^ν χ²(π_T^μ|π_T^ν)`.
    pub var_nu_gamma_t: Estimate,
    /// `E^μ χ²(π_T^μ|π_T^ν)`.
    pub mean_mu_chi2_t: Estimate,
    /// `E^μ χ² / E^ν χ²`; absent when the denominator vanishes.
    pub r_t: Option<Estimate>,
    /// `var^ν(y₀) χ²(μ|ν) - (E^μ χ²)²`, nonnegative.
    pub cauchy_schwarz_slack: Estimate,
    /// `var^ν(γ_T) - var^ν(y₀)`, nonnegative.
    pub jensen_gap: Estimate,
    /// `χ²(μ|ν) - R_T² (var^ν(γ_T) - var^ν(y₀))`, nonnegative.
    pub uniform_bound_slack: Option<Estimate>,
    pub y0: BackwardMapEstimate,
}

/// Linearized joint law of `(E^μ χ², E^ν χ², var^ν(y₀))`.
struct Aggregates {
    values: [f64; 3],
    cov: [[f64; 3]; 3],
}

impl Aggregates {
    fn se(&self, grad: [f64; 3]) -> f64 {
        let mut v = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                v += grad[i] * self.cov[i][j] * grad[j];
            }
        }
        v.max(0.0).sqrt()
    }

    fn estimate(&self, value: f64, grad: [f64; 3]) -> Estimate {
        Estimate {
            mean: value,
            se: self.se(grad),
        }
    }
}

fn sample_moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let ma = pairwise_sum(a) / n;
    let mb = pairwise_sum(b) / n;
    let va: Vec<f64> = a.iter().map(|v| (v - ma) * (v - ma)).collect();
    let vb: Vec<f64> = b.iter().map(|v| (v - mb) * (v - mb)).collect();
    let cab: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    (
        ma,
        mb,
        pairwise_sum(&va) / (n - 1.0),
        pairwise_sum(&vb) / (n - 1.0),
        pairwise_sum(&cab) / (n - 1.0),
    )
}

fn aggregates(strata: &Strata, mu: &Simplex, nu: &Simplex, slot: usize) -> Aggregates {
    let mut e_mu = Vec::new();
    let mut e_nu = Vec::new();
    let mut v = Vec::new();
    let mut cov = [[0.0; 3]; 3];
    for (s, &x) in strata.support.iter().enumerate() {
        let c: Vec<f64> = strata.paths[s].iter().map(|p| p.chi2[slot]).collect();
        let y: Vec<f64> = strata.paths[s].iter().map(|p| p.rb[slot]).collect();
        let n = c.len() as f64;
        let (mc, my, vc, vy, cy) = sample_moments(&c, &y);
        e_mu.push(mu[x] * mc);
        e_nu.push(nu[x] * mc);
        v.push(nu[x] * ((my - 1.0).powi(2) - vy / n));
        // Influence of this stratum's two means on the three aggregates.
        let g = [mu[x], nu[x], 2.0 * nu[x] * (my - 1.0)];
        let m = [[vc, vc, cy], [vc, vc, cy], [cy, cy, vy]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += g[i] * g[j] * m[i][j] / n;
            }
        }
        cov[2][2] += 2.0 * (nu[x] * vy / n).powi(2);
    }
    Aggregates {
        values: [pairwise_sum(&e_mu), pairwise_sum(&e_nu), pairwise_sum(&v)],
        cov,
    }
}

/// Variance-decay diagnostics at every horizon of `t_list`, from one set of paths.
///
/// Horizons share their path prefixes, so estimates at different `T` are
/// positively correlated; comparing them with combined standard errors is
/// conservative.
pub fn decay_diagnostics(spec: &BackwardSpec, t_list: &[f64]) -> Result<Vec<DecayDiagnostics>> {
    let strata = spec.run_strata(t_list, domain::DIAGNOSTICS)?;
    let chi2_prior = chi2(spec.mu.as_slice(), spec.nu.as_slice())?;
    let a_low = a_lower(spec.mu, spec.nu);
    Ok(t_list
        .iter()
        .enumerate()
        .map(|(slot, &horizon)| {
            let agg = aggregates(&strata, spec.mu, spec.nu, slot);
            let [em, en, v] = agg.values;
            let r_t = (en > 0.0).then(|| agg.estimate(em / en, [1.0 / en, -em / (en * en), 0.0]));
            let uniform_bound_slack = (en > 0.0).then(|| {
                let value = chi2_prior - em * em * (en - v) / (en * en);
                let d_em = -2.0 * em * (en - v) / (en * en);
                let d_en = em * em * (1.0 / (en * en) - 2.0 * v / (en * en * en));
                let d_v = em * em / (en * en);
                agg.estimate(value, [d_em, d_en, d_v])
            });
            DecayDiagnostics {
                horizon,
                n_paths_per_state: spec.n_paths,
                chi2_prior,
                a_lower: a_low,
                var_nu_y0: agg.estimate(v, [0.0, 0.0, 1.0]),
                var_nu_gamma_t: agg.estimate(en, [0.0, 1.0, 0.0]),
                mean_mu_chi2_t: agg.estimate(em, [1.0, 0.0, 0.0]),
                r_t,
                cauchy_schwarz_slack: agg.estimate(v * chi2_prior - em * em, [-2.0 * em, 0.0, chi2_prior]),
                jensen_gap: agg.estimate(en - v, [0.0, 1.0, -1.0]),
                uniform_bound_slack,
                y0: backward_map_from(
                    &strata,
                    spec.model.dim(),
                    horizon,
                    slot,
                    EstimatorKind::RaoBlackwell,
                    spec.n_paths,
                ),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub a_lower: f64,
    pub chi2_prior: f64,
    pub c_estimate: f64,
    pub tau: f64,
    pub times: Vec<f64>,
    pub envelope: Vec<f64>,
    /// First time the measured mean exceeds the envelope by more than three standard errors.
    pub first_violation: Option<f64>,
    pub n_violations: usize,
}

/// Compares a measured `E^μ χ²` series with `(1/a̲)(1 + τc)^{-⌊t/τ⌋} χ²(μ|ν)`.
pub fn theorem2_envelope(
    mu: &Simplex,
    nu: &Simplex,
    times: &[f64],
    series: &[Estimate],
    c_estimate: f64,
    tau: f64,
) -> Result<EnvelopeReport> {
    if !(tau > 0.0) || !(c_estimate >= 0.0) {
        return Err(Error::config("tau", "tau must be positive and c_estimate nonnegative"));
    }
    let a = a_lower(mu, nu);
    if !(a > 0.0) {
        let state = (0..nu.dim()).find(|&x| nu[x] >= STRATUM_TOL && mu[x] == 0.0).unwrap_or(0);
        return Err(Error::AssumptionA1Violated { state });
    }
    let chi2_prior = chi2(mu.as_slice(), nu.as_slice())?;
    let envelope: Vec<f64> = times
        .iter()
        .map(|t| chi2_prior / a * (1.0 + tau * c_estimate).powf(-(t / tau + 1e-9).floor()))
        .collect();
    let violations: Vec<f64> = times
        .iter()
        .zip(series.iter().zip(&envelope))
        .filter(|(_, (e, env))| e.mean - SIGMA_TOL * e.se > **env * (1.0 + 1e-12))
        .map(|(t, _)| *t)
        .collect();
    Ok(EnvelopeReport {
        a_lower: a,
        chi2_prior,
        c_estimate,
        tau,
        times: times.to_vec(),
        envelope,
        first_violation: violations.first().copied(),
        n_violations: violations.len(),
    })
}
