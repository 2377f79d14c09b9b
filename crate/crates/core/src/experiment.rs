//! Experiment configuration, built-in presets and the report-producing commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::divergence::{chi2, fit_exponential_rate, kl, tv, Estimate, RateFit};
use crate::dual::{
    decay_diagnostics, estimate_backward_map, theorem2_envelope, BackwardMapEstimate, BackwardSpec, DecayDiagnostics,
    EstimatorKind, SIGMA_TOL,
};
use crate::ensemble::{EnsembleResult, EnsembleSpec};
use crate::error::{Error, Result};
use crate::io::{self, ModelFile};
use crate::model::{
    block_generator, closed_classes, cyclic_generator, invariant_measure, invariant_measure_any, invariant_nullity,
    is_ergodic, nonergodic_limit_bounds, observable_space, rate_bounds, HmmModel, ObservationMatrix, RateBounds,
    Simplex, SmallNoiseBounds,
};
use crate::poincare::{classical_pi_constant, PiInfimum};
use crate::sim::grid;

/// Absolute slack added to statistical comparisons to absorb rounding.
pub const ROUNDING_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    /// Observation noise variance `σ² = r²`; zero selects the noise-free filter.
    Sigma2(Vec<f64>),
    /// Multiplier of the observation function.
    K(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardMapConfig {
    /// Sweep value whose model is used; the base model when absent.
    #[serde(default)]
    pub at: Option<f64>,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    /// Horizon of the plain/Rao-Blackwell comparison; the first of `t_list` when absent.
    #[serde(default)]
    pub horizon: Option<f64>,
}

impl Default for BackwardMapConfig {
    fn default() -> Self {
        BackwardMapConfig {
            at: None,
            n_paths: default_n_paths(),
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Inline model object `{"d","m","A","H","r"}`.
    #[serde(default)]
    pub model: Option<Value>,
    /// Model file, relative to the config file.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Rate-fit window `[t_lo, t_hi]`; `[0.2T, 0.9T]` when absent.
    #[serde(default)]
    pub window: Option<[f64; 2]>,
    /// Spacing of recorded divergence values.
    #[serde(default = "default_record_dt")]
    pub record_dt: f64,
    #[serde(default = "default_t_list")]
    pub t_list: Vec<f64>,
    #[serde(default)]
    pub backward_map: BackwardMapConfig,
    #[serde(default)]
    pub plot_data: bool,
    /// Number of leading paths whose full trajectories are written out.
    #[serde(default)]
    pub dump_paths: usize,
    #[serde(default = "default_true")]
    pub track_dynamics: bool,
    /// Block length of the decay envelope.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_horizon() -> f64 {
    10.0
}
fn default_dt() -> f64 {
    1e-3
}
fn default_n_paths() -> usize {
    200
}
fn default_record_dt() -> f64 {
    0.1
}
fn default_t_list() -> Vec<f64> {
    vec![2.0, 5.0, 10.0]
}
fn default_true() -> bool {
    true
}
fn default_tau() -> f64 {
    1.0
}

fn column_model(a: &crate::model::Generator, h: &[f64], r: f64) -> Value {
    let file = ModelFile::from(&HmmModel::new(a.clone(), ObservationMatrix::column(h).expect("finite"), r).expect("valid preset"));
    serde_json::to_value(file).expect("model serializes")
}

pub const PRESETS: [&str; 2] = ["example-6.1", "example-6.2"];

/// Built-in configurations of the two numerical examples.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = |name: &str, model: Value, mu: Vec<f64>, nu: Vec<f64>, sweep: Sweep, at: f64| ExperimentConfig {
        name: name.to_string(),
        model: Some(model),
        model_path: None,
        mu,
        nu,
        horizon: default_horizon(),
        dt: default_dt(),
        n_paths: default_n_paths(),
        sweep: Some(sweep),
        seed: 0,
        workers: 0,
        out_dir: None,
        window: None,
        record_dt: default_record_dt(),
        t_list: default_t_list(),
        backward_map: BackwardMapConfig {
            at: Some(at),
            ..BackwardMapConfig::default()
        },
        plot_data: false,
        dump_paths: 0,
        track_dynamics: true,
        tau: default_tau(),
    };
    match name {
        // Cyclic chain observed through the level h = (1,0,1,0); the noise sweep
        // omits 0.01, where the explicit filter step needs dt well below 1e-3.
        "example-6.1" => Ok(base(
            name,
            column_model(&cyclic_generator(), &[1.0, 0.0, 1.0, 0.0], 1.0),
            vec![0.35, 0.35, 0.15, 0.15],
            vec![0.25; 4],
            Sweep::Sigma2(vec![0.0, 0.1, 1.0, 10.0]),
            1.0,
        )),
        "example-6.2" => Ok(base(
            name,
            column_model(&block_generator(), &[1.0, 0.0, -1.0, 0.0], 1.0),
            vec![0.2, 0.6, 0.1, 0.1],
            vec![0.1, 0.1, 0.1, 0.7],
            Sweep::K(vec![0.0, 1.0, 2.0, 4.0]),
            1.0,
        )),
        other => Err(Error::config("preset", format!("unknown preset `{other}`; known: {}", PRESETS.join(", ")))),
    }
}

/// One model of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub parameter: &'static str,
    pub value: f64,
    pub model: HmmModel,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads a config file; a relative `model_path` is resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(p), Some(dir)) = (cfg.model_path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Base model; `r = 0` is allowed here and routed to the noise-free filter.
    pub fn base_model(&self) -> Result<HmmModel> {
        match (&self.model, &self.model_path) {
            (Some(v), None) => io::model_from_value(v, true),
            (None, Some(p)) => io::read_model(p, true),
            (Some(_), Some(_)) => Err(Error::config("model", "give either `model` or `model_path`, not both")),
            (None, None) => Err(Error::config("model", "a model or model_path is required")),
        }
    }

    pub fn priors(&self) -> Result<(Simplex, Simplex)> {
        let mu = Simplex::new(self.mu.clone()).map_err(|e| Error::config("mu", e.to_string()))?;
        let nu = Simplex::new(self.nu.clone()).map_err(|e| Error::config("nu", e.to_string()))?;
        if !mu.abs_continuous_wrt(&nu) {
            return Err(Error::config("mu", "mu must be absolutely continuous with respect to nu"));
        }
        Ok((mu, nu))
    }

    pub fn fit_window(&self) -> (f64, f64) {
        match self.window {
            Some([a, b]) => (a, b),
            None => (0.2 * self.horizon, 0.9 * self.horizon),
        }
    }

    pub fn record_every(&self) -> Result<usize> {
        let (_, dt) = grid(self.horizon, self.dt)?;
        let k = (self.record_dt / dt).round();
        if k < 1.0 || (k * dt - self.record_dt).abs() > 1e-9 {
            return Err(Error::config("record_dt", "must be a positive multiple of dt"));
        }
        Ok(k as usize)
    }

    /// Checks every field before any simulation starts.
    pub fn validate(&self) -> Result<()> {
        let model = self.base_model()?;
        let (mu, _) = self.priors()?;
        if mu.dim() != model.dim() {
            return Err(Error::config("mu", format!("priors have {} states, model {}", mu.dim(), model.dim())));
        }
        if !(self.horizon > 0.0) || !(self.dt > 0.0) {
            return Err(Error::config("horizon", "horizon and dt must be positive"));
        }
        grid(self.horizon, self.dt).map_err(|e| Error::config("dt", e.to_string()))?;
        if self.n_paths == 0 {
            return Err(Error::config("n_paths", "must be positive"));
        }
        let every = self.record_every()?;
        if !((self.horizon / self.dt).round() as usize).is_multiple_of(every) {
            return Err(Error::config("record_dt", "must divide the horizon"));
        }
        let (lo, hi) = self.fit_window();
        if !(0.0 <= lo && lo < hi && hi <= self.horizon + 1e-12) {
            return Err(Error::config("window", "need 0 <= t_lo < t_hi <= horizon"));
        }
        if self.t_list.is_empty() || self.t_list.windows(2).any(|w| w[0] >= w[1]) || self.t_list[0] <= 0.0 {
            return Err(Error::config("t_list", "must be positive and strictly increasing"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", "must be positive"));
        }
        match &self.sweep {
            Some(Sweep::Sigma2(v)) if v.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) => {
                Err(Error::config("sweep.sigma2", "values must be finite and nonnegative"))
            }
            Some(Sweep::K(v)) if v.iter().any(|k| !k.is_finite()) => Err(Error::config("sweep.k", "values must be finite")),
            Some(Sweep::K(_)) if model.is_noiseless() => Err(Error::config("sweep.k", "a k sweep needs r > 0")),
            Some(Sweep::Sigma2(v)) | Some(Sweep::K(v)) if v.is_empty() => Err(Error::config("sweep", "empty sweep")),
            _ => Ok(()),
        }
    }

    pub fn sweep_points(&self) -> Result<Vec<SweepPoint>> {
        let base = self.base_model()?;
        let point = |parameter: &'static str, value: f64, model: HmmModel| SweepPoint {
            label: format!("{parameter}_{value}"),
            parameter,
            value,
            model,
        };
        match &self.sweep {
            None => Ok(vec![point("base", 0.0, base)]),
            Some(Sweep::Sigma2(v)) => v
                .iter()
                .map(|&s| Ok(point("sigma2", s, base.with_noise(s.sqrt())?)))
                .collect(),
            Some(Sweep::K(v)) => v
                .iter()
                .map(|&k| Ok(point("k", k, base.with_observation(base.observation().scaled(k))?)))
                .collect(),
        }
    }

    fn backward_model(&self) -> Result<HmmModel> {
        match self.backward_map.at {
            None => self.base_model(),
            Some(v) => self
                .sweep_points()?
                .into_iter()
                .find(|p| p.value == v)
                .map(|p| p.model)
                .ok_or_else(|| Error::config("backward_map.at", format!("{v} is not a sweep value"))),
        }
    }
}

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub d: usize,
    pub m: usize,
    pub ergodic: bool,
    pub observable_dim: usize,
    pub observable: bool,
    pub observable_basis: Vec<Vec<f64>>,
    pub invariant_nullity: usize,
    /// Unique invariant measure, or one element of the nullspace.
    pub invariant_measure: Vec<f64>,
    pub invariant_unique: bool,
    pub closed_classes: Vec<Vec<usize>>,
    pub classical_pi: Option<f64>,
    pub rate_bounds: RateBounds,
    pub small_noise_bounds: SmallNoiseBounds,
}

pub fn cmd_structure(model: &HmmModel) -> Result<StructureReport> {
    let a = model.generator();
    let unique = invariant_measure(a);
    let invariant_unique = unique.is_ok();
    let mu_bar = unique.unwrap_or_else(|_| invariant_measure_any(a));
    let basis = observable_space(a, model.observation());
    Ok(StructureReport {
        d: model.dim(),
        m: model.channels(),
        ergodic: is_ergodic(a),
        observable_dim: basis.dim(),
        observable: basis.dim() == model.dim(),
        observable_basis: basis.vectors.iter().map(|v| v.as_slice().to_vec()).collect(),
        invariant_nullity: invariant_nullity(a),
        invariant_measure: mu_bar.as_slice().to_vec(),
        invariant_unique,
        closed_classes: closed_classes(a),
        classical_pi: classical_pi_constant(a, &mu_bar).ok().map(|r| r.constant),
        rate_bounds: rate_bounds(a, &mu_bar),
        small_noise_bounds: nonergodic_limit_bounds(model.observation(), &mu_bar),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSummary {
    pub c_estimate: f64,
    pub tau: f64,
    pub a_lower: f64,
    pub first_violation: Option<f64>,
    pub n_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub label: String,
    pub parameter: String,
    pub value: f64,
    pub noise_std: f64,
    pub chi2_prior: f64,
    pub kl_prior: f64,
    pub tv_prior: f64,
    pub chi2_final: Estimate,
    pub rate_fit: Option<RateFit>,
    pub rate_fit_note: Option<String>,
    /// Smallest conditional Poincaré constant met by either filter at the record times.
    pub pi_infimum: PiInfimum,
    pub envelope: Option<EnvelopeSummary>,
    pub envelope_note: Option<String>,
    pub checks: Vec<Check>,
    pub series_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub config: ExperimentConfig,
    pub structure: StructureReport,
    pub sweeps: Vec<SweepResult>,
    pub rates_increasing: Option<Check>,
    pub tolerance: String,
    pub wall_clock_s: f64,
}

impl SimulateReport {
    pub fn passed(&self) -> bool {
        self.sweeps.iter().all(|s| s.checks.iter().all(|c| c.passed)) && self.rates_increasing.as_ref().is_none_or(|c| c.passed)
    }
}

const TOLERANCE_NOTE: &str = "statistical checks use 3 standard errors (4 for the chi2 dynamics) plus a 1e-12 rounding floor; \
the chi2 dynamics also allow dt*t*chi2(mu|nu)*(q+|h|^2)^2 for the time step";

/// `mean ≤ bound + k·se` at every index.
fn one_sided(name: &str, estimates: &[Estimate], bound: f64, k: f64) -> Check {
    let worst = estimates
        .iter()
        .enumerate()
        .map(|(i, e)| (i, (e.mean - bound) - k * e.se - ROUNDING_FLOOR * (1.0 + bound.abs())))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    Check::new(
        name,
        worst.1 <= 0.0,
        format!("largest excess over bound + {k}se is {:.3e} at record {}", worst.1, worst.0),
    )
}

/// First-order weak error scale of the explicit filter step: `dt · t · χ²(μ|ν) · (q + |h|²)²`,
/// with `q` the largest exit rate and `h` in unit-noise form.
pub fn discretization_allowance(model: &HmmModel, dt: f64, chi2_prior: f64, t: f64) -> f64 {
    let a = model.generator();
    let h = model.unit_observation();
    let q = (0..model.dim()).map(|x| a.exit_rate(x)).fold(0.0, f64::max);
    let h2 = (0..model.dim())
        .map(|x| h.row(x).iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    dt * t * chi2_prior * (q + h2).powi(2)
}

/// Supermartingale, Clark and χ²-dynamics checks on one ensemble.
pub fn ensemble_checks(result: &EnsembleResult, model: &HmmModel, dt: f64, d0: f64, chi2_prior: f64) -> Vec<Check> {
    let mut checks = vec![one_sided("kl-supermartingale", &result.kl_increments, 0.0, SIGMA_TOL)];
    if let Some(c) = &result.clark {
        checks.push(one_sided("clark-lower-bound", c, d0, SIGMA_TOL));
    }
    if let Some(r) = &result.dynamics_residual {
        let excess: Vec<Estimate> = r
            .iter()
            .zip(&result.series.times)
            .map(|(e, &t)| Estimate {
                mean: e.mean.abs() - discretization_allowance(model, dt, chi2_prior, t),
                se: e.se,
            })
            .collect();
        checks.push(one_sided("chi2-dynamics", &excess, 0.0, 4.0));
    }
    checks
}

fn monotone_check(sweeps: &[SweepResult], k: f64) -> Option<Check> {
    let fits: Vec<(f64, RateFit)> = sweeps
        .iter()
        .filter(|s| s.noise_std > 0.0 || s.parameter != "sigma2")
        .filter_map(|s| s.rate_fit.map(|f| (s.value, f)))
        .collect();
    if fits.len() < 2 {
        return None;
    }
    let ok = fits.windows(2).all(|w| {
        let (a, b) = (w[0].1, w[1].1);
        b.rate - a.rate > k * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
    });
    let detail = fits
        .iter()
        .map(|(v, f)| format!("{v}: {:.4} ± {:.4}", f.rate, f.stderr))
        .collect::<Vec<_>>()
        .join(", ");
    Some(Check::new("rates-increasing", ok, detail))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::config("out_dir", format!("{}: {e}", dir.display())))
}

/// Ensemble, divergence series and rate fit for every sweep value.
pub fn cmd_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SimulateReport> {
    let start = Instant::now();
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let (mu, nu) = cfg.priors()?;
    let record_every = cfg.record_every()?;
    let window = cfg.fit_window();
    let d0 = kl(mu.as_slice(), nu.as_slice())?;
    let mut sweeps = Vec::new();
    for (g, point) in cfg.sweep_points()?.into_iter().enumerate() {
        let spec = EnsembleSpec {
            model: &point.model,
            mu: &mu,
            nu: &nu,
            horizon: cfg.horizon,
            dt: cfg.dt,
            n_paths: cfg.n_paths,
            record_every,
            seed: cfg.seed,
            group: g as u64,
            workers: cfg.workers,
            track_dynamics: cfg.track_dynamics,
            track_poincare: true,
        };
        let result = spec.run()?;
        let series = &result.series;
        let means = series.chi2_means();
        let (rate_fit, rate_fit_note) = match fit_exponential_rate(&series.times, &means, window) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let csv_name = format!("series_{}.csv", point.label);
        io::write_series(&out_dir.join(&csv_name), series)?;
        if cfg.plot_data {
            let (lo, hi) = window;
            let eps = 1e-9 * (1.0 + hi);
            let (t, y): (Vec<f64>, Vec<f64>) = series
                .times
                .iter()
                .zip(&means)
                .filter(|(t, m)| **t >= lo - eps && **t <= hi + eps && **m > 0.0)
                .map(|(t, m)| (*t, m.ln()))
                .unzip();
            io::write_plot_data(&out_dir.join(format!("plot_{}.csv", point.label)), &t, &y)?;
        }
        for i in 0..cfg.dump_paths.min(cfg.n_paths) {
            let (path, obs, trajs) = spec.trajectories(i)?;
            io::write_observation(&out_dir.join(format!("obs_{}_path{i}.csv", point.label)), &obs)?;
            io::write_jumps(&out_dir.join(format!("jumps_{}_path{i}.csv", point.label)), &path)?;
            for t in &trajs {
                io::write_trajectory(&out_dir.join(format!("traj_{}_path{i}_{}.csv", point.label, t.label)), t)?;
            }
        }
        let c_estimate = if result.pi_infimum.c_inf.is_finite() { result.pi_infimum.c_inf.max(0.0) } else { 0.0 };
        let (envelope, envelope_note) = match theorem2_envelope(&mu, &nu, &series.times, &series.chi2, c_estimate, cfg.tau) {
            Ok(r) => (
                Some(EnvelopeSummary {
                    c_estimate,
                    tau: cfg.tau,
                    a_lower: r.a_lower,
                    first_violation: r.first_violation,
                    n_violations: r.n_violations,
                }),
                None,
            ),
            Err(e) => (None, Some(e.to_string())),
        };
        let chi2_prior = chi2(mu.as_slice(), nu.as_slice())?;
        sweeps.push(SweepResult {
            label: point.label.clone(),
            parameter: point.parameter.to_string(),
            value: point.value,
            noise_std: point.model.noise_std(),
            chi2_prior,
            kl_prior: d0,
            tv_prior: tv(mu.as_slice(), nu.as_slice()),
            chi2_final: *series.chi2.last().expect("series is non-empty"),
            rate_fit,
            rate_fit_note,
            pi_infimum: result.pi_infimum,
            envelope,
            envelope_note,
            checks: ensemble_checks(&result, &point.model, cfg.dt, d0, chi2_prior),
            series_csv: csv_name,
        });
    }
    let rates_increasing = monotone_check(&sweeps, 2.0);
    Ok(SimulateReport {
        structure: cmd_structure(&cfg.base_model()?)?,
        config: cfg.clone(),
        sweeps,
        rates_increasing,
        tolerance: TOLERANCE_NOTE.to_string(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardMapReport {
    pub config: ExperimentConfig,
    pub diagnostics: Vec<DecayDiagnostics>,
    pub plain: BackwardMapEstimate,
    pub rao_blackwell: BackwardMapEstimate,
    pub checks: Vec<Check>,
    pub tolerance: String,
    pub wall_clock_s: f64,
}

impl BackwardMapReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn nonnegative(name: &str, e: &Estimate) -> Check {
    Check::new(
        name,
        e.mean >= -SIGMA_TOL * e.se - ROUNDING_FLOOR,
        format!("{:.4e} ± {:.2e}", e.mean, e.se),
    )
}

/// Checks on one backward-map comparison and one diagnostics table.
pub fn backward_checks(
    nu: &Simplex,
    plain: &BackwardMapEstimate,
    rb: &BackwardMapEstimate,
    diagnostics: &[DecayDiagnostics],
) -> Vec<Check> {
    let mut checks = Vec::new();
    let worst = (0..plain.y0.len())
        .filter(|&x| !plain.skipped[x])
        .map(|x| {
            let se = (plain.stderr[x].powi(2) + rb.stderr[x].powi(2)).sqrt();
            (plain.y0[x] - rb.y0[x]).abs() - SIGMA_TOL * se - ROUNDING_FLOOR
        })
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::new("plain-vs-rao-blackwell", worst <= 0.0, format!("largest excess {worst:.3e}")));
    for (name, e) in [("normalization-plain", plain), ("normalization-rao-blackwell", rb)] {
        let m = e.nu_mean(nu);
        checks.push(Check::new(
            name,
            (m.mean - 1.0).abs() <= SIGMA_TOL * m.se + ROUNDING_FLOOR,
            format!("nu(y0) = {:.6} ± {:.2e}", m.mean, m.se),
        ));
    }
    let decreasing = diagnostics.windows(2).all(|w| {
        let (a, b) = (w[0].var_nu_y0, w[1].var_nu_y0);
        a.mean - b.mean > SIGMA_TOL * (a.se * a.se + b.se * b.se).sqrt()
    });
    let detail = diagnostics
        .iter()
        .map(|g| format!("T={}: {:.3e} ± {:.1e}", g.horizon, g.var_nu_y0.mean, g.var_nu_y0.se))
        .collect::<Vec<_>>()
        .join(", ");
    checks.push(Check::new("variance-decay", decreasing, detail));
    for g in diagnostics {
        let t = g.horizon;
        checks.push(nonnegative(&format!("jensen-T{t}"), &g.jensen_gap));
        checks.push(nonnegative(&format!("cauchy-schwarz-T{t}"), &g.cauchy_schwarz_slack));
        checks.push(nonnegative(&format!("var-y0-nonnegative-T{t}"), &g.var_nu_y0));
        if let Some(r) = g.r_t {
            checks.push(nonnegative(&format!("ratio-lower-bound-T{t}"), &Estimate { mean: r.mean - g.a_lower, se: r.se }));
        }
        if let Some(u) = g.uniform_bound_slack {
            checks.push(nonnegative(&format!("uniform-bound-T{t}"), &u));
        }
    }
    checks
}

fn write_decay_table(path: &Path, diagnostics: &[DecayDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "T", "var_nu_y0", "var_nu_y0_se", "var_nu_gamma_t", "var_nu_gamma_t_se", "mean_mu_chi2", "mean_mu_chi2_se", "r_t", "r_t_se",
        "a_lower",
    ])?;
    for g in diagnostics {
        let (r, rse) = g.r_t.map(|e| (e.mean, e.se)).unwrap_or((f64::NAN, f64::NAN));
        w.write_record(
            [
                g.horizon,
                g.var_nu_y0.mean,
                g.var_nu_y0.se,
                g.var_nu_gamma_t.mean,
                g.var_nu_gamma_t.se,
                g.mean_mu_chi2_t.mean,
                g.mean_mu_chi2_t.se,
                r,
                rse,
                g.a_lower,
            ]
            .map(|v| format!("{v:?}")),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Backward map by both estimators and the variance-decay table over `t_list`.
pub fn cmd_backward_map(cfg: &ExperimentConfig, out_dir: &Path) -> Result<BackwardMapReport> {
    let start = Instant::now();
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let (mu, nu) = cfg.priors()?;
    let model = cfg.backward_model()?;
    let spec = BackwardSpec {
        model: &model,
        mu: &mu,
        nu: &nu,
        dt: cfg.dt,
        n_paths: cfg.backward_map.n_paths,
        seed: cfg.seed,
        group: 0,
        workers: cfg.workers,
    };
    let horizon = cfg.backward_map.horizon.unwrap_or(cfg.t_list[0]);
    let plain = estimate_backward_map(&spec, horizon, EstimatorKind::Plain)?;
    let rao_blackwell = estimate_backward_map(&spec, horizon, EstimatorKind::RaoBlackwell)?;
    let diagnostics = decay_diagnostics(&spec, &cfg.t_list)?;
    io::write_backward_map(&out_dir.join("backward_map_plain.csv"), &plain)?;
    io::write_backward_map(&out_dir.join("backward_map_rao_blackwell.csv"), &rao_blackwell)?;
    write_decay_table(&out_dir.join("variance_decay.csv"), &diagnostics)?;
    Ok(BackwardMapReport {
        checks: backward_checks(&nu, &plain, &rao_blackwell, &diagnostics),
        config: cfg.clone(),
        diagnostics,
        plain,
        rao_blackwell,
        tolerance: TOLERANCE_NOTE.to_string(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Writes `report` as pretty JSON.
pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.sweep_points().unwrap().len(), 4);
        }
        assert!(preset("example-9").is_err());
    }

    #[test]
    fn sigma2_zero_is_noiseless() {
        let pts = preset("example-6.1").unwrap().sweep_points().unwrap();
        assert!(pts[0].model.is_noiseless());
        assert!((pts[2].model.noise_std() - 1.0).abs() < 1e-15);
        assert!((pts[3].model.noise_std() - 10f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn k_sweep_scales_observation() {
        let pts = preset("example-6.2").unwrap().sweep_points().unwrap();
        assert_eq!(pts[3].model.observation().channel(0), vec![4.0, 0.0, -4.0, 0.0]);
        assert_eq!(pts[0].model.observation().channel(0), vec![0.0; 4]);
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = preset("example-6.1").unwrap();
        cfg.nu = vec![0.5, 0.5, 0.0, 0.0];
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "mu"));
        let mut cfg = preset("example-6.1").unwrap();
        cfg.window = Some([5.0, 2.0]);
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "window"));
        let err = ExperimentConfig::from_json(r#"{"name":"x","mu":[1],"nu":[1],"bogus":1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = preset("example-6.2").unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn structure_of_presets() {
        let s = cmd_structure(&preset("example-6.1").unwrap().base_model().unwrap()).unwrap();
        assert!(s.ergodic && s.invariant_unique);
        assert!((s.classical_pi.unwrap() - 2.0).abs() < 1e-10);
        assert_eq!((s.rate_bounds.pairwise, s.rate_bounds.invariant_weighted, s.rate_bounds.column_minimum), (0.0, 0.0, 0.0));
        let s = cmd_structure(&preset("example-6.2").unwrap().base_model().unwrap()).unwrap();
        assert!(!s.ergodic && !s.invariant_unique);
        assert_eq!(s.observable_dim, 4);
    }
}
