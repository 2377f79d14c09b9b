//! χ², KL and total-variation divergences between filters, their ensemble
//! time series, the drift of the χ² process, and exponential rate fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{covariance, expect, FilterTrajectory};
use crate::linalg::pairwise_sum;
use crate::model::{carre_du_champ, HmmModel};

/// States with reference mass below this are outside the support.
pub const SUPPORT_TOL: f64 = 1e-14;
/// Mass on an out-of-support state above this breaks absolute continuity.
pub const CONTINUITY_TOL: f64 = 1e-12;

/// `γ = p / q` with the convention `0/0 = 0`.
pub fn likelihood_ratio(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    p.iter()
        .zip(q)
        .enumerate()
        .map(|(x, (&a, &b))| {
            if b < SUPPORT_TOL {
                if a > CONTINUITY_TOL {
                    Err(Error::AbsoluteContinuityViolation { state: x, time_index: None })
                } else {
                    Ok(0.0)
                }
            } else {
                Ok(a / b)
            }
        })
        .collect()
}

/// `χ²(p|q) = Σ q (γ - 1)²`.
pub fn chi2(p: &[f64], q: &[f64]) -> Result<f64> {
    let g = likelihood_ratio(p, q)?;
    Ok(q.iter().zip(&g).map(|(b, r)| b * (r - 1.0) * (r - 1.0)).sum())
}

/// `D(p|q) = Σ q γ ln γ`, summed as `Σ q (γ ln γ - γ + 1)` so every term is nonnegative.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    let g = likelihood_ratio(p, q)?;
    Ok(q.iter()
        .zip(&g)
        .map(|(b, &r)| {
            let xlogx = if r > 0.0 { r * r.ln() } else { 0.0 };
            b * (xlogx - r + 1.0)
        })
        .sum())
}

/// `‖p - q‖_TV = ½ Σ |p - q|`.
pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergences {
    pub chi2: f64,
    pub kl: f64,
    pub tv: f64,
}

pub fn divergences(p: &[f64], q: &[f64]) -> Result<Divergences> {
    Ok(Divergences {
        chi2: chi2(p, q)?,
        kl: kl(p, q)?,
        tv: tv(p, q),
    })
}

/// Divergences between two filters along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSeries {
    pub times: Vec<f64>,
    pub chi2: Vec<f64>,
    pub kl: Vec<f64>,
    pub tv: Vec<f64>,
}

impl PathSeries {
    pub fn with_capacity(n: usize) -> Self {
        PathSeries {
            times: Vec::with_capacity(n),
            chi2: Vec::with_capacity(n),
            kl: Vec::with_capacity(n),
            tv: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, t: f64, d: Divergences) {
        self.times.push(t);
        self.chi2.push(d.chi2);
        self.kl.push(d.kl);
        self.tv.push(d.tv);
    }
}

/// Pointwise divergences `π^μ_t` against `π^ν_t`.
pub fn divergence_series(traj_mu: &FilterTrajectory, traj_nu: &FilterTrajectory) -> Result<PathSeries> {
    if traj_mu.n_steps != traj_nu.n_steps || traj_mu.d != traj_nu.d || traj_mu.dt != traj_nu.dt {
        return Err(Error::DimensionMismatch("trajectories do not share a grid".into()));
    }
    let mut out = PathSeries::with_capacity(traj_mu.n_steps + 1);
    for k in 0..=traj_mu.n_steps {
        let d = divergences(traj_mu.at(k), traj_nu.at(k)).map_err(|e| e.at_time(k))?;
        out.push(traj_mu.time(k), d);
    }
    Ok(out)
}

/// Mean and standard error of i.i.d. (optionally importance-weighted) samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// `weights` are unnormalized importance weights with unit expectation.
    pub fn from_samples(xs: &[f64], weights: Option<&[f64]>) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, se: f64::NAN };
        }
        let vals: Vec<f64> = match weights {
            Some(w) => xs.iter().zip(w).map(|(x, w)| x * w).collect(),
            None => xs.to_vec(),
        };
        let mean = pairwise_sum(&vals) / n as f64;
        if n < 2 {
            return Estimate { mean, se: 0.0 };
        }
        let sq: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&sq) / (n - 1) as f64;
        Estimate {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }
}

/// Ensemble mean and standard error of the divergences at each recorded time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSeries {
    pub times: Vec<f64>,
    pub chi2: Vec<Estimate>,
    pub kl: Vec<Estimate>,
    pub tv: Vec<Estimate>,
    pub n_paths: usize,
}

impl DivergenceSeries {
    pub fn chi2_means(&self) -> Vec<f64> {
        self.chi2.iter().map(|e| e.mean).collect()
    }
}

/// Aggregates per-path series in path order, so the result is independent of scheduling.
pub fn aggregate(paths: &[PathSeries], weights: Option<&[f64]>) -> Result<DivergenceSeries> {
    let first = paths
        .first()
        .ok_or_else(|| Error::config("n_paths", "ensemble is empty"))?;
    let n_times = first.times.len();
    if paths.iter().any(|p| p.times.len() != n_times) {
        return Err(Error::DimensionMismatch("paths recorded on different grids".into()));
    }
    let column = |k: usize, pick: fn(&PathSeries) -> &Vec<f64>| -> Estimate {
        let xs: Vec<f64> = paths.iter().map(|p| pick(p)[k]).collect();
        Estimate::from_samples(&xs, weights)
    };
    Ok(DivergenceSeries {
        times: first.times.clone(),
        chi2: (0..n_times).map(|k| column(k, |p| &p.chi2)).collect(),
        kl: (0..n_times).map(|k| column(k, |p| &p.kl)).collect(),
        tv: (0..n_times).map(|k| column(k, |p| &p.tv)).collect(),
        n_paths: paths.len(),
    })
}

/// Terms of the χ² dynamics `dχ² = drift dt + Cᵀ dI^μ`, also split as
/// `c1 dt + c2ᵀ dI^μ + c3ᵀ dI^ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chi2Dynamics {
    pub gamma: Vec<f64>,
    /// `-(π^ν(Γγ) + V^μ(γ,h)·V^ν(γ,h))`
    pub drift: f64,
    /// `π^μ(γ(h + π^ν(h) - 2π^μ(h)))`, one entry per channel.
    pub martingale: Vec<f64>,
    pub c1: f64,
    pub c2: Vec<f64>,
    pub c3: Vec<f64>,
}

/// χ² dynamics at one instant, with `h` in unit-noise form.
///
/// `c1` carries `-π^ν(Γγ)`: Itô's formula applied to `Σ (π^μ)²/π^ν` gives a
/// negative carré du champ contribution, which is what makes `c1 + c3·(π^μ(h) - π^ν(h))`
/// collapse to `drift`.
pub fn chi2_drift_terms(pi_mu: &[f64], pi_nu: &[f64], model: &HmmModel) -> Result<Chi2Dynamics> {
    let gamma = likelihood_ratio(pi_mu, pi_nu)?;
    let h = model.unit_observation();
    let m = h.channels();
    let energy = expect(pi_nu, &carre_du_champ(model.generator(), &gamma));

    let mut cross = 0.0;
    let mut martingale = Vec::with_capacity(m);
    let mut c2 = Vec::with_capacity(m);
    let mut c3 = Vec::with_capacity(m);
    let mut c1 = -energy;
    for j in 0..m {
        let hj = h.channel(j);
        let mu_h = expect(pi_mu, &hj);
        let nu_h = expect(pi_nu, &hj);
        cross += covariance(pi_mu, &gamma, &hj) * covariance(pi_nu, &gamma, &hj);

        let mut a = 0.0; // π^μ(γ (h - π^μ h)²)
        let mut b = 0.0; // π^μ(γ (h - π^ν h)²)
        let mut c = 0.0; // π^μ(γ (h - π^μ h)(h - π^ν h))
        let mut mg = 0.0;
        let mut two = 0.0;
        let mut three = 0.0;
        for x in 0..pi_mu.len() {
            let w = pi_mu[x] * gamma[x];
            let u = hj[x] - mu_h;
            let v = hj[x] - nu_h;
            a += w * u * u;
            b += w * v * v;
            c += w * u * v;
            mg += w * (hj[x] + nu_h - 2.0 * mu_h);
            two += 2.0 * w * u;
            three -= pi_nu[x] * gamma[x] * gamma[x] * v;
        }
        c1 += a + b - 2.0 * c;
        martingale.push(mg);
        c2.push(two);
        c3.push(three);
    }
    Ok(Chi2Dynamics {
        gamma,
        drift: -(energy + cross),
        martingale,
        c1,
        c2,
        c3,
    })
}

/// Log-linear fit of a decaying series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `-slope` of `ln(series)` against time.
    pub rate: f64,
    pub intercept: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub r_squared: f64,
    pub stderr: f64,
    /// Points in the window and decimation stride used for `stderr`.
    pub n_points: usize,
    pub stride: usize,
}

impl RateFit {
    /// Whether `rate ± k·stderr` covers zero.
    pub fn ci_contains_zero(&self, k: f64) -> bool {
        self.rate.abs() <= k * self.stderr
    }
}

pub const MIN_FIT_POINTS: usize = 10;

struct Ols {
    slope: f64,
    intercept: f64,
    ssr: f64,
    sst: f64,
    sxx: f64,
    n: usize,
}

fn ols(t: &[f64], y: &[f64]) -> Ols {
    let n = t.len();
    let tm = t.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut sst = 0.0;
    for (a, b) in t.iter().zip(y) {
        sxx += (a - tm) * (a - tm);
        sxy += (a - tm) * (b - ym);
        sst += (b - ym) * (b - ym);
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let ssr = t
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    Ols {
        slope,
        intercept,
        ssr,
        sst,
        sxx,
        n,
    }
}

fn lag1_autocorrelation(r: &[f64]) -> f64 {
    let n = r.len();
    let m = r.iter().sum::<f64>() / n as f64;
    let den: f64 = r.iter().map(|v| (v - m) * (v - m)).sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = r.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    num / den
}

/// OLS of `ln(values)` on `times` over `window`; `rate = -slope`.
///
/// The standard error comes from an OLS refit on a decimated copy of the
/// window. The stride doubles until the lag-one autocorrelation of the
/// decimated residuals falls inside `±2/√n`, or until a further doubling
/// would leave fewer than ten points.
pub fn fit_exponential_rate(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<RateFit> {
    let eps = 1e-9 * (1.0 + window.1.abs());
    let idx: Vec<usize> = (0..times.len())
        .filter(|&i| times[i] >= window.0 - eps && times[i] <= window.1 + eps)
        .collect();
    if idx.len() < MIN_FIT_POINTS {
        return Err(Error::WindowTooShort {
            points: idx.len(),
            required: MIN_FIT_POINTS,
        });
    }
    if idx.iter().any(|&i| !(values[i] > 0.0) || !values[i].is_finite()) {
        return Err(Error::NonPositiveSeries);
    }
    let t: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| values[i].ln()).collect();
    let full = ols(&t, &y);
    let resid: Vec<f64> = t
        .iter()
        .zip(&y)
        .map(|(a, b)| b - full.intercept - full.slope * a)
        .collect();

    let mut stride = 1;
    loop {
        let dec: Vec<f64> = resid.iter().step_by(stride).copied().collect();
        let band = 2.0 / (dec.len() as f64).sqrt();
        let next_len = resid.len().div_ceil(stride * 2);
        if lag1_autocorrelation(&dec).abs() <= band || next_len < MIN_FIT_POINTS {
            break;
        }
        stride *= 2;
    }
    let td: Vec<f64> = t.iter().step_by(stride).copied().collect();
    let yd: Vec<f64> = y.iter().step_by(stride).copied().collect();
    let dec = ols(&td, &yd);
    let stderr = (dec.ssr / (dec.n as f64 - 2.0) / dec.sxx).sqrt();
    let r_squared = if full.sst > 0.0 {
        (1.0 - full.ssr / full.sst).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(RateFit {
        rate: -full.slope,
        intercept: full.intercept,
        t_lo: t[0],
        t_hi: *t.last().expect("window is non-empty"),
        r_squared,
        stderr,
        n_points: full.n,
        stride,
    })
}
