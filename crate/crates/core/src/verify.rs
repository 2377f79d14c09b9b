//! Self-check suites behind `wonham verify`.
//!
//! Deterministic suites are exact up to rounding and must always pass.
//! Statistical suites run ensembles of `size` paths with 3σ tolerances.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{chi2, chi2_drift_terms, fit_exponential_rate, kl, tv};
use crate::dual::{decay_diagnostics, estimate_backward_map, BackwardSpec, EstimatorKind};
use crate::ensemble::EnsembleSpec;
use crate::error::Result;
use crate::experiment::{backward_checks, preset, Check, ExperimentConfig};
use crate::filter::run_exact_noiseless_filter;
use crate::linalg::expm;
use crate::model::{
    carre_du_champ, cyclic_generator, invariant_measure, is_ergodic, observable_space, two_state_generator, Generator,
    HmmModel, ObservationMatrix, Simplex,
};
use crate::poincare::{classical_pi_constant, conditional_pi_constant, energy_form, symmetric_eigensolver};
use crate::sim::{grid, sample_ctmc_path, spawn_rng, StatePath};

const VERIFY_DOMAIN: u64 = 5;

/// Random generator with off-diagonal rates in `[0, 2)`; each rate is zeroed
/// with probability `sparsity`.
pub fn random_generator<R: Rng + ?Sized>(rng: &mut R, d: usize, sparsity: f64) -> Generator {
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i != j && rng.random::<f64>() >= sparsity {
                a[(i, j)] = 2.0 * rng.random::<f64>();
            }
        }
        let s: f64 = (0..d).filter(|&j| j != i).map(|j| a[(i, j)]).sum();
        a[(i, i)] = -s;
    }
    Generator::new(a).expect("rows sum to zero by construction")
}

/// Random point of the open simplex.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Simplex {
    let w: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 0.05).collect();
    Simplex::normalized(w).expect("positive weights")
}

/// Random model with a single observation channel and all rates positive.
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, d: usize, r: f64) -> HmmModel {
    let a = loop {
        let a = random_generator(rng, d, 0.0);
        if (0..d).all(|x| a.exit_rate(x) > 0.1) {
            break a;
        }
    };
    let h: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    HmmModel::new(a, ObservationMatrix::column(&h).expect("finite"), r).expect("valid model")
}

/// Expected noise-free filter of the cyclic example at grid time `t`: the two
/// members of the current level carry the prior odds of the starting level.
pub fn cyclic_level_posterior(prior: &Simplex, path: &StatePath, t: f64) -> Vec<f64> {
    let b = path.x0 % 2;
    let p = prior[b] / (prior[b] + prior[b + 2]);
    let n = path.jump_times.iter().take_while(|&&s| s <= t).count();
    let mut pi = vec![0.0; 4];
    pi[(b + n) % 4] = p;
    pi[(b + n + 2) % 4] = 1.0 - p;
    pi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub size: usize,
    pub deterministic: Vec<Check>,
    pub statistical: Vec<Check>,
    pub wall_clock_s: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.deterministic.iter().chain(&self.statistical).all(|c| c.passed)
    }
}

fn suite(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((ok, detail)) => Check::new(name, ok, detail),
        Err(e) => Check::new(name, false, format!("error: {e}")),
    }
}

fn pi_cycle() -> Result<(bool, String)> {
    let c = classical_pi_constant(&cyclic_generator(), &Simplex::uniform(4))?.constant;
    Ok(((c - 2.0).abs() <= 1e-8, format!("c = {c}")))
}

fn two_state_sweep() -> Result<(bool, String)> {
    let values = [0.0, 1e-9, 0.1, 0.5, 1.0, 3.0, 10.0];
    let levels = [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (-1.0, 1.0), (0.5, 0.5 + 1e-6)];
    let mut n = 0;
    let mut bad = 0;
    for &l12 in &values {
        for &l21 in &values {
            for &(h1, h2) in &levels {
                let a = two_state_generator(l12, l21);
                let h = ObservationMatrix::column(&[h1, h2])?;
                let ergodic_ok = is_ergodic(&a) == (l12 + l21 > 0.0);
                let obs_ok = (observable_space(&a, &h).dim() == 2) == (h1 != h2);
                n += 1;
                bad += usize::from(!(ergodic_ok && obs_ok));
            }
        }
    }
    Ok((bad == 0 && n >= 100, format!("{bad} of {n} instances disagree")))
}

fn counterexample(seed: u64) -> Result<(bool, String)> {
    let model = HmmModel::noiseless(cyclic_generator(), ObservationMatrix::column(&[1.0, 0.0, 1.0, 0.0])?)?;
    let cfg = preset("example-6.1")?;
    let (mu, nu) = cfg.priors()?;
    let (n, dt) = grid(10.0, 1e-3)?;
    let mut rng = spawn_rng(seed, VERIFY_DOMAIN << 48).rng();
    let x0 = rng.random_range(0..4);
    let path = sample_ctmc_path(model.generator(), x0, 10.0, &mut rng);
    let tm = run_exact_noiseless_filter(&mu, &path, &model, n, dt)?;
    let tn = run_exact_noiseless_filter(&nu, &path, &model, n, dt)?;
    let b = x0 % 2;
    let gap = (mu[b] / (mu[b] + mu[b + 2]) - nu[b] / (nu[b] + nu[b + 2])).abs();
    let mut worst: f64 = 0.0;
    for k in 0..=n {
        let t = k as f64 * dt;
        for (traj, prior) in [(&tm, &mu), (&tn, &nu)] {
            let expected = cyclic_level_posterior(prior, &path, t);
            worst = worst.max(traj.at(k).iter().zip(&expected).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max));
        }
        let l1 = 2.0 * tv(tm.at(k), tn.at(k));
        worst = worst.max((l1 - 2.0 * gap).abs());
    }
    Ok((
        worst <= 1e-10,
        format!("{} jumps, max deviation {worst:.2e}", path.n_jumps()),
    ))
}

fn divergence_chain(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..10_000 {
        let d = rng.random_range(2..=8);
        let q = random_simplex(&mut rng, d);
        let mut p: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        p[rng.random_range(0..d)] = 0.0;
        let p = Simplex::normalized(p)?;
        let (t, k, c) = (tv(p.as_slice(), q.as_slice()), kl(p.as_slice(), q.as_slice())?, chi2(p.as_slice(), q.as_slice())?);
        bad += usize::from(!(2.0 * t * t <= k && k <= c));
    }
    Ok((bad == 0, format!("{bad} of 10000 pairs violate 2TV² ≤ KL ≤ χ²")))
}

fn chi2_decomposition(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(2..=5);
        let r = 0.5 + rng.random::<f64>();
        let model = random_model(&mut rng, d, r);
        let (pm, pn) = (random_simplex(&mut rng, d), random_simplex(&mut rng, d));
        let dy = chi2_drift_terms(pm.as_slice(), pn.as_slice(), &model)?;
        let h = model.unit_observation().channel(0);
        let gap = pm.expect(&h) - pn.expect(&h);
        let scale = 1.0 + dy.drift.abs() + dy.martingale[0].abs();
        worst = worst.max((dy.c1 + dy.c3[0] * gap - dy.drift).abs() / scale);
        worst = worst.max((dy.c2[0] + dy.c3[0] - dy.martingale[0]).abs() / scale);
    }
    Ok((worst <= 1e-10, format!("max relative residual {worst:.2e}")))
}

fn carre_du_champ_suite(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a);
    let mut bad = 0;
    for _ in 0..500 {
        let d = rng.random_range(2..=6);
        let a = random_generator(&mut rng, d, 0.3);
        let f: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let c = rng.random::<f64>() * 10.0 - 5.0;
        let g = carre_du_champ(&a, &f);
        let shifted = carre_du_champ(&a, &f.iter().map(|v| v + c).collect::<Vec<_>>());
        let scale = 1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        bad += usize::from(g.iter().any(|v| *v < 0.0));
        bad += usize::from(g.iter().zip(&shifted).any(|(a, b)| (a - b).abs() > 1e-9 * scale));
    }
    Ok((bad == 0, format!("{bad} violations over 500 models")))
}

fn invariant_measure_suite(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1b);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(2..=8);
        let a = random_generator(&mut rng, d, 0.0);
        let m = invariant_measure(&a)?;
        let r = a.apply_adjoint_vec(m.as_slice());
        worst = worst.max(r.iter().fold(0.0f64, |s, v| s.max(v.abs())) / (1.0 + a.matrix().amax()));
    }
    Ok((worst <= 1e-10, format!("max residual |μ̄A| {worst:.2e}")))
}

fn poincare_suite(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e);
    let mut rayleigh = 0;
    let mut scale = 0;
    let mut zero = 0;
    for i in 0..500 {
        let d = rng.random_range(2..=6);
        let a = random_generator(&mut rng, d, if i % 2 == 0 { 0.7 } else { 0.0 });
        let rho = random_simplex(&mut rng, d);
        let c = conditional_pi_constant(&a, &rho)?.constant;
        zero += usize::from((c.abs() <= 1e-9) == is_ergodic(&a));
        if i < 100 {
            let m = energy_form(&a, rho.as_slice());
            for _ in 0..100 {
                let f: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let mean = rho.expect(&f);
                let g: Vec<f64> = f.iter().map(|v| v - mean).collect();
                let var: f64 = (0..d).map(|x| rho[x] * g[x] * g[x]).sum();
                let q: f64 = (0..d).map(|x| (0..d).map(|y| g[x] * m[(x, y)] * g[y]).sum::<f64>()).sum();
                rayleigh += usize::from(q / var < c - 1e-8);
            }
            let s = 0.5 + 3.0 * rng.random::<f64>();
            let cs = conditional_pi_constant(&a.scaled(s), &rho)?.constant;
            scale += usize::from((cs - s * c).abs() > 1e-9 * (1.0 + s * c));
        }
    }
    Ok((
        rayleigh + scale + zero == 0,
        format!("rayleigh {rayleigh}, scaling {scale}, ergodicity mismatches {zero}"),
    ))
}

fn eigensolver_suite(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..=8);
        let b = DMatrix::from_fn(k, k, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let s = &b + b.transpose();
        let e = symmetric_eigensolver(&s)?;
        let v = &e.vectors;
        let back = v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(e.values.clone())) * v.transpose();
        worst = worst.max((back - &s).norm() / s.norm().max(1e-300));
    }
    Ok((worst <= 1e-9, format!("max reconstruction residual {worst:.2e}")))
}

fn rate_fit_suite() -> Result<(bool, String)> {
    let t: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
    let y: Vec<f64> = t.iter().map(|t| 3.0 * (-1.7 * t).exp()).collect();
    let f = fit_exponential_rate(&t, &y, (2.0, 9.0))?;
    Ok(((f.rate - 1.7).abs() <= 1e-10, format!("rate {}", f.rate)))
}

fn ctmc_marginal(seed: u64, size: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3c);
    let a = random_generator(&mut rng, 4, 0.2);
    let t = 1.5;
    let p = expm(&(a.matrix() * t));
    let n = size * 10;
    let mut counts = [0usize; 4];
    let mut r = spawn_rng(seed, VERIFY_DOMAIN << 48 | 1).rng();
    for _ in 0..n {
        counts[sample_ctmc_path(&a, 0, t, &mut r).final_state()] += 1;
    }
    let worst = (0..4)
        .map(|y| {
            let q = p[(0, y)];
            let se = (q * (1.0 - q) / n as f64).sqrt().max(1e-12);
            (counts[y] as f64 / n as f64 - q).abs() / se
        })
        .fold(0.0, f64::max);
    Ok((worst <= 4.0, format!("max |z| = {worst:.2} over {n} paths")))
}

fn ensemble_for(cfg: &ExperimentConfig, model: &HmmModel, group: u64, seed: u64, size: usize, workers: usize) -> Result<crate::ensemble::EnsembleResult> {
    let (mu, nu) = cfg.priors()?;
    EnsembleSpec {
        model,
        mu: &mu,
        nu: &nu,
        horizon: cfg.horizon,
        dt: cfg.dt,
        n_paths: size,
        record_every: cfg.record_every()?,
        seed,
        group,
        workers,
        track_dynamics: true,
        track_poincare: false,
    }
    .run()
}

fn rate_sweep(name: &str, seed: u64, size: usize, workers: usize) -> Result<(bool, String)> {
    let cfg = preset(name)?;
    let mut fits = Vec::new();
    for (g, p) in cfg.sweep_points()?.iter().enumerate() {
        if p.parameter == "sigma2" && p.value == 0.0 {
            continue;
        }
        let r = ensemble_for(&cfg, &p.model, g as u64, seed, size, workers)?;
        fits.push((p.value, fit_exponential_rate(&r.series.times, &r.series.chi2_means(), cfg.fit_window())?));
    }
    let increasing = fits
        .windows(2)
        .all(|w| w[1].1.rate - w[0].1.rate > 2.0 * (w[0].1.stderr.powi(2) + w[1].1.stderr.powi(2)).sqrt());
    let zero_ok = fits.iter().filter(|(v, _)| *v == 0.0).all(|(_, f)| f.ci_contains_zero(3.0));
    let detail = fits.iter().map(|(v, f)| format!("{v}: {:.4} ± {:.4}", f.rate, f.stderr)).collect::<Vec<_>>().join(", ");
    Ok((increasing && zero_ok, detail))
}

fn ensemble_identities(seed: u64, size: usize, workers: usize) -> Vec<Check> {
    let run = || -> Result<Vec<Check>> {
        let cfg = preset("example-6.1")?;
        let model = cfg.base_model()?;
        let (mu, nu) = cfg.priors()?;
        let r = ensemble_for(&cfg, &model, 100, seed, size, workers)?;
        Ok(crate::experiment::ensemble_checks(
            &r,
            &model,
            cfg.dt,
            kl(mu.as_slice(), nu.as_slice())?,
            chi2(mu.as_slice(), nu.as_slice())?,
        ))
    };
    run().unwrap_or_else(|e| vec![Check::new("ensemble-identities", false, format!("error: {e}"))])
}

fn backward_suite(seed: u64, size: usize, workers: usize) -> Vec<Check> {
    let run = || -> Result<Vec<Check>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb4);
        let mut out = Vec::new();
        for i in 0..3 {
            let d = rng.random_range(2..=4);
            let model = random_model(&mut rng, d, 0.7);
            let (mu, nu) = (random_simplex(&mut rng, d), random_simplex(&mut rng, d));
            let spec = BackwardSpec {
                model: &model,
                mu: &mu,
                nu: &nu,
                dt: 1e-3,
                n_paths: size,
                seed,
                group: 10 + i,
                workers,
            };
            let plain = estimate_backward_map(&spec, 2.0, EstimatorKind::Plain)?;
            let rb = estimate_backward_map(&spec, 2.0, EstimatorKind::RaoBlackwell)?;
            for c in backward_checks(&nu, &plain, &rb, &[]).into_iter().take(3) {
                out.push(Check::new(&format!("random-model-{i}-{}", c.name), c.passed, c.detail));
            }
        }
        let cfg = preset("example-6.1")?;
        let (mu, nu) = cfg.priors()?;
        let model = cfg.base_model()?;
        let spec = BackwardSpec {
            model: &model,
            mu: &mu,
            nu: &nu,
            dt: cfg.dt,
            n_paths: size,
            seed,
            group: 20,
            workers,
        };
        let diag = decay_diagnostics(&spec, &cfg.t_list)?;
        let y0 = &diag[0].y0;
        out.extend(backward_checks(&nu, y0, y0, &diag).into_iter().skip(3));
        Ok(out)
    };
    run().unwrap_or_else(|e| vec![Check::new("backward-map", false, format!("error: {e}"))])
}

/// Runs every deterministic suite, then the statistical suites when `size > 0`.
pub fn cmd_verify(seed: u64, size: usize, workers: usize) -> VerifyReport {
    let start = Instant::now();
    let deterministic = vec![
        suite("poincare-constant-cycle", pi_cycle),
        suite("two-state-criteria", two_state_sweep),
        suite("noiseless-counterexample", || counterexample(seed)),
        suite("divergence-chain", || divergence_chain(seed)),
        suite("chi2-dynamics-decomposition", || chi2_decomposition(seed)),
        suite("carre-du-champ", || carre_du_champ_suite(seed)),
        suite("invariant-measure", || invariant_measure_suite(seed)),
        suite("poincare-properties", || poincare_suite(seed)),
        suite("eigensolver", || eigensolver_suite(seed)),
        suite("rate-fit", rate_fit_suite),
    ];
    let mut statistical = Vec::new();
    if size > 0 {
        statistical.push(suite("ctmc-marginal", || ctmc_marginal(seed, size)));
        statistical.push(suite("rates-increasing-in-noise", || rate_sweep("example-6.1", seed, size, workers)));
        statistical.push(suite("rates-increasing-in-signal", || rate_sweep("example-6.2", seed, size, workers)));
        statistical.extend(ensemble_identities(seed, size, workers));
        statistical.extend(backward_suite(seed, size, workers));
    }
    VerifyReport {
        seed,
        size,
        deterministic,
        statistical,
        wall_clock_s: start.elapsed().as_secs_f64(),
    }
}
