//! Monte Carlo checks of the simulator and filter against closed-form answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wonham::divergence::{chi2, fit_exponential_rate, tv};
use wonham::filter::run_filter;
use wonham::linalg::expm;
use wonham::model::{cyclic_generator, invariant_measure, Generator, HmmModel, ObservationMatrix, Simplex};
use wonham::poincare::classical_pi_constant;
use wonham::sim::{sample_ctmc_path, simulate, spawn_rng, ObservationPath};
use wonham::verify::{random_generator, random_model, random_simplex};

fn coarsen(obs: &ObservationPath, factor: usize) -> ObservationPath {
    let n = obs.n_steps / factor;
    let m = obs.channels;
    let mut increments = vec![0.0; n * m];
    for k in 0..obs.n_steps {
        for j in 0..m {
            increments[(k / factor) * m + j] += obs.increment(k)[j];
        }
    }
    ObservationPath {
        dt: obs.dt * factor as f64,
        n_steps: n,
        channels: m,
        increments,
    }
}

#[test]
fn ctmc_marginals_match_matrix_exponential() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..3 {
        let a = random_generator(&mut rng, 4, 0.25);
        let t = 0.7 + trial as f64;
        let p = expm(&(a.matrix() * t));
        let n = 20_000;
        let mut counts = [0usize; 4];
        let mut r = spawn_rng(7, trial).rng();
        for _ in 0..n {
            counts[sample_ctmc_path(&a, 1, t, &mut r).final_state()] += 1;
        }
        for y in 0..4 {
            let q = p[(1, y)];
            let se = (q * (1.0 - q) / n as f64).sqrt().max(1e-9);
            let z = (counts[y] as f64 / n as f64 - q) / se;
            assert!(z.abs() <= 4.0, "trial {trial} state {y}: z = {z}");
        }
    }
}

#[test]
fn separate_streams_are_uncorrelated() {
    let mut a = spawn_rng(42, 0).rng();
    let mut b = spawn_rng(42, 1).rng();
    let n = 10_000;
    let xs: Vec<f64> = (0..n).map(|_| a.random()).collect();
    let ys: Vec<f64> = (0..n).map(|_| b.random()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n as f64, ys.iter().sum::<f64>() / n as f64);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let corr = cov / (vx * vy).sqrt();
    assert!(corr.abs() <= 3.0 / (n as f64).sqrt(), "corr = {corr}");
}

#[test]
fn classical_decay_is_at_least_the_poincare_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut generators: Vec<Generator> = vec![cyclic_generator()];
    generators.extend((0..3).map(|_| random_generator(&mut rng, 4, 0.0)));
    for a in generators {
        let mu_bar = invariant_measure(&a).unwrap();
        let c = classical_pi_constant(&a, &mu_bar).unwrap().constant;
        let model = HmmModel::new(a, ObservationMatrix::column(&[0.0; 4]).unwrap(), 1.0).unwrap();
        let mu = random_simplex(&mut rng, 4);
        let horizon = 6.0 / c;
        let dt = 1e-3 / c;
        let (_, obs) = simulate(&model, &mu, horizon, dt, spawn_rng(1, 0)).unwrap();
        let traj = run_filter(&mu, &obs, &model).unwrap();
        let times: Vec<f64> = (0..=traj.n_steps).map(|k| traj.time(k)).collect();
        let series: Vec<f64> = (0..=traj.n_steps).map(|k| chi2(traj.at(k), mu_bar.as_slice()).unwrap()).collect();
        let fit = fit_exponential_rate(&times, &series, (0.3 * horizon, horizon)).unwrap();
        assert!(fit.rate >= 0.95 * c, "rate {} below constant {c}", fit.rate);
    }
}

#[test]
fn euler_step_is_first_order_on_a_frozen_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_model(&mut rng, 3, 1.0);
    let mu = Simplex::new(vec![0.6, 0.3, 0.1]).unwrap();
    let fine_dt = 1e-3 / 8.0;
    let (path, _) = simulate(&model, &mu, 2.0, fine_dt, spawn_rng(9, 0)).unwrap();
    // Increments of the observation drift alone: a fixed, noise-free path.
    let drift = wonham::sim::observation_drift(&path, model.unit_observation(), 16_000, fine_dt);
    let frozen = ObservationPath {
        dt: fine_dt,
        n_steps: 16_000,
        channels: 1,
        increments: drift,
    };
    let end = |factor: usize| {
        let t = run_filter(&mu, &coarsen(&frozen, factor), &model).unwrap();
        t.last().to_vec()
    };
    let (p4, p2, p1) = (end(8), end(4), end(2));
    let ratio = tv(&p4, &p2) / tv(&p2, &p1);
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
}

