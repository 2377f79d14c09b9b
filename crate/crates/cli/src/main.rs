use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use wonham::experiment::{self, cmd_backward_map, cmd_simulate, cmd_structure, write_report, Check, StructureReport};
use wonham::verify::cmd_verify;
use wonham::{io, ErrorKind, ExperimentConfig};

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "wonham", version, about = "Filter stability experiments for finite-state hidden Markov models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the ensemble for every sweep value and fit decay rates.
    Simulate(RunArgs),
    /// Print ergodicity, observability and Poincaré constants of a model.
    Structure(StructureArgs),
    /// Estimate the backward map and the variance-decay table.
    BackwardMap(RunArgs),
    /// Run the self-check suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Source {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment: example-6.1 or example-6.2.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, env = "WONHAM_OUT_DIR")]
    out: Option<PathBuf>,
    /// Also write the (t, ln mean χ²) pairs used by the rate fit.
    #[arg(long)]
    plot_data: bool,
}

#[derive(Args)]
struct StructureArgs {
    #[command(flatten)]
    source: Source,
    /// Model file (JSON with d, m, A, H, r).
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    model: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Paths per statistical suite; 0 runs the deterministic suites only.
    #[arg(long, default_value_t = 200)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Write verify.json here.
    #[arg(long, env = "WONHAM_OUT_DIR")]
    out: Option<PathBuf>,
}

fn load(source: &Source) -> anyhow::Result<ExperimentConfig> {
    Ok(match (&source.config, &source.preset) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, Some(name)) => experiment::preset(name)?,
        (None, None) => bail!(wonham::Error::config("config", "pass --config <file> or --preset <name>")),
    })
}

fn apply(cfg: &mut ExperimentConfig, args: &RunArgs) -> PathBuf {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.plot_data |= args.plot_data;
    args.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("wonham-out").join(&cfg.name))
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        println!("  [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

fn simulate(args: RunArgs) -> anyhow::Result<u8> {
    let mut cfg = load(&args.source)?;
    let out = apply(&mut cfg, &args);
    let report = cmd_simulate(&cfg, &out)?;
    let path = out.join("report_simulate.json");
    write_report(&path, &report)?;
    println!("{}: {} paths, T = {}, dt = {}", cfg.name, cfg.n_paths, cfg.horizon, cfg.dt);
    for s in &report.sweeps {
        let rate = match (&s.rate_fit, &s.rate_fit_note) {
            (Some(f), _) => format!("rate {:.4} ± {:.4}", f.rate, f.stderr),
            (None, Some(note)) => format!("no rate fit ({note})"),
            (None, None) => String::new(),
        };
        println!(
            "{:>14}  chi2(T) {:.4e} ± {:.1e}  {rate}  inf c(pi_t) {:.4}",
            s.label, s.chi2_final.mean, s.chi2_final.se, s.pi_infimum.c_inf
        );
        print_checks(&s.checks);
    }
    if let Some(c) = &report.rates_increasing {
        print_checks(std::slice::from_ref(c));
    }
    println!("report: {}", path.display());
    Ok(0)
}

fn print_structure(s: &StructureReport) {
    let yes = |b: bool| if b { "yes" } else { "no" };
    println!("states: {}, channels: {}", s.d, s.m);
    println!("ergodic: {}", yes(s.ergodic));
    println!("observable: {} (dim {})", yes(s.observable), s.observable_dim);
    for v in &s.observable_basis {
        println!("  {v:?}");
    }
    if s.invariant_unique {
        println!("invariant measure: {:?}", s.invariant_measure);
    } else {
        println!("invariant measure: not unique (nullity {}), e.g. {:?}", s.invariant_nullity, s.invariant_measure);
    }
    println!("closed classes: {:?}", s.closed_classes);
    match s.classical_pi {
        Some(c) => println!("classical Poincaré constant: {c}"),
        None => println!("classical Poincaré constant: undefined"),
    }
    let b = &s.rate_bounds;
    println!("rate bounds: ({}, {}, {})", b.pairwise, b.invariant_weighted, b.column_minimum);
    let n = &s.small_noise_bounds;
    println!("small-noise bounds: ({}, {})", n.nearest_level, n.all_pairs);
}

fn structure(args: StructureArgs) -> anyhow::Result<u8> {
    let model = match &args.model {
        Some(path) => io::read_model(path, true)?,
        None => load(&args.source)?.base_model()?,
    };
    let report = cmd_structure(&model)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_structure(&report);
    }
    Ok(0)
}

fn backward_map(args: RunArgs) -> anyhow::Result<u8> {
    let mut cfg = load(&args.source)?;
    let out = apply(&mut cfg, &args);
    let report = cmd_backward_map(&cfg, &out)?;
    let path = out.join("report_backward_map.json");
    write_report(&path, &report)?;
    println!("{:>6} {:>12} {:>10} {:>12} {:>10}", "T", "var y0", "se", "var gamma_T", "se");
    for g in &report.diagnostics {
        println!(
            "{:>6} {:>12.4e} {:>10.2e} {:>12.4e} {:>10.2e}",
            g.horizon, g.var_nu_y0.mean, g.var_nu_y0.se, g.var_nu_gamma_t.mean, g.var_nu_gamma_t.se
        );
    }
    print_checks(&report.checks);
    println!("report: {}", path.display());
    Ok(0)
}

fn verify(args: VerifyArgs) -> anyhow::Result<u8> {
    let report = cmd_verify(args.seed, args.size, args.workers);
    println!("deterministic suites:");
    print_checks(&report.deterministic);
    if !report.statistical.is_empty() {
        println!("statistical suites ({} paths):", args.size);
        print_checks(&report.statistical);
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
        write_report(&dir.join("verify.json"), &report)?;
    }
    println!("{:.1} s", report.wall_clock_s);
    Ok(if report.passed() { 0 } else { EXIT_VERIFY })
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<wonham::Error>().map(wonham::Error::kind) {
        Some(ErrorKind::Numerical) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Structure(a) => structure(a),
        Command::BackwardMap(a) => backward_map(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
