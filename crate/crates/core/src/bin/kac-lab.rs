//! Command-line front end for the Kac laboratory.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use num_rational::BigRational;
use serde::Serialize;
use serde_json::{json, Value};

use kac_core::branching::{estimate_ef, moment_check, Environment, DEFAULT_CAP};
use kac_core::experiments::{
    boltzmann_proxy, consistency_experiment, moment_experiment, selftest, uniform_grid, write_outputs,
    ExperimentConfig, RunStamp, Table, Violation,
};
use kac_core::rng::derive_seed;
use kac_core::sampling::{rate_experiment, RateOptions};
use kac_core::signed_measure::{tv_identity_check, FiniteSignedMeasure, MeasureFlow};
use kac_core::simulator::{audit_flat, run, KacPath};
use kac_core::transport::{w_distance, w_distance_general};
use kac_core::{EmpiricalMeasure, TestFunction};

#[derive(Parser)]
#[command(name = "kac-lab", version, about = "Kac process simulation, transport distances and branching estimators")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate Kac paths and write their events.
    Simulate(ExpArgs),
    /// Weighted Wasserstein distance between two measures in JSON.
    Wdist {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Estimate E_st f(v0) and the moment bound on an environment built from Kac paths.
    Branch(BranchArgs),
    /// Convergence rate of rescaled (or raw) empirical measures.
    SamplingRate {
        #[command(flatten)]
        exp: ExpArgs,
        /// Compare raw samples with the bounded-Lipschitz extension.
        #[arg(long)]
        raw: bool,
    },
    /// sup_t W(μ_t^N, μ_t^N') against N.
    Consistency(ExpArgs),
    /// Moment trajectories from a heavy-tailed law.
    Moments(ExpArgs),
    /// Distance to a large-N proxy of the Boltzmann flow after tau.
    BoltzmannProxy(ExpArgs),
    /// Total variation identity on a finite signed measure flow.
    TvCheck {
        #[arg(long)]
        flow: PathBuf,
        /// Step size; overrides the `dt` in the flow file.
        #[arg(long)]
        dt: Option<f64>,
        /// Evaluation time; defaults to the end of the flow.
        #[arg(long)]
        t: Option<f64>,
    },
    /// Run the invariant suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Experiment flags; values in `--config` take precedence, except that
/// `--out` always sets the output directory.
#[derive(Args, Clone, Default)]
struct ExpArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    kernel: Option<String>,
    /// Comma-separated particle numbers.
    #[arg(long, value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    #[arg(long)]
    n_prime: Option<usize>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    law: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    q: Option<Vec<f64>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    save_events: bool,
}

impl ExpArgs {
    fn config(&self, experiment: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig { experiment: experiment.into(), ..Default::default() };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(x) = &self.$f { cfg.$f = x.clone(); })* };
        }
        set!(d, kernel, ns, t, tau, law, q, reps, seed, grid_points, quantile, resamples);
        if self.n_prime.is_some() {
            cfg.n_prime = self.n_prime;
        }
        if self.p.is_some() {
            cfg.p = self.p;
        }
        cfg.output_dir = self.out.clone();
        cfg.save_events = self.save_events;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let Value::Object(over) = file else { bail!("{} is not a JSON object", path.display()) };
            let mut base = serde_json::to_value(&cfg)?;
            for (k, v) in over {
                base[k] = v;
            }
            cfg = serde_json::from_value(base).with_context(|| format!("invalid config {}", path.display()))?;
            if self.out.is_some() {
                cfg.output_dir = self.out.clone();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct BranchArgs {
    /// One or two Kac path files (JSONL); the environment is their average.
    #[arg(long, value_delimiter = ',', required = true)]
    env: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    v0: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    s: f64,
    #[arg(long)]
    t: f64,
    /// `energy`, `one`, `component:<k>` or `harmonic`.
    #[arg(long, default_value = "harmonic")]
    f: String,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(v) if v.is_empty() => ExitCode::SUCCESS,
        Ok(v) => {
            for x in &v {
                eprintln!("violation: {}: {} (seed {}): {}", x.module, x.invariant, x.seed, x.detail);
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Writes outputs when `--out` is given and prints a short summary.
fn finish<R: Serialize>(cfg: &ExperimentConfig, result: &R, curves: &Table, summary: Value) -> Result<()> {
    let stamp = RunStamp::new(cfg);
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, cfg, &stamp, result, curves)?;
    }
    print(&json!({ "config_hash": stamp.config_hash, "git_describe": stamp.git_describe, "seed": stamp.seed, "summary": summary }))
}

fn dispatch(cli: Cli) -> Result<Vec<Violation>> {
    match cli.cmd {
        Cmd::Simulate(a) => simulate(&a.config("simulate")?),
        Cmd::Wdist { a, b } => {
            let (mu, nu) = (read_measure(&a)?, read_measure(&b)?);
            let on_sphere = mu.check_boltzmann_sphere(1e-9).is_ok() && nu.check_boltzmann_sphere(1e-9).is_ok();
            let w = if on_sphere { w_distance(&mu, &nu)? } else { w_distance_general(&mu, &nu)? };
            print(&json!({ "w": w, "on_sphere": on_sphere }))?;
            Ok(Vec::new())
        }
        Cmd::Branch(b) => branch(&b),
        Cmd::SamplingRate { exp, raw } => {
            let cfg = exp.config("sampling-rate")?;
            let opts = RateOptions {
                reference_size: cfg.n_prime.unwrap_or(RateOptions::default().reference_size),
                seed: cfg.seed,
                resamples: cfg.resamples,
                level: cfg.level,
            };
            let fit = rate_experiment(&cfg.source_law()?, &cfg.ns, cfg.reps, !raw, &opts)?;
            let mut t = Table::new(&["N", "replica", "W"]);
            for (k, n) in fit.ns.iter().enumerate() {
                for (r, w) in fit.values[k].iter().enumerate() {
                    t.push(vec![n.to_string(), r.to_string(), w.to_string()]);
                }
            }
            finish(&cfg, &fit, &t, json!({ "slope": fit.fitted_slope, "ci": fit.slope_ci, "means": fit.means }))?;
            let mut v = Vec::new();
            if fit.values.iter().flatten().any(|w| !(0.0..=4.0).contains(w)) && !raw {
                v.push(Violation::new("sampling", "W in [0, 4]", cfg.seed, "value outside range"));
            }
            Ok(v)
        }
        Cmd::Consistency(a) => {
            let cfg = a.config("consistency")?;
            let r = consistency_experiment(&cfg)?;
            finish(&cfg, &r, &r.table(), json!({ "ns": r.ns, "quantiles": r.quantiles, "means": r.means, "exponent": r.exponent() }))?;
            Ok(r.violations)
        }
        Cmd::Moments(a) => {
            let cfg = a.config("moments")?;
            let r = moment_experiment(&cfg)?;
            finish(&cfg, &r, &r.table(), json!({ "qs": r.qs, "audits": r.audits }))?;
            Ok(r.violations)
        }
        Cmd::BoltzmannProxy(a) => {
            let cfg = a.config("boltzmann-proxy")?;
            let r = boltzmann_proxy(&cfg)?;
            finish(&cfg, &r, &r.table(), json!({ "fit_ns": r.fit_ns, "quantiles": r.quantiles, "exponent": r.exponent() }))?;
            Ok(r.violations)
        }
        Cmd::TvCheck { flow, dt, t } => tv_check(&flow, dt, t),
        Cmd::Selftest { seed } => {
            let r = selftest(seed);
            for c in &r.checks {
                println!("{} {}: {} (seed {}) {}", if c.passed { "PASS" } else { "FAIL" }, c.module, c.invariant, c.seed, c.detail);
            }
            Ok(r.violations())
        }
    }
}

fn simulate(cfg: &ExperimentConfig) -> Result<Vec<Violation>> {
    let kernel = cfg.kernel()?;
    let law = cfg.source_law()?;
    let times = uniform_grid(0.0, cfg.t, cfg.grid_points);
    let mut table = Table::new(&["N", "replica", "t", "events", "momentum_drift", "energy_drift"]);
    let mut violations = Vec::new();
    let mut summary = Vec::new();
    for &n in &cfg.ns {
        for r in 0..cfg.reps {
            let mut rng = kac_core::rng::substream(cfg.seed, &[n as u64, r as u64]);
            let initial = kac_core::sampling::rescale(&kac_core::sampling::sample_empirical(&law, n, &mut rng))?;
            let path = run(&initial, &kernel, cfg.t, derive_seed(cfg.seed, &[n as u64, r as u64, 1]))?;
            if let Some(dir) = &cfg.output_dir {
                let dir = dir.join("events");
                fs::create_dir_all(&dir)?;
                path.write_jsonl(BufWriter::new(fs::File::create(dir.join(format!("n{n}-r{r}.jsonl")))?), None)?;
            }
            for (t, flat) in times.iter().zip(path.flats_at(&times)?) {
                let a = audit_flat(&flat, cfg.d);
                let events = path.events.iter().take_while(|e| e.time <= *t).count();
                table.push(vec![n.to_string(), r.to_string(), t.to_string(), events.to_string(), a.momentum.to_string(), a.energy.to_string()]);
            }
            let a = path.final_state().audit();
            if !a.within(1e-8) {
                violations.push(Violation::new("simulator", "conservation", cfg.seed, format!("N = {n}, replica {r}: {a:?}")));
            }
            summary.push(json!({ "n": n, "replica": r, "events": path.events.len(), "audit": a }));
        }
    }
    finish(cfg, &summary, &table, json!({ "runs": summary.len(), "violations": violations.len() }))?;
    Ok(violations)
}

fn read_measure(path: &Path) -> Result<EmpiricalMeasure<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing measure {}", path.display()))
}

fn read_path(path: &Path) -> Result<KacPath> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    KacPath::read_jsonl(BufReader::new(f)).with_context(|| format!("reading path {}", path.display()))
}

fn test_function(name: &str, d: usize) -> Result<TestFunction<f64>> {
    Ok(match name {
        "energy" => TestFunction::energy(),
        "one" => TestFunction::constant(1.0),
        "harmonic" => TestFunction::bounded_harmonic(1.0, (0..d).map(|k| 0.5 / (k + 1) as f64).collect(), 0.3),
        _ => match name.strip_prefix("component:").and_then(|k| k.parse::<usize>().ok()) {
            Some(k) if k < d => TestFunction::component(k),
            _ => bail!("unknown test function {name}"),
        },
    })
}

fn branch(b: &BranchArgs) -> Result<Vec<Violation>> {
    let paths: Vec<KacPath> = b.env.iter().map(|p| read_path(p)).collect::<Result<_>>()?;
    let env = match paths.as_slice() {
        [a] => Environment::from_paths(a, a)?,
        [a, c] => Environment::from_paths(a, c)?,
        _ => bail!("--env takes one or two path files"),
    };
    let kernel = kac_core::kernels::CollisionKernel::hard_sphere(env.dim())?;
    let f = test_function(&b.f, env.dim())?;
    let est = estimate_ef(&env, &kernel, b.s, b.t, &f, &b.v0, b.reps, b.cap, b.seed)?;
    let mc = moment_check(&env, &kernel, &b.v0, b.s, b.t, b.reps, b.cap, derive_seed(b.seed, &[1]))?;
    print(&json!({ "estimate": est, "moment_check": mc, "moment_bound_holds": mc.holds() }))?;
    Ok(Vec::new())
}

fn tv_check(path: &Path, dt: Option<f64>, t: Option<f64>) -> Result<Vec<Violation>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: Value = serde_json::from_str(&text)?;
    let exact = |x: f64| BigRational::from_float(x).with_context(|| format!("non-finite value {x}"));
    let cells = |v: &Value| -> Result<FiniteSignedMeasure<BigRational>> {
        let xs: Vec<f64> = serde_json::from_value(v.clone())?;
        Ok(FiniteSignedMeasure::new(xs.into_iter().map(exact).collect::<Result<_>>()?))
    };
    let mu0 = cells(&raw["mu0"]).context("flow needs mu0: [..]")?;
    let nu = raw["nu"]
        .as_array()
        .context("flow needs nu: [[..], ..]")?
        .iter()
        .map(cells)
        .collect::<Result<Vec<_>>>()?;
    let dt = dt.or_else(|| raw["dt"].as_f64()).context("no step size: pass --dt or put dt in the flow file")?;
    let flow = MeasureFlow::new(mu0, nu, exact(dt)?)?;
    let t = match t {
        Some(t) => exact(t)?,
        None => flow.horizon(),
    };
    let s = tv_identity_check(&flow, &t)?.summary();
    print(&s)?;
    Ok(if s.within_bound {
        Vec::new()
    } else {
        vec![Violation::new("signed_measure", "TV identity bound", 0, format!("discrepancy {} > bound {}", s.discrepancy, s.bound))]
    })
}
