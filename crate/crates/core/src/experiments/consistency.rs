//! Consistency of the Kac process: `sup_t W(μ_t^N, μ_t^{N'})` against `N`
//! for independent runs started from rescaled samples of one law.

use std::fs;
use std::io::BufWriter;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::CollisionKernel;
use crate::model::ParticleState;
use crate::rng::{derive_seed, substream};
use crate::sampling::{rescale, sample_empirical, SourceLaw};
use crate::simulator::{run, KacPath};
use crate::stats::{bootstrap_loglog, mean_stderr, quantile, SlopeFit};
use crate::transport::w_distance;

use super::{check_w_range, measure_from_flat, ExperimentConfig, ExperimentError, Table, Violation};

const RUN: u64 = 0;
const REFERENCE: u64 = 1;
const FIT: u64 = 0x6669_7400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub ns: Vec<usize>,
    pub n_prime: usize,
    pub times: Vec<f64>,
    /// `sup_w[k][r]` for `N = ns[k]` and replica `r`.
    pub sup_w: Vec<Vec<f64>>,
    /// `curves[k][r][g]` is `W` at `times[g]`.
    pub curves: Vec<Vec<Vec<f64>>>,
    pub quantile_level: f64,
    /// Per-N quantile of `sup W` at `quantile_level`.
    pub quantiles: Vec<f64>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub quantile_fit: Option<SlopeFit>,
    pub mean_fit: Option<SlopeFit>,
    /// Events per run, `[k][r]`, and per reference run.
    pub events: Vec<Vec<usize>>,
    pub reference_events: Vec<usize>,
    pub violations: Vec<Violation>,
}

impl ConsistencyResult {
    /// Exponent of the quantile fit and its bootstrap interval.
    pub fn exponent(&self) -> Option<(f64, (f64, f64))> {
        self.quantile_fit.as_ref().map(|f| (f.slope, f.ci))
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["N", "replica", "t", "W"]);
        for (k, n) in self.ns.iter().enumerate() {
            for (r, curve) in self.curves[k].iter().enumerate() {
                for (g, w) in curve.iter().enumerate() {
                    t.push(vec![n.to_string(), r.to_string(), self.times[g].to_string(), w.to_string()]);
                }
            }
        }
        t
    }
}

/// Rescaled sample of `n` atoms and a simulated path from it, both drawn
/// from streams labelled by `labels`.
pub(crate) fn seeded_path(
    law: &SourceLaw,
    kernel: &CollisionKernel,
    n: usize,
    start: f64,
    horizon: f64,
    seed: u64,
    labels: &[u64],
) -> Result<KacPath, ExperimentError> {
    let mut rng = substream(seed, labels);
    let mut initial: ParticleState<f64> = rescale(&sample_empirical(law, n, &mut rng))?;
    initial.time = start;
    let mut run_labels = labels.to_vec();
    run_labels.push(1);
    Ok(run(&initial, kernel, horizon, derive_seed(seed, &run_labels))?)
}

/// `W(μ_t^a, μ_t^b)` at each of the sorted `times`.
pub fn sup_w_on_grid(a: &KacPath, b: &KacPath, times: &[f64]) -> Result<Vec<f64>, ExperimentError> {
    let fa = a.flats_at(times)?;
    let fb = b.flats_at(times)?;
    fa.iter()
        .zip(&fb)
        .map(|(x, y)| Ok(w_distance(&measure_from_flat(x, a.dim())?, &measure_from_flat(y, b.dim())?)?))
        .collect()
}

pub(crate) fn save_events(cfg: &ExperimentConfig, name: &str, path: &KacPath) -> Result<(), ExperimentError> {
    if let (true, Some(dir)) = (cfg.save_events, &cfg.output_dir) {
        let dir = dir.join("events");
        fs::create_dir_all(&dir)?;
        path.write_jsonl(BufWriter::new(fs::File::create(dir.join(format!("{name}.jsonl")))?), None)?;
    }
    Ok(())
}

/// Replica `r` pairs a run of size `N` (streams `[0, N, r]`) with the
/// reference run of size `N'` (streams `[1, N', r]`); all runs are
/// independent, including `N = N'`.
pub fn consistency_experiment(cfg: &ExperimentConfig) -> Result<ConsistencyResult, ExperimentError> {
    cfg.validate()?;
    let kernel = cfg.kernel()?;
    let law = cfg.source_law()?;
    let np = cfg.reference_size();
    let times = cfg.grid(0.0, cfg.t);
    let seed = cfg.seed;

    let references: Vec<KacPath> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| seeded_path(&law, &kernel, np, 0.0, cfg.t, seed, &[REFERENCE, np as u64, r as u64]))
        .collect::<Result<_, _>>()?;
    for (r, p) in references.iter().enumerate() {
        save_events(cfg, &format!("reference-r{r}"), p)?;
    }

    let jobs: Vec<(usize, usize)> = (0..cfg.ns.len()).flat_map(|k| (0..cfg.reps).map(move |r| (k, r))).collect();
    let out: Vec<(Vec<f64>, usize)> = jobs
        .par_iter()
        .map(|&(k, r)| {
            let n = cfg.ns[k];
            let p = seeded_path(&law, &kernel, n, 0.0, cfg.t, seed, &[RUN, n as u64, r as u64])?;
            save_events(cfg, &format!("n{n}-r{r}"), &p)?;
            Ok((sup_w_on_grid(&p, &references[r], &times)?, p.events.len()))
        })
        .collect::<Result<_, ExperimentError>>()?;

    let mut curves = vec![Vec::with_capacity(cfg.reps); cfg.ns.len()];
    let mut events = vec![Vec::with_capacity(cfg.reps); cfg.ns.len()];
    for (&(k, _), (c, e)) in jobs.iter().zip(out) {
        curves[k].push(c);
        events[k].push(e);
    }
    let sup_w: Vec<Vec<f64>> = curves.iter().map(|cs| cs.iter().map(|c| c.iter().fold(0.0, |a: f64, &b| a.max(b))).collect()).collect();

    let mut violations = Vec::new();
    check_w_range(curves.iter().flatten().flatten().copied(), "experiments::consistency", seed, &mut violations);

    let (quantiles, means, stderrs, quantile_fit, mean_fit) = fit_sup_w(&cfg.ns, &sup_w, cfg, derive_seed(seed, &[FIT]));
    Ok(ConsistencyResult {
        ns: cfg.ns.clone(),
        n_prime: np,
        times,
        sup_w,
        curves,
        quantile_level: cfg.quantile,
        quantiles,
        means,
        stderrs,
        quantile_fit,
        mean_fit,
        events,
        reference_events: references.iter().map(|p| p.events.len()).collect(),
        violations,
    })
}

type Fits = (Vec<f64>, Vec<f64>, Vec<f64>, Option<SlopeFit>, Option<SlopeFit>);

/// Quantile and mean statistics of `sup W` per N with their log-log
/// bootstrap fits; a fit is `None` when some statistic is zero.
pub(crate) fn fit_sup_w(ns: &[usize], sup_w: &[Vec<f64>], cfg: &ExperimentConfig, fit_seed: u64) -> Fits {
    let level = cfg.quantile;
    let quantiles: Vec<f64> = sup_w.iter().map(|g| quantile(g, level)).collect();
    let (means, stderrs): (Vec<f64>, Vec<f64>) = sup_w.iter().map(|g| mean_stderr(g)).unzip();
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let mut rng = substream(fit_seed, &[0]);
    let qf = bootstrap_loglog(&x, sup_w, |g| quantile(g, level), cfg.resamples, cfg.level, &mut rng);
    let mut rng = substream(fit_seed, &[1]);
    let mf = bootstrap_loglog(&x, sup_w, |g| mean_stderr(g).0, cfg.resamples, cfg.level, &mut rng);
    (quantiles, means, stderrs, qf, mf)
}
