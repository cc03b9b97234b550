//! Accuracy of the Kac process as a Boltzmann solver after time `τ`.
//!
//! The stand-in for the Boltzmann flow started from `μ_τ^N` is a run of size
//! `N_ref` from the rescaled resample of `μ_τ^N`; its distance to `μ_t^N` is
//! tabulated on `[τ, T]`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::Velocity;
use crate::rng::{derive_seed, substream};
use crate::sampling::rescale_velocities;
use crate::simulator::run;
use crate::stats::SlopeFit;

use super::consistency::{fit_sup_w, save_events, seeded_path, sup_w_on_grid};
use super::{check_w_range, ExperimentConfig, ExperimentError, Table, Violation};

const RUN: u64 = 3;
const RESAMPLE: u64 = 4;
const FIT: u64 = 0x6669_7401;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyResult {
    pub ns: Vec<usize>,
    pub n_ref: usize,
    pub tau: f64,
    pub times: Vec<f64>,
    /// `curves[k][r][g]` is `W(μ_t^N, μ_t^{N_ref})` at `times[g]`.
    pub curves: Vec<Vec<Vec<f64>>>,
    pub sup_w: Vec<Vec<f64>>,
    /// Sizes entering the rate fit (all but `N_ref`).
    pub fit_ns: Vec<usize>,
    pub quantiles: Vec<f64>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub quantile_fit: Option<SlopeFit>,
    pub mean_fit: Option<SlopeFit>,
    pub violations: Vec<Violation>,
}

impl ProxyResult {
    pub fn exponent(&self) -> Option<f64> {
        self.quantile_fit.as_ref().map(|f| f.slope)
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

pub fn boltzmann_proxy(cfg: &ExperimentConfig) -> Result<ProxyResult, ExperimentError> {
    cfg.validate()?;
    if cfg.tau > cfg.t {
        return Err(ExperimentError::Config(format!("tau {} exceeds T {}", cfg.tau, cfg.t)));
    }
    let kernel = cfg.kernel()?;
    let law = cfg.source_law()?;
    let n_ref = cfg.reference_size();
    let times = cfg.grid(cfg.tau, cfg.t);
    let seed = cfg.seed;
    let d = cfg.d;

    let jobs: Vec<(usize, usize)> = (0..cfg.ns.len()).flat_map(|k| (0..cfg.reps).map(move |r| (k, r))).collect();
    let curves_flat: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(k, r)| {
            let n = cfg.ns[k];
            let path = seeded_path(&law, &kernel, n, 0.0, cfg.t, seed, &[RUN, n as u64, r as u64])?;
            save_events(cfg, &format!("n{n}-r{r}"), &path)?;
            if n == n_ref {
                return sup_w_on_grid(&path, &path, &times);
            }
            let at_tau = path.flat_at(cfg.tau)?;
            let mut rng = substream(seed, &[RESAMPLE, n as u64, r as u64]);
            let vs: Vec<Velocity<f64>> = (0..n_ref)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    Velocity::from_vec(at_tau[i * d..(i + 1) * d].to_vec())
                })
                .collect();
            let mut initial = rescale_velocities(vs)?;
            initial.time = cfg.tau;
            let reference = run(&initial, &kernel, cfg.t, derive_seed(seed, &[RESAMPLE, n as u64, r as u64, 1]))?;
            save_events(cfg, &format!("n{n}-r{r}-reference"), &reference)?;
            sup_w_on_grid(&path, &reference, &times)
        })
        .collect::<Result<_, ExperimentError>>()?;

    let mut curves = vec![Vec::with_capacity(cfg.reps); cfg.ns.len()];
    for (&(k, _), c) in jobs.iter().zip(curves_flat) {
        curves[k].push(c);
    }
    let sup_w: Vec<Vec<f64>> = curves.iter().map(|cs| cs.iter().map(|c| c.iter().fold(0.0, |a: f64, &b| a.max(b))).collect()).collect();

    let mut violations = Vec::new();
    check_w_range(curves.iter().flatten().flatten().copied(), "experiments::proxy", seed, &mut violations);

    let keep: Vec<usize> = (0..cfg.ns.len()).filter(|&k| cfg.ns[k] != n_ref).collect();
    let fit_ns: Vec<usize> = keep.iter().map(|&k| cfg.ns[k]).collect();
    let groups: Vec<Vec<f64>> = keep.iter().map(|&k| sup_w[k].clone()).collect();
    let (quantiles, means, stderrs, quantile_fit, mean_fit) = fit_sup_w(&fit_ns, &groups, cfg, derive_seed(seed, &[FIT]));
    Ok(ProxyResult {
        ns: cfg.ns.clone(),
        n_ref,
        tau: cfg.tau,
        times,
        curves,
        sup_w,
        fit_ns,
        quantiles,
        means,
        stderrs,
        quantile_fit,
        mean_fit,
        violations,
    })
}
