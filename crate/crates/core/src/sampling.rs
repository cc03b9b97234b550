//! Initial data from samples: raw and rescaled empirical distributions, and
//! experiments on their rate of convergence in `W`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::model::{EmpiricalMeasure, ModelError, ParticleState, Velocity};
use crate::rng::{gaussian_vec, substream, unit_vec};
use crate::stats::{bootstrap_loglog, mean_stderr, SlopeFit};
use crate::transport::{w_distance, w_distance_general, TransportError};

/// Size of the shared reference sample standing in for `μ`.
pub const REFERENCE_SIZE: usize = 20_000;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("sample weights are not uniform")]
    NonUniform,
    #[error("unknown law '{0}' (expected gaussian, two-point or heavy-tail:q)")]
    UnknownLaw(String),
    #[error("heavy-tail exponent q = {q} must exceed d + 2 = {}", .d + 2)]
    TailTooHeavy { q: f64, d: usize },
    #[error("moment order p = {0} must exceed 2")]
    OrderTooSmall(f64),
    #[error(
        "p = {p} is the boundary 3d/(d-1) for d = {d}: the rate carries an extra log(N+1) factor and no pure power applies"
    )]
    BoundaryOrder { p: f64, d: usize },
    #[error("need at least one N and one replica")]
    EmptyDesign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LawKind {
    /// Centred Gaussian with covariance `I/d`.
    Gaussian,
    /// `½(δ_{e₁} + δ_{−e₁})`.
    TwoPoint,
    /// Density `c·1_{|v|>r}|v|^{−q}`, with `r` fixed by unit energy.
    HeavyTail { q: f64 },
}

/// A law on `R^d` in the Boltzmann sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceLaw {
    pub kind: LawKind,
    pub d: usize,
}

impl SourceLaw {
    pub fn gaussian(d: usize) -> Self {
        Self { kind: LawKind::Gaussian, d }
    }

    pub fn two_point(d: usize) -> Self {
        Self { kind: LawKind::TwoPoint, d }
    }

    pub fn heavy_tail(d: usize, q: f64) -> Result<Self, SamplingError> {
        if !(q > d as f64 + 2.0) {
            return Err(SamplingError::TailTooHeavy { q, d });
        }
        Ok(Self { kind: LawKind::HeavyTail { q }, d })
    }

    /// Heavy tail with finite moments exactly below `p + 0.1`.
    pub fn heavy_tail_for_order(d: usize, p: f64) -> Result<Self, SamplingError> {
        Self::heavy_tail(d, d as f64 + p + 0.1)
    }

    /// Parses `gaussian`, `two-point` or `heavy-tail:<q>`.
    pub fn parse(name: &str, d: usize) -> Result<Self, SamplingError> {
        match name {
            "gaussian" => Ok(Self::gaussian(d)),
            "two-point" => Ok(Self::two_point(d)),
            _ => {
                let q = name
                    .strip_prefix("heavy-tail:")
                    .and_then(|q| q.parse::<f64>().ok())
                    .ok_or_else(|| SamplingError::UnknownLaw(name.to_string()))?;
                Self::heavy_tail(d, q)
            }
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            LawKind::Gaussian => "gaussian".into(),
            LawKind::TwoPoint => "two-point".into(),
            LawKind::HeavyTail { q } => format!("heavy-tail:{q}"),
        }
    }

    /// Supremum of the orders `p` with `⟨|v|^p, μ⟩ < ∞`.
    pub fn moment_order(&self) -> f64 {
        match self.kind {
            LawKind::Gaussian | LawKind::TwoPoint => f64::INFINITY,
            LawKind::HeavyTail { q } => q - self.d as f64,
        }
    }

    fn tail_radius(&self, q: f64) -> f64 {
        let a = q - self.d as f64;
        ((a - 2.0) / a).sqrt()
    }

    /// `⟨|v|^p, μ⟩`, or `None` when infinite.
    pub fn p_moment(&self, p: f64) -> Option<f64> {
        let d = self.d as f64;
        match self.kind {
            LawKind::Gaussian => {
                Some((2.0 / d).powf(p / 2.0) * (ln_gamma((d + p) / 2.0) - ln_gamma(d / 2.0)).exp())
            }
            LawKind::TwoPoint => Some(1.0),
            LawKind::HeavyTail { q } => {
                let a = q - d;
                (p < a).then(|| self.tail_radius(q).powf(p) * a / (a - p))
            }
        }
    }

    /// Variance of `|v|²`, when finite.
    pub fn energy_variance(&self) -> Option<f64> {
        self.p_moment(4.0).map(|m4| m4 - 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Velocity<f64> {
        match self.kind {
            LawKind::Gaussian => {
                let s = 1.0 / (self.d as f64).sqrt();
                Velocity::from_vec(gaussian_vec(self.d, rng).into_iter().map(|x| x * s).collect())
            }
            LawKind::TwoPoint => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Velocity::axis(self.d, 0, sign)
            }
            LawKind::HeavyTail { q } => {
                let a = q - self.d as f64;
                let u: f64 = rng.random();
                let r = self.tail_radius(q) * (1.0 - u).powf(-1.0 / a);
                Velocity::from_vec(unit_vec(self.d, rng).into_iter().map(|x| x * r).collect())
            }
        }
    }
}

/// `μ^N = N⁻¹ Σ δ_{V_i}` with `V_i` i.i.d. from `law`.
pub fn sample_empirical<R: Rng + ?Sized>(law: &SourceLaw, n: usize, rng: &mut R) -> EmpiricalMeasure<f64> {
    let vs = (0..n.max(1)).map(|_| law.sample(rng)).collect();
    EmpiricalMeasure::uniform(vs).expect("law samples are finite")
}

/// Rescaled empirical distribution of a uniform sample.
pub fn rescale(sample: &EmpiricalMeasure<f64>) -> Result<ParticleState<f64>, SamplingError> {
    let atoms = sample.atoms();
    let w0 = atoms.first().map(|a| a.1).ok_or(ModelError::Empty)?;
    if atoms.iter().any(|(_, w)| *w != w0) {
        return Err(SamplingError::NonUniform);
    }
    Ok(rescale_velocities(atoms.iter().map(|(v, _)| v.clone()).collect())?)
}

/// `Ṽ_i = S_N^{−1/2}(V_i − V̄_N)` with `S_N = N⁻¹Σ|V_i − V̄_N|²`. A sample with
/// `S_N = 0` maps to alternating `±e₁` when `N` is even; odd `N` has no
/// element of that form and is an error.
pub fn rescale_velocities(vs: Vec<Velocity<f64>>) -> Result<ParticleState<f64>, ModelError> {
    let n = vs.len();
    if n < 2 {
        return Err(ModelError::TooFewParticles(n));
    }
    let d = vs[0].dim();
    if d < 2 {
        return Err(ModelError::DimensionTooSmall(d));
    }
    let mut mean = vec![0.0; d];
    for v in &vs {
        if v.dim() != d {
            return Err(ModelError::DimensionMismatch(d, v.dim()));
        }
        if !v.is_finite() {
            return Err(ModelError::NonFinite);
        }
        for (m, x) in mean.iter_mut().zip(v.as_slice()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centred: Vec<Vec<f64>> =
        vs.into_iter().map(|v| v.as_slice().iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let spread: f64 = centred.iter().map(|c| crate::model::norm_sq(c)).sum::<f64>() / n as f64;
    let scale = 1.0 / spread.sqrt();
    // Identical inputs leave only rounding noise of order eps·|mean| after
    // centring; treat that as zero spread.
    let floor = 64.0 * f64::EPSILON * crate::model::norm_sq(&mean).sqrt();
    if !(spread.sqrt() > floor) || !scale.is_finite() {
        if n % 2 == 1 {
            return Err(ModelError::DegenerateSpread(n));
        }
        let fallback =
            (0..n).map(|i| Velocity::axis(d, 0, if i % 2 == 0 { 1.0 } else { -1.0 })).collect();
        return ParticleState::new(fallback, 0.0);
    }
    for c in centred.iter_mut() {
        c.iter_mut().for_each(|x| *x *= scale);
    }
    // A second centring pass removes the rounding left by the first.
    let mut resid = vec![0.0; d];
    for c in &centred {
        for (r, x) in resid.iter_mut().zip(c) {
            *r += x;
        }
    }
    resid.iter_mut().for_each(|r| *r /= n as f64);
    for c in centred.iter_mut() {
        for (x, r) in c.iter_mut().zip(&resid) {
            *x -= r;
        }
    }
    ParticleState::new(centred.into_iter().map(Velocity::from_vec).collect(), 0.0)
}

/// Rate exponent `β(p)` of `E W(μ^N, μ) ≲ N^{−β}`: `(p−2)/(p+d)` below
/// `p = 3d/(d−1)` and `1/d` above it.
pub fn theoretical_beta(p: f64, d: usize) -> Result<f64, SamplingError> {
    if !(p > 2.0) {
        return Err(SamplingError::OrderTooSmall(p));
    }
    if d < 2 {
        return Err(ModelError::DimensionTooSmall(d).into());
    }
    let df = d as f64;
    let boundary = 3.0 * df / (df - 1.0);
    if (p - boundary).abs() <= 1e-12 * boundary {
        return Err(SamplingError::BoundaryOrder { p, d });
    }
    Ok(if p < boundary { (p - 2.0) / (p + df) } else { 1.0 / df })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateOptions {
    pub reference_size: usize,
    pub seed: u64,
    pub resamples: usize,
    pub level: f64,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self { reference_size: REFERENCE_SIZE, seed: 0, resamples: 1000, level: 0.95 }
    }
}

/// Outcome of a convergence-rate experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateFit {
    pub ns: Vec<usize>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Per-N replica values of `W`.
    pub values: Vec<Vec<f64>>,
    /// Least-squares slope of `log mean` against `log N`; NaN when degenerate.
    pub fitted_slope: f64,
    /// Bootstrap percentile interval of the slope.
    pub slope_ci: (f64, f64),
    pub fit: Option<SlopeFit>,
    /// Ns left out of the fit (smallest N with mean above 2).
    pub excluded: Vec<usize>,
    /// Every mean is zero, so no power law can be fitted.
    pub degenerate: bool,
    pub unreliable: bool,
}

/// Replica `r` at size `ns[k]` draws `μ^N` from its own stream; the reference
/// is one rescaled sample of `opts.reference_size` atoms shared by all N.
/// Rescaled samples are compared with `W`; raw ones (off the sphere) with
/// its bounded-Lipschitz extension.
pub fn rate_experiment(
    law: &SourceLaw,
    ns: &[usize],
    reps: usize,
    use_rescaled: bool,
    opts: &RateOptions,
) -> Result<RateFit, SamplingError> {
    if ns.is_empty() || reps == 0 {
        return Err(SamplingError::EmptyDesign);
    }
    let mut ref_rng = substream(opts.seed, &[0x7265_6600]);
    let reference = rescale(&sample_empirical(law, opts.reference_size, &mut ref_rng))?.to_measure();
    let jobs: Vec<(usize, usize)> = (0..ns.len()).flat_map(|k| (0..reps).map(move |r| (k, r))).collect();
    let results: Vec<Result<f64, SamplingError>> = jobs
        .par_iter()
        .map(|&(k, r)| {
            let mut rng = substream(opts.seed, &[ns[k] as u64, r as u64]);
            let raw = sample_empirical(law, ns[k], &mut rng);
            if use_rescaled {
                let m = rescale(&raw)?.to_measure();
                Ok(w_distance(&m, &reference)?)
            } else {
                Ok(w_distance_general(&raw, &reference)?)
            }
        })
        .collect();
    let mut values = vec![Vec::with_capacity(reps); ns.len()];
    for ((k, _), res) in jobs.iter().zip(results) {
        values[*k].push(res?);
    }
    let mut fit_rng = substream(opts.seed, &[0x6669_7400]);
    Ok(fit_rate(ns, values, opts.resamples, opts.level, &mut fit_rng))
}

/// Log-log fit of per-N means, leaving out the smallest N when its mean
/// exceeds 2.
pub fn fit_rate<R: Rng + ?Sized>(
    ns: &[usize],
    values: Vec<Vec<f64>>,
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> RateFit {
    let (means, stderrs): (Vec<f64>, Vec<f64>) = values.iter().map(|v| mean_stderr(v)).unzip();
    let degenerate = means.iter().all(|m| *m == 0.0);
    let mut order: Vec<usize> = (0..ns.len()).collect();
    order.sort_by_key(|&k| ns[k]);
    let mut excluded = Vec::new();
    if order.len() > 2 && means[order[0]] > 2.0 {
        excluded.push(ns[order[0]]);
        order.remove(0);
    }
    let x: Vec<f64> = order.iter().map(|&k| ns[k] as f64).collect();
    let groups: Vec<Vec<f64>> = order.iter().map(|&k| values[k].clone()).collect();
    let fit = if degenerate { None } else { bootstrap_loglog(&x, &groups, |g| mean_stderr(g).0, resamples, level, rng) };
    let (fitted_slope, slope_ci, unreliable) = match &fit {
        Some(f) => (f.slope, f.ci, f.unreliable),
        None => (f64::NAN, (f64::NAN, f64::NAN), true),
    };
    RateFit { ns: ns.to_vec(), means, stderrs, values, fitted_slope, slope_ci, fit, excluded, degenerate, unreliable }
}
