//! Couplings of two linearized Kac processes: from two initial velocities in
//! one environment, and from one velocity in two environments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::CollisionKernel;
use crate::model::{distance, norm_sq};
use crate::rng::substream;

use super::env::JointEnvironment;
use super::{check_kernel, check_times, check_velocity, mean_se, run_joint, BranchError, Environment, Particle};

/// One replica of a coupling run, masses weighted by `1 + |v|^p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingRecord {
    /// Coupled mass; a pair `(u_1, u_2)` counts `2 + |u_1|^p + |u_2|^p`.
    pub coupled: f64,
    /// Uncoupled masses on sides 1 and 2.
    pub uncoupled: [f64; 2],
    /// `⟨1 + |v|^p, Λ^k⟩` for the two marginal processes.
    pub marginal: [f64; 2],
    /// Largest distance within a coupled offspring pair.
    pub max_pair_gap: f64,
    pub events: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingStats {
    pub p: f64,
    /// `|v_1 - v_2|` for an initial-point coupling, 0 otherwise.
    pub initial_gap: f64,
    pub coupled_mass: f64,
    pub uncoupled_mass_1: f64,
    pub uncoupled_mass_2: f64,
    /// Mean and standard error of the total uncoupled mass.
    pub uncoupled_mean: f64,
    pub uncoupled_stderr: f64,
    pub max_pair_gap: f64,
    pub capped: usize,
    pub records: Vec<CouplingRecord>,
}

impl CouplingStats {
    pub fn from_records(p: f64, initial_gap: f64, records: Vec<CouplingRecord>, capped: usize) -> Self {
        let n = records.len().max(1) as f64;
        let total: Vec<f64> = records.iter().map(|r| r.uncoupled[0] + r.uncoupled[1]).collect();
        let (uncoupled_mean, uncoupled_stderr) = mean_se(&total);
        Self {
            p,
            initial_gap,
            coupled_mass: records.iter().map(|r| r.coupled).sum::<f64>() / n,
            uncoupled_mass_1: records.iter().map(|r| r.uncoupled[0]).sum::<f64>() / n,
            uncoupled_mass_2: records.iter().map(|r| r.uncoupled[1]).sum::<f64>() / n,
            uncoupled_mean,
            uncoupled_stderr,
            max_pair_gap: records.iter().map(|r| r.max_pair_gap).fold(0.0, f64::max),
            capped,
            records,
        }
    }

    /// Pools the replicas of two runs with the same `p`.
    pub fn merge(self, other: Self) -> Self {
        let mut records = self.records;
        records.extend(other.records);
        Self::from_records(self.p, self.initial_gap.max(other.initial_gap), records, self.capped + other.capped)
    }

    /// Every coupled pair stayed within the initial distance.
    pub fn contraction_holds(&self) -> bool {
        self.max_pair_gap <= self.initial_gap + 1e-12
    }
}

fn weight(v: &[f64], p: f64) -> f64 {
    1.0 + norm_sq(v).powf(0.5 * p)
}

fn record(ps: &[Particle], p: f64, gap: f64, events: u64) -> CouplingRecord {
    let mut r = CouplingRecord { coupled: 0.0, uncoupled: [0.0; 2], marginal: [0.0; 2], max_pair_gap: gap, events };
    for q in ps {
        match q.class {
            0 if q.is_pair() => {
                let (a, b) = (weight(&q.v, p), weight(&q.v2, p));
                r.coupled += a + b;
                r.marginal[0] += a;
                r.marginal[1] += b;
            }
            0 => {
                let a = weight(&q.v, p);
                r.coupled += a;
                r.marginal[0] += a;
                r.marginal[1] += a;
            }
            k => {
                let a = weight(&q.v, p);
                r.uncoupled[k as usize - 1] += a;
                r.marginal[k as usize - 1] += a;
            }
        }
    }
    r
}

#[allow(clippy::too_many_arguments)]
fn run_coupling(
    joint: &JointEnvironment,
    kernel: &CollisionKernel,
    start: Particle,
    t: f64,
    p: f64,
    n_rep: usize,
    cap: usize,
    seed: u64,
) -> Result<(Vec<CouplingRecord>, usize), BranchError> {
    if cap == 0 {
        return Err(BranchError::BadCap);
    }
    let out: Vec<Option<CouplingRecord>> = (0..n_rep)
        .into_par_iter()
        .map(|r| match run_joint(joint, kernel, 0.0, vec![start.clone()], t, cap, substream(seed, &[r as u64])) {
            Ok((ps, c)) => Ok(Some(record(&ps, p, c.max_pair_gap, c.events[0] + c.events[1]))),
            Err(BranchError::Explosion { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;
    let capped = out.iter().filter(|x| x.is_none()).count();
    Ok((out.into_iter().flatten().collect(), capped))
}

/// Coupling of the processes started from `v1` and `v2` at time 0 in one
/// environment.
#[allow(clippy::too_many_arguments)]
pub fn coupled_initial(
    env: &Environment,
    kernel: &CollisionKernel,
    v1: &[f64],
    v2: &[f64],
    t: f64,
    p: f64,
    n_rep: usize,
    cap: usize,
    seed: u64,
) -> Result<CouplingStats, BranchError> {
    check_kernel(env.dim(), kernel)?;
    check_times(env.horizon(), 0.0, t)?;
    check_velocity(env.dim(), v1)?;
    check_velocity(env.dim(), v2)?;
    let joint = JointEnvironment::single(env);
    let start = Particle { class: 0, sign: 1, v: v1.to_vec(), v2: v2.to_vec() };
    let (records, capped) = run_coupling(&joint, kernel, start, t, p, n_rep, cap, seed)?;
    Ok(CouplingStats::from_records(p, distance(v1, v2), records, capped))
}

/// Coupling of the processes started from `v0` at time 0 in two
/// environments. Atoms are matched by exact velocity.
#[allow(clippy::too_many_arguments)]
pub fn coupled_environment(
    env1: &Environment,
    env2: &Environment,
    kernel: &CollisionKernel,
    v0: &[f64],
    t: f64,
    p: f64,
    n_rep: usize,
    cap: usize,
    seed: u64,
) -> Result<CouplingStats, BranchError> {
    check_kernel(env1.dim(), kernel)?;
    let joint = JointEnvironment::new(env1, env2)?;
    check_times(joint.horizon, 0.0, t)?;
    check_velocity(env1.dim(), v0)?;
    let (records, capped) = run_coupling(&joint, kernel, Particle::single(0, 1, v0.to_vec()), t, p, n_rep, cap, seed)?;
    Ok(CouplingStats::from_records(p, 0.0, records, capped))
}

/// `6 κ t (2 + |v_1|^2 + |v_2|^2) |v_1 - v_2| exp(8 ∫_0^t m_3)`.
pub fn initial_coupling_bound(env: &Environment, kappa: f64, v1: &[f64], v2: &[f64], t: f64) -> f64 {
    6.0 * kappa * t * (2.0 + norm_sq(v1) + norm_sq(v2)) * distance(v1, v2) * (8.0 * env.moment_integral(3.0, 0.0, t)).exp()
}
