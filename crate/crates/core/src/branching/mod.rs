//! The linearized Kac process: signed branching particles in a
//! measure-valued environment `ρ_t`, its couplings, and Monte Carlo
//! estimators of `E_{st} f(v) = E_{(s,v)} ⟨f, Λ̃_t⟩`.
//!
//! A particle at `v` with sign `±` branches at rate
//! `2 ρ_t(dv_*) B(v - v_*, dσ)` into `v'` and `v'_*` with the same sign and
//! `v_*` with the opposite sign. Branch times are generated by thinning: the
//! per-particle rate `2 Σ_j w_j |v - x_j|` is bounded by
//! `2 Σ_j w_j (|v| + |x_j|)`, which sums over the population to
//! `2 (W Σ_a |v_a| + S n)` with `W = Σ_j w_j`, `S = Σ_j w_j |x_j|`.

mod coupling;
mod env;
mod representation;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{sample_sigma_into, CollisionKernel};
use crate::model::{collide_into, distance, norm_sq, ModelError, TestFunction, Velocity};
use crate::rng::{exponential, substream};
use crate::stats::mean_stderr;
use crate::sumtree::SumTree;

pub use coupling::{coupled_environment, coupled_initial, initial_coupling_bound, CouplingRecord, CouplingStats};
pub use env::{difference_integral, weighted_mass, Environment, SKP_TOL};
pub use representation::{verify_representation, RepresentationOptions, RepresentationReport};

use env::{JointEnvironment, JointPiece};

/// Default population cap per replica.
pub const DEFAULT_CAP: usize = 100_000;
/// Fraction of capped replicas above which an estimate is unreliable.
pub const CAPPED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum BranchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("environment: {0}")]
    Environment(String),
    #[error("environment piece {piece} violates the mass/energy condition: mass {mass}, energy {energy}")]
    Skp { piece: usize, mass: f64, energy: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("times must satisfy 0 <= s <= t <= horizon, got s={s}, t={t}, horizon={horizon}")]
    Times { s: f64, t: f64, horizon: f64 },
    #[error("population cap must be at least 1")]
    BadCap,
    #[error("population exceeded cap {cap} at time {time} ({size} particles)")]
    Explosion { cap: usize, time: f64, size: usize },
    #[error("{0}")]
    Invalid(String),
}

/// A signed particle system at time `time`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedPopulation {
    pub atoms: Vec<(Velocity<f64>, i8)>,
    pub time: f64,
    /// Branch events of positive and negative parents.
    pub events: [u64; 2],
}

impl SignedPopulation {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `(|Λ_t^+|, |Λ_t^-|)`.
    pub fn counts(&self) -> (usize, usize) {
        let pos = self.atoms.iter().filter(|a| a.1 > 0).count();
        (pos, self.atoms.len() - pos)
    }

    /// `⟨f, Λ̃_t⟩ = Σ sign f(v)`.
    pub fn signed_integral<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.atoms.iter().map(|(v, s)| *s as f64 * f(v.as_slice())).sum()
    }

    /// `⟨f, Λ_t⟩`, signs forgotten.
    pub fn unsigned_integral<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.atoms.iter().map(|(v, _)| f(v.as_slice())).sum()
    }
}

/// Particle class: 0 is coupled, 1 and 2 live in environment 1 or 2 (or on
/// side 1 or 2 of an initial-point coupling).
#[derive(Clone, Debug)]
pub(crate) struct Particle {
    pub class: u8,
    pub sign: i8,
    pub v: Vec<f64>,
    /// Second velocity of a coupled pair; empty otherwise.
    pub v2: Vec<f64>,
}

impl Particle {
    fn single(class: u8, sign: i8, v: Vec<f64>) -> Self {
        Self { class, sign, v, v2: Vec::new() }
    }

    fn is_pair(&self) -> bool {
        !self.v2.is_empty()
    }

    fn speed_weight(&self) -> f64 {
        norm_sq(&self.v).sqrt() + if self.is_pair() { norm_sq(&self.v2).sqrt() } else { 0.0 }
    }

    fn count_weight(&self) -> f64 {
        if self.is_pair() {
            2.0
        } else {
            1.0
        }
    }
}

/// Audit counters kept by the engine.
#[derive(Clone, Debug, Default)]
pub(crate) struct Counters {
    pub events: [u64; 2],
    pub proposals: u64,
    /// Largest `|u_1' - u_2'|` over coupled offspring pairs.
    pub max_pair_gap: f64,
}

/// Branching engine over a joint environment.
pub(crate) struct Engine<'a, R> {
    env: &'a JointEnvironment,
    kernel: &'a CollisionKernel,
    rng: R,
    pub particles: Vec<Particle>,
    speeds: SumTree,
    counts: SumTree,
    pub time: f64,
    cap: usize,
    pub counters: Counters,
    a: Vec<f64>,
    b: Vec<f64>,
    a2: Vec<f64>,
    b2: Vec<f64>,
    sigma: Vec<f64>,
}

impl<'a, R: Rng> Engine<'a, R> {
    pub fn new(
        env: &'a JointEnvironment,
        kernel: &'a CollisionKernel,
        start: f64,
        initial: Vec<Particle>,
        cap: usize,
        rng: R,
    ) -> Self {
        let d = env.d;
        let mut speeds = SumTree::with_capacity(16);
        let mut counts = SumTree::with_capacity(16);
        for p in &initial {
            speeds.push(p.speed_weight());
            counts.push(p.count_weight());
        }
        Self {
            env,
            kernel,
            rng,
            particles: initial,
            speeds,
            counts,
            time: start,
            cap,
            counters: Counters { max_pair_gap: 0.0, ..Counters::default() },
            a: vec![0.0; d],
            b: vec![0.0; d],
            a2: vec![0.0; d],
            b2: vec![0.0; d],
            sigma: vec![0.0; d],
        }
    }

    fn push(&mut self, p: Particle) {
        self.speeds.push(p.speed_weight());
        self.counts.push(p.count_weight());
        self.particles.push(p);
    }

    fn replace(&mut self, i: usize, p: Particle) {
        self.speeds.set(i, p.speed_weight());
        self.counts.set(i, p.count_weight());
        self.particles[i] = p;
    }

    /// Runs to time `t`.
    pub fn run(&mut self, t: f64) -> Result<(), BranchError> {
        let mut k = self.env.piece_index(self.time);
        while self.time < t {
            let piece = &self.env.pieces[k];
            let end = piece.end.min(t);
            let rate = 2.0 * (piece.mass() * self.speeds.total() + piece.speed_mass() * self.counts.total());
            let next = if rate > 0.0 { self.time + exponential(rate, &mut self.rng) } else { f64::INFINITY };
            if next >= end {
                self.time = end;
                k += 1;
                if k >= self.env.pieces.len() {
                    break;
                }
                continue;
            }
            self.time = next;
            self.propose(piece)?;
        }
        self.time = t;
        Ok(())
    }

    fn propose(&mut self, piece: &JointPiece) -> Result<(), BranchError> {
        self.counters.proposals += 1;
        let d = self.env.d;
        let by_speed = piece.mass() * self.speeds.total();
        let total = by_speed + piece.speed_mass() * self.counts.total();
        let (i, j) = if self.rng.random::<f64>() * total < by_speed {
            (self.speeds.sample(self.rng.random()), piece.pick_by_mass(self.rng.random()))
        } else {
            (self.counts.sample(self.rng.random()), piece.pick_by_speed(self.rng.random()))
        };
        let x = &piece.x[j * d..(j + 1) * d];
        let xs = piece.speed[j];
        let p = &self.particles[i];
        if p.is_pair() {
            let r1 = distance(&p.v, x);
            let r2 = distance(&p.v2, x);
            let bound = norm_sq(&p.v).sqrt() + norm_sq(&p.v2).sqrt() + 2.0 * xs;
            if self.rng.random::<f64>() * bound >= r1 + r2 {
                return Ok(());
            }
            self.pair_branch(i, x.to_vec(), r1, r2);
        } else {
            let r = distance(&p.v, x);
            let bound = norm_sq(&p.v).sqrt() + xs;
            if self.rng.random::<f64>() * bound >= r {
                return Ok(());
            }
            let class = p.class;
            if class != 0 {
                let w = piece.w[class as usize - 1][j];
                if w < piece.wbar[j] && self.rng.random::<f64>() * piece.wbar[j] >= w {
                    return Ok(());
                }
            }
            let coupled = class != 0 || {
                let lo = piece.w[0][j].min(piece.w[1][j]);
                lo >= piece.wbar[j] || self.rng.random::<f64>() * piece.wbar[j] < lo
            };
            let side = if class != 0 {
                class
            } else if coupled {
                0
            } else if piece.w[0][j] > piece.w[1][j] {
                1
            } else {
                2
            };
            self.single_branch(i, x.to_vec(), r, side);
        }
        if self.particles.len() > self.cap {
            return Err(BranchError::Explosion { cap: self.cap, time: self.time, size: self.particles.len() });
        }
        Ok(())
    }

    fn draw_sigma(&mut self, v: &[f64], x: &[f64], r: f64) {
        let u: Vec<f64> = v.iter().zip(x).map(|(a, b)| (a - b) / r).collect();
        sample_sigma_into(self.kernel, &u, &mut self.rng, &mut self.sigma);
    }

    /// Branching of a single-velocity particle at environment atom `x`. The
    /// offspring go to `side`; when the parent was coupled and `side` is 1
    /// or 2 a copy of the parent is put on the other side.
    fn single_branch(&mut self, i: usize, x: Vec<f64>, r: f64, side: u8) {
        let parent = self.particles[i].clone();
        self.counters.events[(parent.sign < 0) as usize] += 1;
        self.draw_sigma(&parent.v, &x, r);
        collide_into(&parent.v, &x, &self.sigma, &mut self.a, &mut self.b);
        let (a, b) = (self.a.clone(), self.b.clone());
        self.replace(i, Particle::single(side, parent.sign, a));
        self.push(Particle::single(side, parent.sign, b));
        self.push(Particle::single(side, -parent.sign, x));
        if parent.class == 0 && side != 0 {
            self.push(Particle::single(3 - side, parent.sign, parent.v));
        }
    }

    /// Proposal for a coupled pair `(u_1, u_2)` at `x`. The angular draw is
    /// from `(B_1 + B_2)/(|B_1| + |B_2|)`, then split into the common part
    /// `B_1 ∧ B_2` and the two excesses.
    fn pair_branch(&mut self, i: usize, x: Vec<f64>, r1: f64, r2: f64) {
        let parent = self.particles[i].clone();
        let first = self.rng.random::<f64>() * (r1 + r2) < r1;
        if first {
            self.draw_sigma(&parent.v, &x, r1);
        } else {
            self.draw_sigma(&parent.v2, &x, r2);
        }
        let dens = |v: &[f64], r: f64, sigma: &[f64], k: &CollisionKernel| -> f64 {
            if r == 0.0 {
                return 0.0;
            }
            if k.d == 3 {
                return r;
            }
            let c = v.iter().zip(&x).zip(sigma).map(|((a, b), s)| (a - b) * s).sum::<f64>() / r;
            r * k.angular_density(c)
        };
        let b1 = dens(&parent.v, r1, &self.sigma, self.kernel);
        let b2 = dens(&parent.v2, r2, &self.sigma, self.kernel);
        // The mixture overcounts by `B_1 ∧ B_2`; that share is rejected.
        let u: f64 = self.rng.random::<f64>() * (b1 + b2);
        if u >= b1.max(b2) {
            return;
        }
        let s = parent.sign;
        self.counters.events[(s < 0) as usize] += 1;
        if u < b1.min(b2) {
            collide_into(&parent.v, &x, &self.sigma, &mut self.a, &mut self.b);
            collide_into(&parent.v2, &x, &self.sigma, &mut self.a2, &mut self.b2);
            let gap = distance(&self.a, &self.a2).max(distance(&self.b, &self.b2));
            self.counters.max_pair_gap = self.counters.max_pair_gap.max(gap);
            let (a, b, a2, b2) = (self.a.clone(), self.b.clone(), self.a2.clone(), self.b2.clone());
            self.replace(i, Particle { class: 0, sign: s, v: a, v2: a2 });
            self.push(Particle { class: 0, sign: s, v: b, v2: b2 });
            self.push(Particle { class: 0, sign: -s, v: x.clone(), v2: x });
        } else {
            let (side, moving, staying) = if b1 > b2 { (1u8, &parent.v, &parent.v2) } else { (2u8, &parent.v2, &parent.v) };
            collide_into(moving, &x, &self.sigma, &mut self.a, &mut self.b);
            let (a, b) = (self.a.clone(), self.b.clone());
            self.replace(i, Particle::single(side, s, a));
            self.push(Particle::single(side, s, b));
            self.push(Particle::single(side, -s, x));
            self.push(Particle::single(3 - side, s, staying.clone()));
        }
    }
}

fn check_times(env_horizon: f64, s: f64, t: f64) -> Result<(), BranchError> {
    if !(0.0 <= s && s <= t && t <= env_horizon) {
        return Err(BranchError::Times { s, t, horizon: env_horizon });
    }
    Ok(())
}

fn check_velocity(d: usize, v: &[f64]) -> Result<(), BranchError> {
    if v.len() != d {
        return Err(BranchError::Dimension { expected: d, got: v.len() });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(BranchError::Model(ModelError::NonFinite));
    }
    Ok(())
}

fn check_kernel(env_d: usize, kernel: &CollisionKernel) -> Result<(), BranchError> {
    if kernel.d != env_d {
        return Err(BranchError::Dimension { expected: env_d, got: kernel.d });
    }
    Ok(())
}

pub(crate) fn run_joint<R: Rng>(
    env: &JointEnvironment,
    kernel: &CollisionKernel,
    s: f64,
    initial: Vec<Particle>,
    t: f64,
    cap: usize,
    rng: R,
) -> Result<(Vec<Particle>, Counters), BranchError> {
    let mut e = Engine::new(env, kernel, s, initial, cap, rng);
    e.run(t)?;
    Ok((e.particles, e.counters))
}

/// Runs the linearized Kac process from `(v0, sign0)` at time `s` to `t`.
#[allow(clippy::too_many_arguments)]
pub fn branch_run<R: Rng>(
    env: &Environment,
    kernel: &CollisionKernel,
    s: f64,
    v0: &[f64],
    sign0: i8,
    t: f64,
    cap: usize,
    rng: R,
) -> Result<SignedPopulation, BranchError> {
    let joint = JointEnvironment::single(env);
    branch_run_joint(&joint, kernel, s, v0, sign0, t, cap, rng)
}

#[allow(clippy::too_many_arguments)]
fn branch_run_joint<R: Rng>(
    joint: &JointEnvironment,
    kernel: &CollisionKernel,
    s: f64,
    v0: &[f64],
    sign0: i8,
    t: f64,
    cap: usize,
    rng: R,
) -> Result<SignedPopulation, BranchError> {
    check_kernel(joint.d, kernel)?;
    check_times(joint.horizon, s, t)?;
    check_velocity(joint.d, v0)?;
    if cap == 0 {
        return Err(BranchError::BadCap);
    }
    if sign0 != 1 && sign0 != -1 {
        return Err(BranchError::Invalid(format!("sign must be ±1, got {sign0}")));
    }
    let (ps, c) = run_joint(joint, kernel, s, vec![Particle::single(1, sign0, v0.to_vec())], t, cap, rng)?;
    Ok(SignedPopulation {
        atoms: ps.into_iter().map(|p| (Velocity::from_vec(p.v), p.sign)).collect(),
        time: t,
        events: c.events,
    })
}

/// Monte Carlo estimate of `E_{st} f(v_0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub reps: usize,
    /// Replicas stopped by the population cap, excluded from the mean.
    pub capped: usize,
    pub unreliable: bool,
}

impl EfEstimate {
    fn from_samples(xs: &[f64], capped: usize) -> Self {
        let reps = xs.len() + capped;
        let (mean, stderr) = if xs.is_empty() { (f64::NAN, f64::NAN) } else { mean_stderr(xs) };
        Self { mean, stderr, reps, capped, unreliable: capped as f64 > CAPPED_FRACTION * reps as f64 || xs.is_empty() }
    }
}

/// Replica values of `g(population)` over `n_rep` independent runs, replica
/// `r` using `substream(seed, [r])`. Capped replicas give `None`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn replicate<T, G>(
    joint: &JointEnvironment,
    kernel: &CollisionKernel,
    s: f64,
    v0: &[f64],
    t: f64,
    n_rep: usize,
    cap: usize,
    seed: u64,
    g: G,
) -> Result<Vec<Option<T>>, BranchError>
where
    T: Send,
    G: Fn(&SignedPopulation) -> T + Sync,
{
    (0..n_rep)
        .into_par_iter()
        .map(|r| match branch_run_joint(joint, kernel, s, v0, 1, t, cap, substream(seed, &[r as u64])) {
            Ok(p) => Ok(Some(g(&p))),
            Err(BranchError::Explosion { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

fn split_capped<T>(xs: Vec<Option<T>>) -> (Vec<T>, usize) {
    let capped = xs.iter().filter(|x| x.is_none()).count();
    (xs.into_iter().flatten().collect(), capped)
}

/// `E_{st} f(v_0)` as the replica mean of `⟨f, Λ̃_t⟩`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_ef(
    env: &Environment,
    kernel: &CollisionKernel,
    s: f64,
    t: f64,
    f: &TestFunction<f64>,
    v0: &[f64],
    n_rep: usize,
    cap: usize,
    seed: u64,
) -> Result<EfEstimate, BranchError> {
    let joint = JointEnvironment::single(env);
    estimate_ef_joint(&joint, kernel, s, t, f, v0, n_rep, cap, seed)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn estimate_ef_joint(
    joint: &JointEnvironment,
    kernel: &CollisionKernel,
    s: f64,
    t: f64,
    f: &TestFunction<f64>,
    v0: &[f64],
    n_rep: usize,
    cap: usize,
    seed: u64,
) -> Result<EfEstimate, BranchError> {
    if s == t && n_rep > 0 {
        check_times(joint.horizon, s, t)?;
        check_velocity(joint.d, v0)?;
        return Ok(EfEstimate { mean: f.eval(v0), stderr: 0.0, reps: n_rep, capped: 0, unreliable: false });
    }
    let xs = replicate(joint, kernel, s, v0, t, n_rep, cap, seed, |p| p.signed_integral(|v| f.eval(v)))?;
    let (xs, capped) = split_capped(xs);
    Ok(EfEstimate::from_samples(&xs, capped))
}

/// Empirical side of the moment bound at `p = 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    /// Replica mean and standard error of `⟨1 + |v|^2, Λ_t⟩`.
    pub mean: f64,
    pub stderr: f64,
    /// Mean particle count.
    pub mean_count: f64,
    /// `(1 + |v_0|^2) exp(8 ∫ m_3)`.
    pub bound: f64,
    pub reps: usize,
    pub capped: usize,
}

impl MomentCheck {
    /// The mean does not exceed the bound by more than three standard
    /// errors.
    pub fn holds(&self) -> bool {
        self.mean <= self.bound + 3.0 * self.stderr
    }
}

#[allow(clippy::too_many_arguments)]
pub fn moment_check(
    env: &Environment,
    kernel: &CollisionKernel,
    v0: &[f64],
    s: f64,
    t: f64,
    n_rep: usize,
    cap: usize,
    seed: u64,
) -> Result<MomentCheck, BranchError> {
    let joint = JointEnvironment::single(env);
    let xs = replicate(&joint, kernel, s, v0, t, n_rep, cap, seed, |p| {
        (p.unsigned_integral(|v| 1.0 + norm_sq(v)), p.len() as f64)
    })?;
    let (xs, capped) = split_capped(xs);
    let vals: Vec<f64> = xs.iter().map(|x| x.0).collect();
    let (mean, stderr) = mean_se(&vals);
    Ok(MomentCheck {
        mean,
        stderr,
        mean_count: xs.iter().map(|x| x.1).sum::<f64>() / xs.len().max(1) as f64,
        bound: env.moment_envelope(v0, s, t),
        reps: n_rep,
        capped,
    })
}

/// Nested estimate of `E_{st} E_{tu} f(v)` against the direct `E_{su} f(v)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemigroupCheck {
    pub nested: f64,
    pub nested_stderr: f64,
    pub direct: f64,
    pub direct_stderr: f64,
    pub z: f64,
    pub capped: usize,
}

/// Each of `outer` runs from `(s, v)` to `t` is followed by `inner` runs
/// from every atom to `u`, giving one unbiased sample of
/// `Σ sign E_{tu} f(atom)`.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_check(
    env: &Environment,
    kernel: &CollisionKernel,
    f: &TestFunction<f64>,
    v: &[f64],
    times: (f64, f64, f64),
    outer: usize,
    inner: usize,
    cap: usize,
    seed: u64,
) -> Result<SemigroupCheck, BranchError> {
    let (s, t, u) = times;
    check_times(env.horizon(), s, t)?;
    check_times(env.horizon(), t, u)?;
    let joint = JointEnvironment::single(env);
    let nested: Vec<Option<f64>> = (0..outer)
        .into_par_iter()
        .map(|r| {
            let pop = match branch_run_joint(&joint, kernel, s, v, 1, t, cap, substream(seed, &[0, r as u64])) {
                Ok(p) => p,
                Err(BranchError::Explosion { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut acc = 0.0;
            for (a, (w, sign)) in pop.atoms.iter().enumerate() {
                let mut m = 0.0;
                for q in 0..inner {
                    let rng = substream(seed, &[1, r as u64, a as u64, q as u64]);
                    match branch_run_joint(&joint, kernel, t, w.as_slice(), 1, u, cap, rng) {
                        Ok(p) => m += p.signed_integral(|x| f.eval(x)),
                        Err(BranchError::Explosion { .. }) => return Ok(None),
                        Err(e) => return Err(e),
                    }
                }
                acc += *sign as f64 * m / inner as f64;
            }
            Ok(Some(acc))
        })
        .collect::<Result<_, BranchError>>()?;
    let (nested, capped_n) = split_capped(nested);
    let direct = estimate_ef_joint(&joint, kernel, s, u, f, v, outer * inner, cap, crate::rng::derive_seed(seed, &[2]))?;
    let (nm, ns) = mean_stderr(&nested);
    let se = (ns * ns + direct.stderr * direct.stderr).sqrt();
    let diff = nm - direct.mean;
    let z = if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(SemigroupCheck { nested: nm, nested_stderr: ns, direct: direct.mean, direct_stderr: direct.stderr, z, capped: capped_n + direct.capped })
}

/// Sensitivity of `E_{st} f(v)` to the start time, against
/// `5 (1+|v|^3) exp(8 ∫_s^t m_3) ||f|| ∫_s^{s'} m_3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartTimeCheck {
    pub early: f64,
    pub late: f64,
    /// `|early - late|`.
    pub gap: f64,
    pub stderr: f64,
    pub bound: f64,
    pub capped: usize,
}

impl StartTimeCheck {
    /// The gap does not exceed the bound by more than three standard errors.
    pub fn holds(&self) -> bool {
        self.gap <= self.bound + 3.0 * self.stderr
    }
}

/// Independent estimates of `E_{st} f(v)` and `E_{s't} f(v)`, `s ≤ s' ≤ t`.
/// `||f||` is the declared norm of `f` with weight order 2.
#[allow(clippy::too_many_arguments)]
pub fn start_time_check(
    env: &Environment,
    kernel: &CollisionKernel,
    f: &TestFunction<f64>,
    v: &[f64],
    times: (f64, f64, f64),
    n_rep: usize,
    cap: usize,
    seed: u64,
) -> Result<StartTimeCheck, BranchError> {
    let (s, s2, t) = times;
    check_times(env.horizon(), s, s2)?;
    check_times(env.horizon(), s2, t)?;
    let derive = crate::rng::derive_seed;
    let early = estimate_ef(env, kernel, s, t, f, v, n_rep, cap, derive(seed, &[0]))?;
    let late = estimate_ef(env, kernel, s2, t, f, v, n_rep, cap, derive(seed, &[1]))?;
    let speed3 = norm_sq(v).powf(1.5);
    let bound = 5.0
        * (1.0 + speed3)
        * (8.0 * env.moment_integral(3.0, s, t)).exp()
        * f.declared_norm()
        * env.moment_integral(3.0, s, s2);
    Ok(StartTimeCheck {
        early: early.mean,
        late: late.mean,
        gap: (early.mean - late.mean).abs(),
        stderr: (early.stderr * early.stderr + late.stderr * late.stderr).sqrt(),
        bound,
        capped: early.capped + late.capped,
    })
}

/// Replica mean and standard error helper shared by the coupling drivers.
pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_stderr(xs)
    }
}
