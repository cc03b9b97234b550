//! Event-driven simulation of the Kac jump process on `S_N` and pathwise
//! martingale accounting.
//!
//! Every unordered pair `{i, j}` collides at rate `2|v_i - v_j|/N`. Events are
//! generated by thinning: propose `i` with probability `|v_i|/S_1` (weight
//! tree over speeds), `j` uniformly among the others, at total rate
//! `2(N-1)S_1/N`, so the pair `{i, j}` is proposed at rate
//! `2(|v_i|+|v_j|)/N`; accept with probability `|v_i - v_j|/(|v_i|+|v_j|)`.
//! On `S_N`, `S_1 ≤ N` so the proposal rate stays below `2N`.

use std::io::{self, BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{sample_sigma_into, AngularRule, CollisionKernel};
use crate::model::{collide_into, distance, ConservationAudit, EmpiricalMeasure, ModelError, ParticleState, TestFunction, Velocity};
use crate::rng::{exponential, stream};
use crate::sumtree::SumTree;

/// Above this many particles the compensator is estimated from a pair
/// subsample.
pub const N_EXACT: usize = 2048;
/// Pair subsample size above [`N_EXACT`].
pub const SUBSAMPLE_PAIRS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("initial state is invalid: {0}")]
    InvalidInitial(#[from] ModelError),
    #[error("kernel dimension {kernel} does not match state dimension {state}")]
    KernelDimension { kernel: usize, state: usize },
    #[error("non-finite velocity produced at event {event}")]
    NonFinite { event: usize },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("negative horizon {0}")]
    NegativeHorizon(f64),
    #[error("path file: {0}")]
    Io(#[from] io::Error),
    #[error("path file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("path file line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KacEvent {
    pub time: f64,
    pub i: usize,
    pub j: usize,
    pub sigma: Vec<f64>,
    pub pre: (Vec<f64>, Vec<f64>),
    pub post: (Vec<f64>, Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KacPath {
    pub initial: ParticleState<f64>,
    pub events: Vec<KacEvent>,
    pub horizon: f64,
    pub seed: u64,
    pub kernel: String,
}

/// Mutable simulation state with flat velocity storage.
pub struct KacSimulator<'k, R> {
    kernel: &'k CollisionKernel,
    n: usize,
    d: usize,
    v: Vec<f64>,
    speeds: SumTree,
    time: f64,
    events: usize,
    proposals: u64,
    rng: R,
    sigma: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl<'k, R: Rng> KacSimulator<'k, R> {
    pub fn new(initial: &ParticleState<f64>, kernel: &'k CollisionKernel, rng: R) -> Result<Self, SimError> {
        let checked = ParticleState::new(initial.velocities.clone(), initial.time)?;
        let d = checked.dim();
        if kernel.d != d {
            return Err(SimError::KernelDimension { kernel: kernel.d, state: d });
        }
        let v: Vec<f64> = checked.velocities.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
        let n = checked.n();
        let speeds: Vec<f64> = v.chunks_exact(d).map(|x| crate::model::norm_sq(x).sqrt()).collect();
        Ok(Self {
            kernel,
            n,
            d,
            v,
            speeds: SumTree::new(&speeds),
            time: initial.time,
            events: 0,
            proposals: 0,
            rng,
            sigma: vec![0.0; d],
            a: vec![0.0; d],
            b: vec![0.0; d],
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn velocities(&self) -> &[f64] {
        &self.v
    }

    pub fn event_count(&self) -> usize {
        self.events
    }

    pub fn proposal_count(&self) -> u64 {
        self.proposals
    }

    /// Current proposal rate `2(N-1)S_1/N`.
    pub fn proposal_rate(&self) -> f64 {
        2.0 * (self.n - 1) as f64 * self.speeds.total() / self.n as f64
    }

    /// Advances to the next accepted collision, or to `horizon` if none occurs
    /// before it. Returns the event when one occurs.
    pub fn step(&mut self, horizon: f64) -> Result<Option<KacEvent>, SimError> {
        let d = self.d;
        loop {
            let rate = self.proposal_rate();
            if !(rate > 0.0) {
                self.time = horizon;
                return Ok(None);
            }
            let t = self.time + exponential(rate, &mut self.rng);
            if t > horizon {
                self.time = horizon;
                return Ok(None);
            }
            self.time = t;
            self.proposals += 1;
            let i = self.speeds.sample(self.rng.random());
            let mut j = self.rng.random_range(0..self.n - 1);
            if j >= i {
                j += 1;
            }
            let si = self.speeds.get(i);
            let sj = self.speeds.get(j);
            let vi = &self.v[i * d..(i + 1) * d];
            let vj = &self.v[j * d..(j + 1) * d];
            let rel = distance(vi, vj);
            let bound = si + sj;
            let accept: f64 = self.rng.random();
            if !(bound > 0.0) || accept * bound >= rel {
                continue;
            }
            let u: Vec<f64> = vi.iter().zip(vj).map(|(x, y)| (x - y) / rel).collect();
            sample_sigma_into(self.kernel, &u, &mut self.rng, &mut self.sigma);
            collide_into(vi, vj, &self.sigma, &mut self.a, &mut self.b);
            if self.a.iter().chain(&self.b).any(|x| !x.is_finite()) {
                return Err(SimError::NonFinite { event: self.events });
            }
            let ev = KacEvent {
                time: t,
                i,
                j,
                sigma: self.sigma.clone(),
                pre: (vi.to_vec(), vj.to_vec()),
                post: (self.a.clone(), self.b.clone()),
            };
            self.v[i * d..(i + 1) * d].copy_from_slice(&self.a);
            self.v[j * d..(j + 1) * d].copy_from_slice(&self.b);
            self.speeds.set(i, crate::model::norm_sq(&self.a).sqrt());
            self.speeds.set(j, crate::model::norm_sq(&self.b).sqrt());
            self.events += 1;
            return Ok(Some(ev));
        }
    }

    pub fn state(&self) -> ParticleState<f64> {
        flat_to_state(&self.v, self.d, self.time)
    }

    pub fn audit(&self) -> ConservationAudit {
        audit_flat(&self.v, self.d)
    }
}

pub(crate) fn flat_to_state(v: &[f64], d: usize, time: f64) -> ParticleState<f64> {
    ParticleState {
        velocities: v.chunks_exact(d).map(|x| Velocity::from_vec(x.to_vec())).collect(),
        time,
    }
}

/// Momentum and energy deviation of flat velocities from `S_N`.
pub fn audit_flat(v: &[f64], d: usize) -> ConservationAudit {
    let n = (v.len() / d) as f64;
    let mut m = vec![0.0; d];
    let mut e = 0.0;
    for x in v.chunks_exact(d) {
        for k in 0..d {
            m[k] += x[k];
            e += x[k] * x[k];
        }
    }
    ConservationAudit {
        momentum: crate::model::norm_sq(&m).sqrt() / n,
        energy: (e / n - 1.0).abs(),
    }
}

/// Simulates on `[initial.time, T]` and records every event.
pub fn run(initial: &ParticleState<f64>, kernel: &CollisionKernel, horizon: f64, seed: u64) -> Result<KacPath, SimError> {
    let mut events = Vec::new();
    run_streaming(initial, kernel, horizon, seed, |ev, _| events.push(ev.clone()))?;
    Ok(KacPath { initial: initial.clone(), events, horizon, seed, kernel: kernel.name.clone() })
}

/// Simulates without storing the path; `on_event` sees each event and the
/// flat velocities right after it. Returns the final state.
pub fn run_streaming<F: FnMut(&KacEvent, &[f64])>(
    initial: &ParticleState<f64>,
    kernel: &CollisionKernel,
    horizon: f64,
    seed: u64,
    mut on_event: F,
) -> Result<ParticleState<f64>, SimError> {
    if horizon < initial.time {
        return Err(SimError::NegativeHorizon(horizon - initial.time));
    }
    let mut sim = KacSimulator::new(initial, kernel, stream(seed, 0))?;
    while let Some(ev) = sim.step(horizon)? {
        on_event(&ev, sim.velocities());
    }
    Ok(sim.state())
}

impl KacPath {
    pub fn n(&self) -> usize {
        self.initial.n()
    }

    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    pub fn start(&self) -> f64 {
        self.initial.time
    }

    /// Flat velocities after all events with time `<= t`.
    pub fn flat_at(&self, t: f64) -> Result<Vec<f64>, SimError> {
        if !(t >= self.start() && t <= self.horizon) {
            return Err(SimError::TimeOutOfRange { t, horizon: self.horizon });
        }
        let d = self.dim();
        let mut v: Vec<f64> = self.initial.velocities.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
        for ev in self.events.iter().take_while(|e| e.time <= t) {
            v[ev.i * d..(ev.i + 1) * d].copy_from_slice(&ev.post.0);
            v[ev.j * d..(ev.j + 1) * d].copy_from_slice(&ev.post.1);
        }
        Ok(v)
    }

    /// Iterates the flat state at each of the sorted `times`, replaying once.
    pub fn flats_at(&self, times: &[f64]) -> Result<Vec<Vec<f64>>, SimError> {
        let d = self.dim();
        let mut v: Vec<f64> = self.initial.velocities.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
        let mut k = 0;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            if !(t >= self.start() && t <= self.horizon) {
                return Err(SimError::TimeOutOfRange { t, horizon: self.horizon });
            }
            while k < self.events.len() && self.events[k].time <= t {
                let ev = &self.events[k];
                v[ev.i * d..(ev.i + 1) * d].copy_from_slice(&ev.post.0);
                v[ev.j * d..(ev.j + 1) * d].copy_from_slice(&ev.post.1);
                k += 1;
            }
            out.push(v.clone());
        }
        Ok(out)
    }

    pub fn final_state(&self) -> ParticleState<f64> {
        state_at(self, self.horizon).expect("horizon is in range")
    }

    /// Writes the path as JSONL: a header line, then one event per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W, initial_ref: Option<&str>) -> Result<(), SimError> {
        let header = PathHeader {
            seed: self.seed,
            horizon: self.horizon,
            kernel: self.kernel.clone(),
            n: self.n(),
            d: self.dim(),
            initial_ref: initial_ref.map(str::to_string),
            initial: self.initial.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for ev in &self.events {
            serde_json::to_writer(&mut w, &EventLine { t: ev.time, i: ev.i, j: ev.j, sigma: ev.sigma.clone() })?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads a JSONL path and rebuilds pre/post velocities by replaying the
    /// recorded directions through the collision map.
    pub fn read_jsonl<B: BufRead>(r: B) -> Result<Self, SimError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or(SimError::Format { line: 1, msg: "empty file".into() })??;
        let header: PathHeader = serde_json::from_str(&first)?;
        let d = header.d;
        let mut v: Vec<f64> =
            header.initial.velocities.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
        let mut events = Vec::new();
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: EventLine = serde_json::from_str(&line)?;
            if e.i >= header.n || e.j >= header.n || e.i == e.j || e.sigma.len() != d {
                return Err(SimError::Format { line: k + 2, msg: "bad event indices or direction".into() });
            }
            let pre = (v[e.i * d..(e.i + 1) * d].to_vec(), v[e.j * d..(e.j + 1) * d].to_vec());
            collide_into(&pre.0, &pre.1, &e.sigma, &mut a, &mut b);
            v[e.i * d..(e.i + 1) * d].copy_from_slice(&a);
            v[e.j * d..(e.j + 1) * d].copy_from_slice(&b);
            events.push(KacEvent { time: e.t, i: e.i, j: e.j, sigma: e.sigma, pre, post: (a.clone(), b.clone()) });
        }
        Ok(Self { initial: header.initial, events, horizon: header.horizon, seed: header.seed, kernel: header.kernel })
    }
}

#[derive(Serialize, Deserialize)]
struct PathHeader {
    seed: u64,
    horizon: f64,
    kernel: String,
    n: usize,
    d: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    initial_ref: Option<String>,
    initial: ParticleState<f64>,
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    t: f64,
    i: usize,
    j: usize,
    sigma: Vec<f64>,
}

/// State after all events with time `<= t`.
pub fn state_at(path: &KacPath, t: f64) -> Result<ParticleState<f64>, SimError> {
    Ok(flat_to_state(&path.flat_at(t)?, path.dim(), t))
}

/// `<f, Q(μ, ν)>` by angular quadrature for every pair of atoms.
pub fn q_pairing(
    f: &TestFunction<f64>,
    mu: &EmpiricalMeasure<f64>,
    nu: &EmpiricalMeasure<f64>,
    kernel: &CollisionKernel,
    n_quad: usize,
) -> Result<f64, SimError> {
    let rule = kernel.angular_rule(n_quad);
    let fs = [f];
    let mut acc = 0.0;
    for (v, wv) in mu.atoms() {
        for (w, ww) in nu.atoms() {
            let mut out = [0.0];
            pair_q(&rule, v.as_slice(), w.as_slice(), &fs, &mut out);
            acc += wv * ww * out[0];
        }
    }
    if !acc.is_finite() {
        return Err(SimError::InvalidInitial(ModelError::NonFiniteEvaluation { atom: 0 }));
    }
    Ok(acc)
}

/// `|v - w| ∫ {f(v') + f(w') - f(v) - f(w)} b dσ̄` for each `f`, added into `out`.
/// The pair is put in a canonical order first so that `q(i, k)` and `q(k, i)`
/// agree bit for bit under quadrature.
fn pair_q(rule: &AngularRule, v: &[f64], w: &[f64], fs: &[&TestFunction<f64>], out: &mut [f64]) {
    let (v, w) = if v.iter().map(|x| x.to_bits()).lt(w.iter().map(|x| x.to_bits())) { (v, w) } else { (w, v) };
    let r = distance(v, w);
    if r == 0.0 {
        return;
    }
    let d = v.len();
    let u: Vec<f64> = v.iter().zip(w).map(|(x, y)| (x - y) / r).collect();
    let (sig, wts) = rule.nodes(&u);
    let base: Vec<f64> = fs.iter().map(|f| f.eval(v) + f.eval(w)).collect();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut acc = vec![0.0; fs.len()];
    for (s, wt) in sig.chunks_exact(d).zip(&wts) {
        collide_into(v, w, s, &mut a, &mut b);
        for (k, f) in fs.iter().enumerate() {
            acc[k] += wt * (f.eval(&a) + f.eval(&b));
        }
    }
    for k in 0..fs.len() {
        out[k] += r * (acc[k] - base[k]);
    }
}

/// Row sums `Σ_k q(i, k)` for particle `i` of a flat state, all functions.
fn row_q(rule: &AngularRule, v: &[f64], d: usize, i: usize, fs: &[&TestFunction<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; fs.len()];
    let vi = &v[i * d..(i + 1) * d];
    for (k, vk) in v.chunks_exact(d).enumerate() {
        if k != i {
            pair_q(rule, vi, vk, fs, &mut out);
        }
    }
    out
}

/// `N^{-2} Σ_{i,k} q(i,k)` for all functions, computed exactly.
fn total_q(rule: &AngularRule, v: &[f64], d: usize, fs: &[&TestFunction<f64>]) -> Vec<f64> {
    let n = v.len() / d;
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| row_q(rule, v, d, i, fs)).collect();
    let mut out = vec![0.0; fs.len()];
    for r in rows {
        for k in 0..fs.len() {
            out[k] += r[k];
        }
    }
    out
}

/// Stratified pair-subsample estimate of `N^{-2} Σ_{i,k} q(i,k)` with its
/// standard error: `m` ordered pairs, first index stratified over rows.
fn subsampled_q<R: Rng>(
    rule: &AngularRule,
    v: &[f64],
    d: usize,
    fs: &[&TestFunction<f64>],
    m: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let n = v.len() / d;
    let mut samples = vec![Vec::with_capacity(m); fs.len()];
    for s in 0..m {
        let lo = s * n / m;
        let hi = ((s + 1) * n / m).max(lo + 1);
        let i = rng.random_range(lo..hi.min(n));
        let mut k = rng.random_range(0..n - 1);
        if k >= i {
            k += 1;
        }
        let mut out = vec![0.0; fs.len()];
        pair_q(rule, &v[i * d..(i + 1) * d], &v[k * d..(k + 1) * d], fs, &mut out);
        for f in 0..fs.len() {
            samples[f].push(out[f] * (n - 1) as f64 / n as f64);
        }
    }
    let mut mean = Vec::with_capacity(fs.len());
    let mut se = Vec::with_capacity(fs.len());
    for s in samples {
        let (m, e) = crate::stats::mean_stderr(&s);
        mean.push(m);
        se.push(e);
    }
    (mean, se)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleLedger {
    pub t: f64,
    /// `N^{-1} Σ_jumps {f(v') + f(v'_*) - f(v) - f(v_*)}`.
    pub jump_sum: f64,
    pub compensator_integral: f64,
    /// `jump_sum - compensator_integral`, the martingale `M^{N,f}_t`.
    pub value: f64,
    /// `<f, μ_t> - <f, μ_0>` computed directly from the state.
    pub observed_increment: f64,
    /// `|value - (observed_increment - compensator_integral)|`.
    pub residual: f64,
    /// Standard error of the compensator when it is subsampled, else 0.
    pub compensator_stderr: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LedgerOptions {
    pub n_quad: usize,
    pub n_exact: usize,
    pub subsample_pairs: usize,
    pub seed: u64,
}

impl Default for LedgerOptions {
    fn default() -> Self {
        Self { n_quad: 3, n_exact: N_EXACT, subsample_pairs: SUBSAMPLE_PAIRS, seed: 0 }
    }
}

/// Ledger time series (one entry at each event time and one at the horizon)
/// for a single test function.
pub fn martingale_ledger(path: &KacPath, f: &TestFunction<f64>, kernel: &CollisionKernel) -> Vec<MartingaleLedger> {
    martingale_ledgers(path, &[f], kernel, LedgerOptions::default()).pop().unwrap()
}

/// Ledgers for several test functions sharing the collision evaluations.
///
/// The compensator between jumps is `Δt <f, Q(μ, μ)>` with `μ` constant. The
/// exact total is kept up to date after each collision by recomputing the two
/// affected rows before and after, `O(N n_quad)` per event.
pub fn martingale_ledgers(
    path: &KacPath,
    fs: &[&TestFunction<f64>],
    kernel: &CollisionKernel,
    opts: LedgerOptions,
) -> Vec<Vec<MartingaleLedger>> {
    let n = path.n();
    let d = path.dim();
    let nf = fs.len();
    let nn = (n * n) as f64;
    let rule = kernel.angular_rule(opts.n_quad);
    let exact = n <= opts.n_exact;
    let mut rng = crate::rng::substream(opts.seed, &[0x6c65_6467_6572]);
    let mut v: Vec<f64> = path.initial.velocities.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
    let eval_all = |v: &[f64]| -> Vec<f64> {
        fs.iter().map(|f| v.chunks_exact(d).map(|x| f.eval(x)).sum::<f64>() / n as f64).collect()
    };
    let start = eval_all(&v);
    let mut q_total;
    let mut q_var = vec![0.0; nf];
    if exact {
        q_total = total_q(&rule, &v, d, fs);
    } else {
        let (m, se) = subsampled_q(&rule, &v, d, fs, opts.subsample_pairs, &mut rng);
        q_total = m.iter().map(|x| x * nn).collect();
        q_var = se.iter().map(|s| s * s).collect();
    }
    let mut jump = vec![0.0; nf];
    let mut comp = vec![0.0; nf];
    let mut comp_var = vec![0.0; nf];
    let mut t_prev = path.start();
    let mut out: Vec<Vec<MartingaleLedger>> = vec![Vec::with_capacity(path.events.len() + 1); nf];
    let record = |t: f64, v: &[f64], jump: &[f64], comp: &[f64], comp_var: &[f64], out: &mut Vec<Vec<MartingaleLedger>>| {
        let now = eval_all(v);
        for k in 0..nf {
            let value = jump[k] - comp[k];
            let observed = now[k] - start[k];
            out[k].push(MartingaleLedger {
                t,
                jump_sum: jump[k],
                compensator_integral: comp[k],
                value,
                observed_increment: observed,
                residual: (value - (observed - comp[k])).abs(),
                compensator_stderr: comp_var[k].sqrt(),
            });
        }
    };
    for ev in &path.events {
        let dt = ev.time - t_prev;
        for k in 0..nf {
            comp[k] += dt * q_total[k] / nn;
            comp_var[k] += dt * dt * q_var[k];
        }
        t_prev = ev.time;
        let (i, j) = (ev.i, ev.j);
        for (k, f) in fs.iter().enumerate() {
            jump[k] += (f.eval(&ev.post.0) + f.eval(&ev.post.1) - f.eval(&ev.pre.0) - f.eval(&ev.pre.1)) / n as f64;
        }
        if exact {
            let old_i = row_q(&rule, &v, d, i, fs);
            let old_j = row_q(&rule, &v, d, j, fs);
            let mut old_ij = vec![0.0; nf];
            pair_q(&rule, &v[i * d..(i + 1) * d], &v[j * d..(j + 1) * d], fs, &mut old_ij);
            v[i * d..(i + 1) * d].copy_from_slice(&ev.post.0);
            v[j * d..(j + 1) * d].copy_from_slice(&ev.post.1);
            let new_i = row_q(&rule, &v, d, i, fs);
            let new_j = row_q(&rule, &v, d, j, fs);
            let mut new_ij = vec![0.0; nf];
            pair_q(&rule, &v[i * d..(i + 1) * d], &v[j * d..(j + 1) * d], fs, &mut new_ij);
            // q is symmetric, so rows i and j appear twice, minus the (i,j) double count.
            for k in 0..nf {
                q_total[k] += 2.0 * (new_i[k] + new_j[k] - new_ij[k]) - 2.0 * (old_i[k] + old_j[k] - old_ij[k]);
            }
        } else {
            v[i * d..(i + 1) * d].copy_from_slice(&ev.post.0);
            v[j * d..(j + 1) * d].copy_from_slice(&ev.post.1);
            let (m, se) = subsampled_q(&rule, &v, d, fs, opts.subsample_pairs, &mut rng);
            q_total = m.iter().map(|x| x * nn).collect();
            q_var = se.iter().map(|s| s * s).collect();
        }
        record(ev.time, &v, &jump, &comp, &comp_var, &mut out);
    }
    let dt = path.horizon - t_prev;
    for k in 0..nf {
        comp[k] += dt * q_total[k] / nn;
        comp_var[k] += dt * dt * q_var[k];
    }
    record(path.horizon, &v, &jump, &comp, &comp_var, &mut out);
    out
}

/// Exact Gaussian initial state: `N` standard normal draws rescaled into `S_N`.
pub fn gaussian_state<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> ParticleState<f64> {
    let raw: Vec<Velocity<f64>> =
        (0..n).map(|_| Velocity::from_vec(crate::rng::gaussian_vec(d, rng))).collect();
    crate::sampling::rescale_velocities(raw).expect("Gaussian sample has positive spread")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean_stderr;

    fn two_particle() -> ParticleState<f64> {
        ParticleState::new(
            vec![Velocity::new(vec![1.0, 0.0, 0.0]).unwrap(), Velocity::new(vec![-1.0, 0.0, 0.0]).unwrap()],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn empty_horizon_has_no_events() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let p = run(&two_particle(), &k, 0.0, 1).unwrap();
        assert!(p.events.is_empty());
        assert_eq!(state_at(&p, 0.0).unwrap().velocities, two_particle().velocities);
    }

    #[test]
    fn two_particle_counts_are_poisson_with_rate_two() {
        // |v1 - v2| = 2 is conserved for N = 2, so the pair rate 2|v1-v2|/N = 2 is constant.
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let t = 1.5;
        let counts: Vec<f64> =
            (0..1000).map(|s| run(&two_particle(), &k, t, s).unwrap().events.len() as f64).collect();
        let (m, se) = mean_stderr(&counts);
        assert!((m - 2.0 * t).abs() < 3.0 * se, "{m} ± {se}");
        let var = counts.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 999.0;
        assert!((var / m - 1.0).abs() < 0.15);
    }

    #[test]
    fn determinism_and_replay() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let init = gaussian_state(50, 3, &mut stream(5, 0));
        let a = run(&init, &k, 1.0, 42).unwrap();
        let b = run(&init, &k, 1.0, 42).unwrap();
        assert_eq!(a, b);
        assert!(!a.events.is_empty());
        for w in a.events.windows(2) {
            assert!(w[0].time < w[1].time);
        }
        for e in &a.events {
            assert_ne!(e.i, e.j);
            let (x, y) = crate::model::collide_unchecked(
                &Velocity::from_vec(e.pre.0.clone()),
                &Velocity::from_vec(e.pre.1.clone()),
                &Velocity::from_vec(e.sigma.clone()),
            );
            assert_eq!((x.into_vec(), y.into_vec()), e.post.clone());
        }
        let mid = a.events[a.events.len() / 2].time;
        let s1 = state_at(&a, mid).unwrap();
        let s2 = state_at(&a, mid).unwrap();
        assert_eq!(s1, s2);
        let streamed = run_streaming(&init, &k, 1.0, 42, |_, _| {}).unwrap();
        assert_eq!(streamed.velocities, a.final_state().velocities);
        assert!(state_at(&a, 1.5).is_err());
    }

    #[test]
    fn jsonl_roundtrip_is_bit_exact() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let init = gaussian_state(20, 3, &mut stream(6, 0));
        let a = run(&init, &k, 0.7, 3).unwrap();
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf, Some("gaussian")).unwrap();
        let b = KacPath::read_jsonl(io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(a, b);
        let first = String::from_utf8(buf).unwrap().lines().nth(1).unwrap().to_string();
        assert!(first.starts_with("{\"t\":"));
    }

    #[test]
    fn rejects_invalid_initial_and_dimension() {
        let k2 = CollisionKernel::hard_sphere(2).unwrap();
        assert!(matches!(run(&two_particle(), &k2, 1.0, 0), Err(SimError::KernelDimension { .. })));
        let bad = ParticleState {
            velocities: vec![Velocity::from_vec(vec![1.0, 0.0, 0.0]), Velocity::from_vec(vec![1.0, 0.0, 0.0])],
            time: 0.0,
        };
        let k3 = CollisionKernel::hard_sphere(3).unwrap();
        assert!(matches!(run(&bad, &k3, 1.0, 0), Err(SimError::InvalidInitial(_))));
    }

    #[test]
    fn q_pairing_conservation_cases() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let mu = gaussian_state(12, 3, &mut stream(7, 0)).to_measure();
        let nu = gaussian_state(9, 3, &mut stream(7, 1)).to_measure();
        let q = q_pairing(&TestFunction::energy(), &mu, &nu, &k, 6).unwrap();
        assert!(q.abs() < 1e-8);
        for c in 0..3 {
            let q = q_pairing(&TestFunction::component(c), &mu, &nu, &k, 6).unwrap();
            assert!(q.abs() < 1e-8);
        }
    }

    #[test]
    fn q_pairing_quartic_matches_monte_carlo() {
        // μ = ν = (δ_{e1} + δ_{-e1})/2: only the two opposite pairs have
        // nonzero rate, each contributing |v - v_*| = 2 times the angular mean.
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let e1 = Velocity::new(vec![1.0, 0.0, 0.0]).unwrap();
        let mu = EmpiricalMeasure::uniform(vec![e1.clone(), e1.scale(-1.0)]).unwrap();
        let f = TestFunction::power(4.0);
        let q = q_pairing(&f, &mu, &mu, &k, 8).unwrap();
        let mut rng = stream(8, 0);
        let n = 1_000_000;
        let mut xs = Vec::with_capacity(n);
        let (v, w) = ([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]);
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        for _ in 0..n {
            let s = crate::rng::unit_vec(3, &mut rng);
            collide_into(&v, &w, &s, &mut a, &mut b);
            let g = crate::model::norm_sq(&a).powi(2) + crate::model::norm_sq(&b).powi(2) - 2.0;
            xs.push(0.5 * 2.0 * g);
        }
        let (m, se) = mean_stderr(&xs);
        assert!((q - m).abs() <= 3.0 * se.max(1e-12), "{q} vs {m} ± {se}");
    }

    #[test]
    fn ledger_identities() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let init = gaussian_state(16, 3, &mut stream(9, 0));
        let path = run(&init, &k, 1.0, 9).unwrap();
        let one = TestFunction::constant(1.0);
        let energy = TestFunction::energy();
        let h = TestFunction::bounded_harmonic(0.7, vec![0.4, -0.3, 0.9], 0.2);
        let ls = martingale_ledgers(&path, &[&one, &energy, &h], &k, LedgerOptions::default());
        for l in &ls[0] {
            assert!(l.value.abs() < 1e-15);
        }
        for l in &ls[1] {
            assert!(l.value.abs() < 1e-9, "{}", l.value);
        }
        for l in &ls[2] {
            assert!(l.residual <= 1e-9 * (1.0 + l.value.abs()));
        }
        assert_eq!(ls[2].len(), path.events.len() + 1);
    }

    #[test]
    fn incremental_compensator_matches_full_recomputation() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let init = gaussian_state(10, 3, &mut stream(10, 0));
        let path = run(&init, &k, 1.0, 10).unwrap();
        let f = TestFunction::bounded_harmonic(1.0, vec![0.5, 0.5, 0.0], 0.0);
        let l = martingale_ledger(&path, &f, &k);
        let rule = k.angular_rule(3);
        let mut comp = 0.0;
        let mut prev = 0.0;
        let times: Vec<f64> = path.events.iter().map(|e| e.time).chain([path.horizon]).collect();
        let mut flat = path.flats_at(&[0.0]).unwrap().pop().unwrap();
        for (idx, &t) in times.iter().enumerate() {
            comp += (t - prev) * total_q(&rule, &flat, 3, &[&f])[0] / 100.0;
            prev = t;
            if idx < path.events.len() {
                flat = path.flats_at(&[t]).unwrap().pop().unwrap();
            }
        }
        assert!((comp - l.last().unwrap().compensator_integral).abs() < 1e-10);
    }

    #[test]
    fn subsampled_compensator_reports_stderr() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let init = gaussian_state(40, 3, &mut stream(11, 0));
        let path = run(&init, &k, 0.2, 11).unwrap();
        let f = TestFunction::bounded_harmonic(1.0, vec![0.5, 0.5, 0.0], 0.0);
        let exact = martingale_ledgers(&path, &[&f], &k, LedgerOptions::default());
        let approx = martingale_ledgers(
            &path,
            &[&f],
            &k,
            LedgerOptions { n_exact: 10, subsample_pairs: 2000, ..LedgerOptions::default() },
        );
        let (e, a) = (exact[0].last().unwrap(), approx[0].last().unwrap());
        assert!(a.compensator_stderr > 0.0);
        assert!((e.compensator_integral - a.compensator_integral).abs() < 4.0 * a.compensator_stderr + 1e-12);
    }
}
