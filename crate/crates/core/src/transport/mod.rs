//! Weighted Wasserstein distance `W` on empirical measures.
//!
//! `W(μ, ν) = 2 W₁^ρ(Φμ, Φν)` with `Φμ(dv) = ½(1+|v|²)μ(dv)` and the capped
//! metric `ρ(v, v') = min(|v − v'|, 2)`. The capped problem is solved exactly
//! as a min-cost flow with one extra hub node: every source reaches the hub
//! and the hub reaches every sink at cost `cap/2`, so any pair can always be
//! served at the cap and arcs with `|v − v'| ≥ cap` never need to exist. The
//! same network with unequal masses computes the bounded-Lipschitz dual norm,
//! used for measures off the Boltzmann sphere.
//!
//! Large instances start from a k-nearest-neighbour arc set and add every
//! arc with negative reduced cost (full pricing) until none is left, so the
//! result is optimal over the complete bipartite graph.

mod grid;
pub mod network_simplex;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{distance, norm_sq, EmpiricalMeasure, ModelError, Velocity, EPS_CONS};
use grid::Grid;
use network_simplex::{NetworkSimplex, SimplexError};

/// Largest support (per side) handled by the exact solver by default.
pub const DEFAULT_EXACT_LIMIT: usize = 20_000;
/// Instances with at most this many source-sink pairs get every arc up front.
const DENSE_PAIRS: usize = 250_000;
const NEIGHBOURS: usize = 8;
const PRICE_PER_ROW: usize = 8;
const PRICE_TOL: f64 = 1e-11;
const POINTS_PER_CELL: usize = 16;
const MASS_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("measure is not in the Boltzmann sphere: {0}")]
    NotInSphere(#[from] ModelError),
    #[error("total masses differ: {0} vs {1}")]
    MassMismatch(f64, f64),
    #[error("empty measure")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("support of size {size} exceeds the exact limit {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("subsample size must be at least 2, got {0}")]
    SubsampleTooSmall(usize),
    #[error("subsample size {m} exceeds support size {support}")]
    SubsampleTooLarge { m: usize, support: usize },
    #[error("solver did not converge: {0}")]
    Solver(#[from] SimplexError),
    #[error("optimality certificate failed: {0}")]
    Certificate(String),
}

/// `cost(v, v') = min(|v − v'|, cap)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundCost {
    pub cap: f64,
}

impl Default for GroundCost {
    fn default() -> Self {
        Self { cap: 2.0 }
    }
}

impl GroundCost {
    #[inline]
    pub fn cost(&self, a: &[f64], b: &[f64]) -> f64 {
        distance(a, b).min(self.cap)
    }
}

/// Optimal plan between merged supports.
///
/// `sources` and `sinks` are the inputs with duplicate velocities merged;
/// `source_index[k]` and `sink_index[k]` give the merged atom of input atom
/// `k`. `flow` lists `(i, j, mass)` with positive mass. For unequal masses,
/// `destroyed[i]` and `created[j]` record the mass that leaves or enters at
/// unit price `cap/2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportPlan {
    pub sources: EmpiricalMeasure<f64>,
    pub sinks: EmpiricalMeasure<f64>,
    pub source_index: Vec<usize>,
    pub sink_index: Vec<usize>,
    pub flow: Vec<(usize, usize, f64)>,
    pub destroyed: Vec<f64>,
    pub created: Vec<f64>,
    pub cost_value: f64,
    pub dual_u: Vec<f64>,
    pub dual_w: Vec<f64>,
    pub ground: GroundCost,
    pub pivots: u64,
    pub pricing_rounds: usize,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        let mut r = self.destroyed.clone();
        for &(i, _, f) in &self.flow {
            r[i] += f;
        }
        r
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = self.created.clone();
        for &(_, j, f) in &self.flow {
            c[j] += f;
        }
        c
    }

    /// `Σ u_i a_i + Σ w_j b_j`.
    pub fn dual_value(&self) -> f64 {
        let a: f64 = self.sources.atoms().iter().zip(&self.dual_u).map(|((_, m), u)| m * u).sum();
        let b: f64 = self.sinks.atoms().iter().zip(&self.dual_w).map(|((_, m), w)| m * w).sum();
        a + b
    }

    /// Largest violation of `u_i + w_j ≤ cost(i, j)` over all pairs.
    pub fn max_dual_violation(&self) -> f64 {
        let g = self.ground;
        self.sources
            .atoms()
            .par_iter()
            .zip(&self.dual_u)
            .map(|((x, _), u)| {
                self.sinks
                    .atoms()
                    .iter()
                    .zip(&self.dual_w)
                    .map(|((y, _), w)| u + w - g.cost(x.as_slice(), y.as_slice()))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .reduce(|| f64::NEG_INFINITY, f64::max)
    }

    /// Largest `|u_i + w_j − cost(i, j)|` over pairs carrying flow.
    pub fn max_slackness_violation(&self) -> f64 {
        let g = self.ground;
        self.flow
            .iter()
            .map(|&(i, j, _)| {
                let c = g.cost(self.sources.atoms()[i].0.as_slice(), self.sinks.atoms()[j].0.as_slice());
                (self.dual_u[i] + self.dual_w[j] - c).abs()
            })
            .fold(0.0, f64::max)
    }

    /// A function `ĝ` with `|ĝ| ≤ cap/2` and `|ĝ(x) − ĝ(y)| ≤ ρ(x, y)` such
    /// that `⟨ĝ, P − Q⟩ ≥ cost_value` for balanced plans: the ρ-transform of
    /// the sink potentials, recentred.
    pub fn kantorovich_potential(&self) -> impl Fn(&[f64]) -> f64 + '_ {
        let wmax = self.dual_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shift = wmax - self.ground.cap / 2.0;
        move |x: &[f64]| {
            let g = self
                .sinks
                .atoms()
                .iter()
                .zip(&self.dual_w)
                .map(|((y, _), w)| self.ground.cost(x, y.as_slice()) - w)
                .fold(f64::INFINITY, f64::min);
            g + shift
        }
    }
}

/// `Φμ(dv) = ½(1+|v|²)μ(dv)` for `μ` in the Boltzmann sphere.
pub fn phi_transform(mu: &EmpiricalMeasure<f64>) -> Result<EmpiricalMeasure<f64>, TransportError> {
    mu.check_boltzmann_sphere(EPS_CONS)?;
    Ok(phi_unchecked(mu))
}

fn phi_unchecked(mu: &EmpiricalMeasure<f64>) -> EmpiricalMeasure<f64> {
    EmpiricalMeasure::from_parts(
        mu.atoms().iter().map(|(v, w)| (v.clone(), w * 0.5 * (1.0 + v.norm_sq()))).collect(),
    )
}

/// Exact `W₁^ρ(P, Q)` for measures of equal mass (within `10⁻⁸`; `Q` is
/// rescaled to the mass of `P`).
pub fn w1_capped(
    p: &EmpiricalMeasure<f64>,
    q: &EmpiricalMeasure<f64>,
    cost: GroundCost,
) -> Result<TransportPlan, TransportError> {
    let (mp, mq) = (p.total_mass(), q.total_mass());
    if (mp - mq).abs() > MASS_TOL {
        return Err(TransportError::MassMismatch(mp, mq));
    }
    let q = if mq > 0.0 && mq != mp { q.scaled(mp / mq) } else { q.clone() };
    solve(p, &q, cost, true)
}

/// Bounded-Lipschitz distance `sup{⟨g, P − Q⟩ : |g| ≤ cap/2, Lip_ρ g ≤ 1}`
/// for arbitrary finite masses; mass imbalance is paid at `cap/2` per unit.
/// Equals [`w1_capped`] when the masses agree.
pub fn bounded_lipschitz(
    p: &EmpiricalMeasure<f64>,
    q: &EmpiricalMeasure<f64>,
    cost: GroundCost,
) -> Result<TransportPlan, TransportError> {
    solve(p, q, cost, false)
}

/// `W(μ, ν) = 2 W₁^ρ(Φμ, Φν)` for `μ, ν` in the Boltzmann sphere; in `[0, 4]`.
pub fn w_distance(mu: &EmpiricalMeasure<f64>, nu: &EmpiricalMeasure<f64>) -> Result<f64, TransportError> {
    w_distance_with_limit(mu, nu, DEFAULT_EXACT_LIMIT)
}

pub fn w_distance_with_limit(
    mu: &EmpiricalMeasure<f64>,
    nu: &EmpiricalMeasure<f64>,
    limit: usize,
) -> Result<f64, TransportError> {
    Ok(w_plan(mu, nu, limit)?.cost_value * 2.0)
}

/// The plan behind [`w_distance`], between `Φμ` and `Φν`.
pub fn w_plan(
    mu: &EmpiricalMeasure<f64>,
    nu: &EmpiricalMeasure<f64>,
    limit: usize,
) -> Result<TransportPlan, TransportError> {
    for m in [mu, nu] {
        if m.len() > limit {
            return Err(TransportError::TooLarge { size: m.len(), limit });
        }
    }
    let (a, b) = (phi_transform(mu)?, phi_transform(nu)?);
    w1_capped(&a, &b, GroundCost::default())
}

/// `2 · bounded_lipschitz(Φμ, Φν)` for measures off the sphere (raw samples).
/// Coincides with [`w_distance`] on the sphere.
pub fn w_distance_general(mu: &EmpiricalMeasure<f64>, nu: &EmpiricalMeasure<f64>) -> Result<f64, TransportError> {
    for m in [mu, nu] {
        if m.len() > DEFAULT_EXACT_LIMIT {
            return Err(TransportError::TooLarge { size: m.len(), limit: DEFAULT_EXACT_LIMIT });
        }
    }
    Ok(2.0 * bounded_lipschitz(&phi_unchecked(mu), &phi_unchecked(nu), GroundCost::default())?.cost_value)
}

/// Mean and standard error of `W` over `reps` pairs of `m`-atom subsamples,
/// each rescaled back into the sphere. Upward biased: even `μ = ν` gives a
/// positive value, the mean self-distance of two `m`-subsamples.
pub fn w_subsampled<R: Rng + ?Sized>(
    mu: &EmpiricalMeasure<f64>,
    nu: &EmpiricalMeasure<f64>,
    m: usize,
    reps: usize,
    rng: &mut R,
) -> Result<(f64, f64), TransportError> {
    if m < 2 {
        return Err(TransportError::SubsampleTooSmall(m));
    }
    let support = mu.len().min(nu.len());
    if m > support {
        return Err(TransportError::SubsampleTooLarge { m, support });
    }
    let mut values = Vec::with_capacity(reps);
    for _ in 0..reps {
        let a = subsample(mu, m, rng)?;
        let b = subsample(nu, m, rng)?;
        values.push(w_distance(&a, &b)?);
    }
    Ok(crate::stats::mean_stderr(&values))
}

/// `m` atoms drawn without replacement (uniform weights) or by weight with
/// replacement, then rescaled. Taking the whole support of a uniform measure
/// returns it unchanged.
fn subsample<R: Rng + ?Sized>(
    mu: &EmpiricalMeasure<f64>,
    m: usize,
    rng: &mut R,
) -> Result<EmpiricalMeasure<f64>, TransportError> {
    let atoms = mu.atoms();
    let w0 = atoms[0].1;
    let uniform = atoms.iter().all(|(_, w)| *w == w0);
    if uniform && m == atoms.len() {
        return Ok(mu.clone());
    }
    let picked: Vec<Velocity<f64>> = if uniform {
        sample_indices(rng, atoms.len(), m).into_iter().map(|k| atoms[k].0.clone()).collect()
    } else {
        let weights: Vec<f64> = atoms.iter().map(|(_, w)| *w).collect();
        let tree = crate::sumtree::SumTree::new(&weights);
        (0..m).map(|_| atoms[tree.sample(rng.random::<f64>())].0.clone()).collect()
    };
    let state = crate::sampling::rescale_velocities(picked).map_err(TransportError::NotInSphere)?;
    Ok(state.to_measure())
}

fn flatten(mu: &EmpiricalMeasure<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut w = Vec::with_capacity(mu.len());
    for (v, m) in mu.atoms() {
        xs.extend_from_slice(v.as_slice());
        w.push(*m);
    }
    (xs, w)
}

fn merged_index(original: &EmpiricalMeasure<f64>, merged: &EmpiricalMeasure<f64>) -> Vec<usize> {
    use std::collections::HashMap;
    let key = |v: &Velocity<f64>| -> Vec<u64> { v.as_slice().iter().map(|c| c.to_bits()).collect() };
    let map: HashMap<Vec<u64>, usize> = merged.atoms().iter().enumerate().map(|(k, (v, _))| (key(v), k)).collect();
    original.atoms().iter().map(|(v, _)| map[&key(v)]).collect()
}

fn solve(
    p_in: &EmpiricalMeasure<f64>,
    q_in: &EmpiricalMeasure<f64>,
    ground: GroundCost,
    balanced: bool,
) -> Result<TransportPlan, TransportError> {
    if p_in.is_empty() && q_in.is_empty() {
        return Err(TransportError::Empty);
    }
    if let (Some(a), Some(b)) = (p_in.dim(), q_in.dim()) {
        if a != b {
            return Err(TransportError::Dimension(a, b));
        }
    }
    let d = p_in.dim().or(q_in.dim()).unwrap_or(0);
    let p = p_in.merge_duplicates();
    let q = q_in.merge_duplicates();
    let (xs, a) = flatten(&p);
    let (ys, b) = flatten(&q);
    let (n, m) = (a.len(), b.len());
    let hub = n + m;
    let half = ground.cap / 2.0;

    // The simplex root plays the hub: its arcs cost cap/2 and it absorbs the
    // mass imbalance, so the starting basis (everything through the hub) is
    // feasible.
    let mut supply = Vec::with_capacity(n + m);
    supply.extend_from_slice(&a);
    supply.extend(b.iter().map(|x| -x));
    let mut ns = NetworkSimplex::with_root(supply, half);
    ns.eps = 1e-12;

    let x = |i: usize| &xs[i * d..(i + 1) * d];
    let y = |j: usize| &ys[j * d..(j + 1) * d];
    let cost = |i: usize, j: usize| distance(x(i), y(j));

    if n * m <= DENSE_PAIRS {
        for i in 0..n {
            for j in 0..m {
                let c = cost(i, j);
                if c < ground.cap {
                    ns.add_arc(i, n + j, c);
                }
            }
        }
    } else {
        let k = NEIGHBOURS.min(m).min(n);
        let (gx, gy) = (Grid::new(&xs, d, POINTS_PER_CELL), Grid::new(&ys, d, POINTS_PER_CELL));
        let rows: Vec<Vec<(usize, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| gy.knn(&ys, x(i), k).into_iter().filter(|&(_, c)| c < ground.cap).collect())
            .collect();
        let cols: Vec<Vec<(usize, f64)>> = (0..m)
            .into_par_iter()
            .map(|j| gx.knn(&xs, y(j), k).into_iter().filter(|&(_, c)| c < ground.cap).collect())
            .collect();
        let mut seen = std::collections::HashSet::new();
        for (i, row) in rows.iter().enumerate() {
            for &(j, c) in row {
                if seen.insert((i, j)) {
                    ns.add_arc(i, n + j, c);
                }
            }
        }
        for (j, col) in cols.iter().enumerate() {
            for &(i, c) in col {
                if seen.insert((i, j)) {
                    ns.add_arc(i, n + j, c);
                }
            }
        }
    }

    greedy_basis(&mut ns, n, m, &a, &b);

    let per_row = PRICE_PER_ROW.max(2 * m.div_ceil(n.max(1)));
    let mut sink_grid: Option<Grid> = None;
    let mut rounds = 0;
    loop {
        ns.solve()?;
        ns.refresh();
        rounds += 1;
        if n * m <= DENSE_PAIRS {
            break;
        }
        let pi = ns.potentials().to_vec();
        let gy = sink_grid.get_or_insert_with(|| Grid::new(&ys, d, POINTS_PER_CELL));
        // A cell can hold a violating arc for source i only if its distance
        // bound plus pi_i is below the largest sink potential inside it.
        let cell_max: Vec<f64> = (0..gy.cells())
            .map(|c| gy.members(c).iter().map(|&j| pi[n + j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let gy = &*gy;
        let found: Vec<Vec<(usize, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut cand: Vec<(usize, f64, f64)> = Vec::new();
                let pi_i = pi[i];
                for (cell, &pmax) in cell_max.iter().enumerate() {
                    if pi_i - pmax >= -PRICE_TOL {
                        continue;
                    }
                    if gy.box_distance(cell, x(i)).min(ground.cap) + pi_i - pmax >= -PRICE_TOL {
                        continue;
                    }
                    for &j in gy.members(cell) {
                        let pj = pi[n + j];
                        if pi_i - pj >= -PRICE_TOL {
                            continue;
                        }
                        let c = distance(x(i), y(j)).min(ground.cap);
                        let rc = c + pi_i - pj;
                        if rc < -PRICE_TOL {
                            cand.push((j, c, rc));
                        }
                    }
                }
                if cand.len() > per_row {
                    cand.select_nth_unstable_by(per_row, |a, b| a.2.total_cmp(&b.2));
                    cand.truncate(per_row);
                }
                cand.into_iter().map(|(j, c, _)| (j, c)).collect()
            })
            .collect();
        let mut added = 0;
        for (i, row) in found.into_iter().enumerate() {
            for (j, c) in row {
                ns.add_arc(i, n + j, c);
                added += 1;
            }
        }
        if added == 0 {
            break;
        }
    }

    // Collect flows.
    let first = ns.first_arc();
    let mut destroyed = vec![0.0; n];
    let mut created = vec![0.0; m];
    let mut direct = Vec::new();
    for e in first..first + ns.arc_count() {
        let f = ns.flow(e);
        if f > 0.0 {
            let (s, t, _) = ns.arc(e);
            direct.push((s, t - n, f));
        }
    }
    for u in 0..n + m {
        let (f, into_hub) = ns.root_arc_flow(u);
        if f <= 0.0 {
            continue;
        }
        match (u < n, into_hub) {
            (true, true) => destroyed[u] += f,
            (false, false) => created[u - n] += f,
            _ => return Err(TransportError::Certificate(format!("hub arc of node {u} carries flow the wrong way"))),
        }
    }
    let mut flow = direct;
    if balanced {
        // Mass routed through the hub pairs sources with sinks at distance
        // at least the cap (otherwise the direct arc would price out).
        let mut si = 0;
        let mut sj = 0;
        let mut out = destroyed.clone();
        let mut inn = created.clone();
        while si < n && sj < m {
            if out[si] <= 0.0 {
                si += 1;
                continue;
            }
            if inn[sj] <= 0.0 {
                sj += 1;
                continue;
            }
            let f = out[si].min(inn[sj]);
            flow.push((si, sj, f));
            out[si] -= f;
            inn[sj] -= f;
        }
        destroyed = vec![0.0; n];
        created = vec![0.0; m];
    }
    flow.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    // Gauge: source 0 at zero for equal masses; the hub at zero otherwise,
    // where the imbalance term makes the gauge matter.
    let pi = ns.potentials_with_root();
    let pi0 = if balanced && n > 0 { pi[0] } else { pi[hub] };
    let dual_u: Vec<f64> = (0..n).map(|i| -(pi[i] - pi0)).collect();
    let dual_w: Vec<f64> = (0..m).map(|j| pi[n + j] - pi0).collect();

    let cost_value = if balanced {
        flow.iter().map(|&(i, j, f)| f * cost(i, j).min(ground.cap)).sum()
    } else {
        flow.iter().map(|&(i, j, f)| f * cost(i, j).min(ground.cap)).sum::<f64>()
            + half * (destroyed.iter().sum::<f64>() + created.iter().sum::<f64>())
    };

    Ok(TransportPlan {
        source_index: merged_index(p_in, &p),
        sink_index: merged_index(q_in, &q),
        sources: p,
        sinks: q,
        flow,
        destroyed,
        created,
        cost_value,
        dual_u,
        dual_w,
        ground,
        pivots: ns.pivots(),
        pricing_rounds: rounds,
    })
}

/// Starting basis: candidate arcs in increasing cost order attach each sink
/// to one source with enough remaining mass; unattached sinks and all
/// source surpluses use their hub arcs. Sources sit directly under the hub,
/// so the tree has depth at most two and its flows are nonnegative.
fn greedy_basis(ns: &mut NetworkSimplex, n: usize, m: usize, a: &[f64], b: &[f64]) {
    let first = ns.first_arc();
    let mut arcs: Vec<(usize, f64)> = (first..first + ns.arc_count()).map(|e| (e, ns.arc(e).2)).collect();
    arcs.sort_by(|x, y| x.1.total_cmp(&y.1));
    let mut rem = a.to_vec();
    let mut attached = vec![usize::MAX; m];
    for (e, _) in arcs {
        let (i, t, _) = ns.arc(e);
        let j = t - n;
        if attached[j] == usize::MAX && rem[i] >= b[j] {
            rem[i] -= b[j];
            attached[j] = e;
        }
    }
    // Root arc of node u has index u.
    let tree: Vec<usize> = (0..n).chain((0..m).map(|j| if attached[j] == usize::MAX { n + j } else { attached[j] })).collect();
    ns.set_basis(&tree);
}

/// Random member of the unit ball of the `W` dual class: `f̂` is a clamped
/// minimum of cones with slopes at most one, so `|f̂| ≤ 1` and `Lip f̂ ≤ 1`;
/// `f = (1+|v|²) f̂`.
pub fn random_dual_function<R: Rng + ?Sized>(d: usize, rng: &mut R) -> impl Fn(&[f64]) -> f64 + Send + Sync {
    let cones = rng.random_range(1..=4);
    let params: Vec<(Vec<f64>, f64, f64)> = (0..cones)
        .map(|_| {
            let c: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            (c, rng.random::<f64>(), rng.random_range(-1.5..1.0))
        })
        .collect();
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    move |v: &[f64]| {
        let h = params
            .iter()
            .map(|(c, s, h)| s * distance(v, c) + h)
            .fold(f64::INFINITY, f64::min)
            .clamp(-1.0, 1.0);
        sign * h * (1.0 + norm_sq(v))
    }
}
