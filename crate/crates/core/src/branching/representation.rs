//! Monte Carlo check of the representation formula
//! `⟨f, μ_t^N - μ_t^{N'}⟩ = ⟨f_{0t}, μ_0^N - μ_0^{N'}⟩
//!   + ∫_0^t ⟨f_{st}, dM_s^N⟩ - ∫_0^t ⟨f_{st}, dM_s^{N'}⟩`
//! with `ρ_t = (μ_t^N + μ_t^{N'})/2`.
//!
//! Each `f_{st}(v)` is replaced by independent branching-run estimates. The
//! martingale integral splits into jump terms, evaluated at every jump, and
//! the compensator `∫_0^t ⟨f_{st}, Q(μ_s)⟩ ds`, estimated by sampling a
//! stratified time, an ordered pair of distinct particles and an outgoing
//! direction. Every piece is unbiased given the two paths, so
//! `(LHS - RHS)/stderr` is a z-score.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{sample_sigma_into, CollisionKernel};
use crate::model::{collide_into, distance, TestFunction};
use crate::rng::{derive_seed, substream};
use crate::simulator::KacPath;

use super::env::JointEnvironment;
use super::{check_kernel, estimate_ef_joint, run_joint, BranchError, Environment, Particle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationOptions {
    /// Replicas per initial atom.
    pub init_reps: usize,
    /// Replicas per velocity touched by a jump.
    pub jump_reps: usize,
    /// Compensator samples per path.
    pub compensator_samples: usize,
    pub cap: usize,
}

impl Default for RepresentationOptions {
    fn default() -> Self {
        Self { init_reps: 100, jump_reps: 100, compensator_samples: 2000, cap: super::DEFAULT_CAP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationReport {
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub initial_term: f64,
    /// Jump sums and compensators for the two paths.
    pub jumps: [f64; 2],
    pub compensators: [f64; 2],
    pub stderr: f64,
    pub z: f64,
    pub capped: usize,
    pub unreliable: bool,
}

/// Mean and variance of the mean of `f_{st}(v)`.
struct Est {
    mean: f64,
    var: f64,
    capped: usize,
}

#[allow(clippy::too_many_arguments)]
fn est(
    joint: &JointEnvironment,
    kernel: &CollisionKernel,
    f: &TestFunction<f64>,
    s: f64,
    t: f64,
    v: &[f64],
    reps: usize,
    cap: usize,
    seed: u64,
) -> Result<Est, BranchError> {
    let e = estimate_ef_joint(joint, kernel, s, t, f, v, reps, cap, seed)?;
    let var = if e.stderr.is_finite() { e.stderr * e.stderr } else { 0.0 };
    Ok(Est { mean: if e.mean.is_finite() { e.mean } else { 0.0 }, var, capped: e.capped })
}

pub fn verify_representation(
    path_n: &KacPath,
    path_np: &KacPath,
    kernel: &CollisionKernel,
    f: &TestFunction<f64>,
    t: f64,
    opts: &RepresentationOptions,
    seed: u64,
) -> Result<RepresentationReport, BranchError> {
    let env = Environment::from_paths(path_n, path_np)?;
    check_kernel(env.dim(), kernel)?;
    if !(0.0..=env.horizon()).contains(&t) {
        return Err(BranchError::Times { s: 0.0, t, horizon: env.horizon() });
    }
    let joint = JointEnvironment::single(&env);
    let d = env.dim();
    let paths = [path_n, path_np];
    let coef = [1.0 / path_n.n() as f64, -1.0 / path_np.n() as f64];

    // Accumulated in the same order as the initial term, so that the two
    // agree bit for bit at t = 0.
    let mut lhs = 0.0;
    for (k, p) in paths.iter().enumerate() {
        for x in p.flat_at(t).map_err(|e| BranchError::Invalid(e.to_string()))?.chunks_exact(d) {
            lhs += coef[k] * f.eval(x);
        }
    }

    let mut var = 0.0;
    let mut capped = 0;

    // Initial term.
    let mut initial_term = 0.0;
    for (k, p) in paths.iter().enumerate() {
        let atoms: Vec<Vec<f64>> = p.initial.velocities.iter().map(|v| v.as_slice().to_vec()).collect();
        let ests: Vec<Est> = atoms
            .par_iter()
            .enumerate()
            .map(|(a, v)| est(&joint, kernel, f, 0.0, t, v, opts.init_reps, opts.cap, derive_seed(seed, &[0, k as u64, a as u64])))
            .collect::<Result<_, _>>()?;
        for e in ests {
            initial_term += coef[k] * e.mean;
            var += coef[k] * coef[k] * e.var;
            capped += e.capped;
        }
    }

    // Jump terms.
    let mut jumps = [0.0; 2];
    for (k, p) in paths.iter().enumerate() {
        let evs: Vec<_> = p.events.iter().take_while(|e| e.time <= t).collect();
        let terms: Vec<(f64, f64, usize)> = evs
            .par_iter()
            .enumerate()
            .map(|(q, ev)| {
                let mut m = 0.0;
                let mut v2 = 0.0;
                let mut c = 0;
                let pts = [(&ev.post.0, 1.0), (&ev.post.1, 1.0), (&ev.pre.0, -1.0), (&ev.pre.1, -1.0)];
                for (r, (x, sgn)) in pts.iter().enumerate() {
                    let e = est(&joint, kernel, f, ev.time, t, x, opts.jump_reps, opts.cap, derive_seed(seed, &[1, k as u64, q as u64, r as u64]))?;
                    m += sgn * e.mean;
                    v2 += e.var;
                    c += e.capped;
                }
                Ok((m, v2, c))
            })
            .collect::<Result<_, BranchError>>()?;
        for (m, v2, c) in terms {
            jumps[k] += coef[k] * m;
            var += coef[k] * coef[k] * v2;
            capped += c;
        }
    }

    // Compensators.
    let mut compensators = [0.0; 2];
    for (k, p) in paths.iter().enumerate() {
        let (mean, se2, c) = compensator(&joint, kernel, f, p, t, opts, derive_seed(seed, &[2, k as u64]))?;
        compensators[k] = coef[k] * mean;
        var += coef[k] * coef[k] * se2;
        capped += c;
    }

    let rhs = initial_term + (jumps[0] - compensators[0]) + (jumps[1] - compensators[1]);
    let stderr = var.sqrt();
    let diff = lhs - rhs;
    let z = if stderr > 0.0 { diff / stderr } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(RepresentationReport {
        t,
        lhs,
        rhs,
        initial_term,
        jumps,
        compensators,
        stderr,
        z,
        capped,
        unreliable: capped > 0,
    })
}

/// Estimate of `N ∫_0^t ⟨f_{st}, Q(μ_s^N)⟩ ds` (the factor `N` is removed
/// by the caller's coefficient) with its squared standard error.
fn compensator(
    joint: &JointEnvironment,
    kernel: &CollisionKernel,
    f: &TestFunction<f64>,
    p: &KacPath,
    t: f64,
    opts: &RepresentationOptions,
    seed: u64,
) -> Result<(f64, f64, usize), BranchError> {
    let m = opts.compensator_samples;
    if t == 0.0 || m == 0 || p.n() < 2 {
        return Ok((0.0, 0.0, 0));
    }
    let n = p.n();
    let d = p.dim();
    let times: Vec<f64> = {
        let mut rng = substream(seed, &[0]);
        (0..m).map(|q| t * (q as f64 + rng.random::<f64>()) / m as f64).collect()
    };
    let states = p.flats_at(&times).map_err(|e| BranchError::Invalid(e.to_string()))?;
    let samples: Vec<Option<f64>> = (0..m)
        .into_par_iter()
        .map(|q| {
            let mut rng = substream(seed, &[1, q as u64]);
            let s = times[q];
            let v = &states[q];
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let (vi, vj) = (&v[i * d..(i + 1) * d], &v[j * d..(j + 1) * d]);
            let r = distance(vi, vj);
            if r == 0.0 {
                return Ok(Some(0.0));
            }
            let u: Vec<f64> = vi.iter().zip(vj).map(|(a, b)| (a - b) / r).collect();
            let mut sigma = vec![0.0; d];
            sample_sigma_into(kernel, &u, &mut rng, &mut sigma);
            let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
            collide_into(vi, vj, &sigma, &mut a, &mut b);
            let mut g = 0.0;
            for (x, sgn) in [(&a[..], 1.0), (&b[..], 1.0), (vi, -1.0), (vj, -1.0)] {
                let start = Particle::single(1, 1, x.to_vec());
                match run_joint(joint, kernel, s, vec![start], t, opts.cap, &mut rng) {
                    Ok((ps, _)) => g += sgn * ps.iter().map(|q| q.sign as f64 * f.eval(&q.v)).sum::<f64>(),
                    Err(BranchError::Explosion { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            // N^{-2} Σ_{i≠j} over N(N-1) ordered pairs, times N.
            Ok(Some(t * (n - 1) as f64 * r * g))
        })
        .collect::<Result<_, BranchError>>()?;
    let capped = samples.iter().filter(|x| x.is_none()).count();
    let xs: Vec<f64> = samples.into_iter().flatten().collect();
    let (mean, se) = super::mean_se(&xs);
    Ok((mean, se * se, capped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::simulator::{gaussian_state, run};

    fn paths(seed: u64, t: f64) -> (KacPath, KacPath) {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let mut rng = stream(seed, 0);
        let a = run(&gaussian_state(6, 3, &mut rng), &k, t, seed).unwrap();
        let b = run(&gaussian_state(10, 3, &mut rng), &k, t, seed + 1).unwrap();
        (a, b)
    }

    #[test]
    fn zero_time_is_exact() {
        let (a, b) = paths(1, 0.3);
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let f = TestFunction::bounded_harmonic(1.0, vec![0.5, 0.2, -0.1], 0.4);
        let r = verify_representation(&a, &b, &k, &f, 0.0, &RepresentationOptions::default(), 3).unwrap();
        assert_eq!(r.lhs, r.rhs);
        assert_eq!(r.z, 0.0);
    }

    #[test]
    fn energy_functional_gives_zero_on_both_sides() {
        let (a, b) = paths(2, 0.3);
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let opts = RepresentationOptions { init_reps: 10, jump_reps: 10, compensator_samples: 100, ..Default::default() };
        let r = verify_representation(&a, &b, &k, &TestFunction::energy(), 0.3, &opts, 4).unwrap();
        assert!(r.lhs.abs() < 1e-12);
        assert!(r.rhs.abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn smooth_function_passes_z_test() {
        let (a, b) = paths(3, 0.3);
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let f = TestFunction::bounded_harmonic(1.0, vec![0.8, -0.3, 0.2], 0.1);
        let r = verify_representation(&a, &b, &k, &f, 0.3, &RepresentationOptions::default(), 5).unwrap();
        assert!(r.z.abs() < 4.0, "{r:?}");
        assert!(r.stderr < 0.1);
    }
}
