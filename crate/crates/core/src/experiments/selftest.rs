//! Invariant suite run by `kac-lab selftest`.

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::branching::{branch_run, Environment};
use crate::kernels::{povzner_gap, CollisionKernel};
use crate::model::{norm_sq, EmpiricalMeasure, TestFunction, Velocity};
use crate::rng::{derive_seed, stream, substream};
use crate::sampling::{rescale, rescale_velocities, sample_empirical, SourceLaw};
use crate::signed_measure::{tv_identity_check, FiniteSignedMeasure, MeasureFlow};
use crate::simulator::{gaussian_state, martingale_ledgers, run, KacPath, LedgerOptions};
use crate::transport::{w_distance, w_distance_general, w_plan, DEFAULT_EXACT_LIMIT};

use super::{consistency_experiment, ExperimentConfig, Violation};

/// Relative tolerance of per-event conservation.
pub const EVENT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub module: String,
    pub invariant: String,
    pub seed: u64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn violations(&self) -> Vec<Violation> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| Violation::new(&c.module, &c.invariant, c.seed, c.detail.clone()))
            .collect()
    }
}

/// Indices of events that break conservation of momentum or energy, or
/// whose pre-collision velocities disagree with the replayed state.
pub fn event_conservation_violations(path: &KacPath, tol: f64) -> Vec<usize> {
    let d = path.dim();
    let mut v: Vec<f64> = path.initial.velocities.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
    let mut bad = Vec::new();
    for (k, ev) in path.events.iter().enumerate() {
        let (a, b) = (&ev.pre.0, &ev.pre.1);
        let (c, e) = (&ev.post.0, &ev.post.1);
        let scale = 1.0 + norm_sq(a) + norm_sq(b);
        let replay = v[ev.i * d..(ev.i + 1) * d] == a[..] && v[ev.j * d..(ev.j + 1) * d] == b[..];
        let momentum = (0..d).map(|x| (a[x] + b[x] - c[x] - e[x]).abs()).fold(0.0, f64::max);
        let energy = (norm_sq(a) + norm_sq(b) - norm_sq(c) - norm_sq(e)).abs();
        if !replay || momentum > tol * scale.sqrt() || energy > tol * scale {
            bad.push(k);
        }
        v[ev.i * d..(ev.i + 1) * d].copy_from_slice(c);
        v[ev.j * d..(ev.j + 1) * d].copy_from_slice(e);
    }
    bad
}

type Check = fn(u64) -> Result<(), String>;

const CHECKS: &[(&str, &str, Check)] = &[
    ("simulator", "momentum and energy conservation", conservation),
    ("simulator", "martingale ledger identity", ledger),
    ("transport", "metric axioms and W in [0, 4]", metric_axioms),
    ("transport", "primal value equals dual value", primal_dual),
    ("transport", "bounded-Lipschitz extension agrees on the sphere", extension),
    ("kernels", "Povzner gap vanishes at p = 2", povzner_p2),
    ("sampling", "rescaled samples lie in the sphere", rescaling),
    ("signed_measure", "total variation identity", tv_identity),
    ("branching", "signed count and signed energy conservation", branching),
    ("experiments", "deterministic replicas", determinism),
];

/// Runs every check with seeds derived from `seed`.
pub fn selftest(seed: u64) -> SelftestReport {
    let checks = CHECKS
        .iter()
        .enumerate()
        .map(|(k, (module, invariant, f))| {
            let s = derive_seed(seed, &[k as u64]);
            let (passed, detail) = match f(s) {
                Ok(()) => (true, String::new()),
                Err(e) => (false, e),
            };
            CheckOutcome { module: module.to_string(), invariant: invariant.to_string(), seed: s, passed, detail }
        })
        .collect();
    SelftestReport { seed, checks }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn small_path(seed: u64, n: usize, t: f64) -> Result<KacPath, String> {
    let k = CollisionKernel::hard_sphere(3).map_err(err)?;
    let init = gaussian_state(n, 3, &mut stream(seed, 0));
    run(&init, &k, t, seed).map_err(err)
}

fn conservation(seed: u64) -> Result<(), String> {
    let p = small_path(seed, 256, 1.0)?;
    let audit = p.final_state().audit();
    ensure(audit.within(1e-10), || format!("final state audit {audit:?}"))?;
    let bad = event_conservation_violations(&p, EVENT_TOL);
    ensure(bad.is_empty(), || format!("events {bad:?} break conservation"))
}

fn ledger(seed: u64) -> Result<(), String> {
    let p = small_path(seed, 64, 0.5)?;
    let k = CollisionKernel::hard_sphere(3).map_err(err)?;
    let e = TestFunction::energy();
    let c = TestFunction::component(0);
    let h = TestFunction::bounded_harmonic(1.0, vec![0.7, -0.2, 0.4], 0.3);
    let ls = martingale_ledgers(&p, &[&e, &c, &h], &k, LedgerOptions { seed, ..Default::default() });
    for (f, l) in ls.iter().enumerate() {
        for x in l {
            let scale = 1.0 + x.jump_sum.abs() + x.compensator_integral.abs();
            ensure(x.residual <= 1e-9 * scale, || format!("function {f} at t = {}: residual {:e}", x.t, x.residual))?;
        }
    }
    Ok(())
}

fn sphere_sample(seed: u64, labels: &[u64], n: usize) -> Result<EmpiricalMeasure<f64>, String> {
    let law = SourceLaw::gaussian(3);
    Ok(rescale(&sample_empirical(&law, n, &mut substream(seed, labels))).map_err(err)?.to_measure())
}

fn metric_axioms(seed: u64) -> Result<(), String> {
    let mut rng = stream(seed, 0);
    for t in 0..30u64 {
        let m: Vec<EmpiricalMeasure<f64>> =
            (0..3u64).map(|k| sphere_sample(seed, &[t, k], rng.random_range(2..=12))).collect::<Result<_, _>>()?;
        let w = |a: usize, b: usize| w_distance(&m[a], &m[b]).map_err(err);
        let (ab, ba, bc, ac, aa) = (w(0, 1)?, w(1, 0)?, w(1, 2)?, w(0, 2)?, w(0, 0)?);
        ensure(aa.abs() <= 1e-12, || format!("triple {t}: W(a, a) = {aa:e}"))?;
        ensure((ab - ba).abs() <= 1e-9, || format!("triple {t}: asymmetry {ab} vs {ba}"))?;
        ensure(ac <= ab + bc + 1e-9, || format!("triple {t}: triangle {ac} > {ab} + {bc}"))?;
        ensure([ab, bc, ac].iter().all(|x| (0.0..=4.0).contains(x)), || format!("triple {t}: W outside [0, 4]"))?;
    }
    Ok(())
}

fn primal_dual(seed: u64) -> Result<(), String> {
    for t in 0..20u64 {
        let a = sphere_sample(seed, &[t, 0], 5 + t as usize)?;
        let b = sphere_sample(seed, &[t, 1], 40)?;
        let plan = w_plan(&a, &b, DEFAULT_EXACT_LIMIT).map_err(err)?;
        let gap = (plan.cost_value - plan.dual_value()).abs();
        ensure(gap <= 1e-9, || format!("instance {t}: primal-dual gap {gap:e}"))?;
        let v = plan.max_dual_violation();
        ensure(v <= 1e-9, || format!("instance {t}: dual infeasibility {v:e}"))?;
    }
    Ok(())
}

fn extension(seed: u64) -> Result<(), String> {
    for t in 0..10u64 {
        let a = sphere_sample(seed, &[t, 0], 16)?;
        let b = sphere_sample(seed, &[t, 1], 24)?;
        let (w, g) = (w_distance(&a, &b).map_err(err)?, w_distance_general(&a, &b).map_err(err)?);
        ensure((w - g).abs() <= 1e-9, || format!("instance {t}: {w} vs {g}"))?;
    }
    Ok(())
}

fn povzner_p2(seed: u64) -> Result<(), String> {
    let mut rng = stream(seed, 0);
    for d in [2, 3] {
        let k = CollisionKernel::hard_sphere(d).map_err(err)?;
        for _ in 0..20 {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let r = povzner_gap(&k, &v, &w, 2.0, 1.0, 12).map_err(err)?;
            let scale = 1.0 + norm_sq(&v) + norm_sq(&w);
            ensure(r.lhs.abs() <= 1e-8 * scale, || format!("d = {d}: p = 2 integral {:e}", r.lhs))?;
        }
    }
    Ok(())
}

fn rescaling(seed: u64) -> Result<(), String> {
    for (k, law) in [SourceLaw::gaussian(3), SourceLaw::two_point(2), SourceLaw::heavy_tail_for_order(3, 2.5).map_err(err)?]
        .iter()
        .enumerate()
    {
        let s = rescale(&sample_empirical(law, 50, &mut substream(seed, &[k as u64]))).map_err(err)?;
        let a = s.audit();
        ensure(a.within(1e-12), || format!("{}: audit {a:?}", law.name()))?;
        let again = rescale_velocities(s.velocities.clone()).map_err(err)?;
        let drift = s
            .velocities
            .iter()
            .zip(&again.velocities)
            .map(|(x, y)| x.distance(y))
            .fold(0.0, f64::max);
        ensure(drift <= 1e-12, || format!("{}: rescaling is not idempotent ({drift:e})", law.name()))?;
    }
    Ok(())
}

fn tv_identity(seed: u64) -> Result<(), String> {
    let mut rng = stream(seed, 0);
    let q = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
    let cells = 6;
    // Sign-constant flow: positive cells with non-negative rates.
    let mu0 = FiniteSignedMeasure::new((0..cells).map(|_| q(rng.random_range(1..10), 3)).collect());
    let nu = (0..40).map(|_| FiniteSignedMeasure::new((0..cells).map(|_| q(rng.random_range(0..5), 7)).collect())).collect();
    let flow = MeasureFlow::new(mu0, nu, q(1, 40)).map_err(err)?;
    let r = tv_identity_check(&flow, &flow.horizon()).map_err(err)?;
    ensure(r.discrepancy == q(0, 1), || format!("sign-constant flow: discrepancy {}", r.discrepancy))?;
    for t in 0..5 {
        let mu0 = FiniteSignedMeasure::new((0..cells).map(|_| q(rng.random_range(-9..10), 4)).collect());
        let nu = (0..40).map(|_| FiniteSignedMeasure::new((0..cells).map(|_| q(rng.random_range(-9..10), 2)).collect())).collect();
        let flow = MeasureFlow::new(mu0, nu, q(1, 40)).map_err(err)?;
        let r = tv_identity_check(&flow, &flow.horizon()).map_err(err)?;
        ensure(r.within_bound(), || format!("flow {t}: {:?}", r.summary()))?;
    }
    Ok(())
}

fn branching(seed: u64) -> Result<(), String> {
    let k = CollisionKernel::hard_sphere(3).map_err(err)?;
    let rho = EmpiricalMeasure::new(vec![
        (Velocity::from_vec(vec![1.0, 0.0, 0.0]), 0.5),
        (Velocity::from_vec(vec![-1.0, 0.0, 0.0]), 0.5),
    ])
    .map_err(err)?;
    let env = Environment::frozen(rho, 1.0).map_err(err)?;
    let v0 = [0.0, 1.0, 0.5];
    for r in 0..50 {
        let p = branch_run(&env, &k, 0.0, &v0, 1, 0.6, 10_000, stream(seed, r)).map_err(err)?;
        let count = p.signed_integral(|_| 1.0);
        ensure(count == 1.0, || format!("run {r}: signed count {count}"))?;
        let e = p.signed_integral(norm_sq);
        ensure((e - 1.25).abs() <= 1e-9 * (1.0 + p.len() as f64), || format!("run {r}: signed energy {e}"))?;
    }
    Ok(())
}

fn determinism(seed: u64) -> Result<(), String> {
    let cfg = ExperimentConfig { ns: vec![8, 16], t: 0.3, reps: 2, grid_points: 4, resamples: 200, seed, ..Default::default() };
    let a = consistency_experiment(&cfg).map_err(err)?;
    let b = consistency_experiment(&cfg).map_err(err)?;
    ensure(a == b, || "two runs of one configuration differ".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_run_passes() {
        let r = selftest(1);
        assert!(r.passed(), "{:#?}", r.violations());
        assert_eq!(r.checks.len(), CHECKS.len());
    }

    #[test]
    fn verdicts_are_deterministic() {
        assert_eq!(selftest(2), selftest(2));
    }

    #[test]
    fn corrupted_collision_is_pinpointed() {
        let mut p = small_path(3, 32, 0.5).unwrap();
        assert!(p.events.len() > 10);
        assert!(event_conservation_violations(&p, EVENT_TOL).is_empty());
        p.events[5].post.0[0] = -p.events[5].post.0[0];
        // Later events start from the uncorrupted state, so only event 5 and
        // the next event of either particle fail to replay.
        let bad = event_conservation_violations(&p, EVENT_TOL);
        assert_eq!(bad[0], 5);
    }
}
