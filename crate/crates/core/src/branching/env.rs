//! Piecewise-constant measure-valued environments.

use std::collections::HashMap;

use crate::model::{norm_sq, EmpiricalMeasure, Velocity};
use crate::simulator::KacPath;

use super::BranchError;

/// Slack allowed in the mass and energy conditions for environments built
/// from floating-point paths.
pub const SKP_TOL: f64 = 1e-9;

/// `ρ_t` constant on `[start_k, start_{k+1})`, the last piece running to
/// `horizon`.
#[derive(Clone, Debug)]
pub struct Environment {
    d: usize,
    pieces: Vec<(f64, EmpiricalMeasure<f64>)>,
    horizon: f64,
}

impl Environment {
    pub fn new(d: usize, pieces: Vec<(f64, EmpiricalMeasure<f64>)>, horizon: f64) -> Result<Self, BranchError> {
        if pieces.is_empty() || pieces[0].0 != 0.0 {
            return Err(BranchError::Environment("first piece must start at time 0".into()));
        }
        if !(horizon.is_finite() && horizon >= 0.0) {
            return Err(BranchError::Environment(format!("bad horizon {horizon}")));
        }
        for (k, (start, rho)) in pieces.iter().enumerate() {
            if k > 0 && !(*start > pieces[k - 1].0) {
                return Err(BranchError::Environment(format!("piece {k} does not start after piece {}", k - 1)));
            }
            if *start > horizon {
                return Err(BranchError::Environment(format!("piece {k} starts after the horizon")));
            }
            if let Some(dd) = rho.dim() {
                if dd != d {
                    return Err(BranchError::Dimension { expected: d, got: dd });
                }
            }
            let mass = rho.total_mass();
            let energy: f64 = rho.atoms().iter().map(|(v, w)| w * v.norm_sq()).sum();
            if rho.atoms().iter().any(|(_, w)| *w < 0.0) || mass > 1.0 + SKP_TOL || energy > 1.0 + SKP_TOL {
                return Err(BranchError::Skp { piece: k, mass, energy });
            }
        }
        Ok(Self { d, pieces, horizon })
    }

    /// The same measure at all times.
    pub fn frozen(rho: EmpiricalMeasure<f64>, horizon: f64) -> Result<Self, BranchError> {
        let d = rho.dim().ok_or_else(|| BranchError::Environment("empty frozen measure has no dimension".into()))?;
        Self::new(d, vec![(0.0, rho)], horizon)
    }

    /// `ρ ≡ 0`.
    pub fn zero(d: usize, horizon: f64) -> Self {
        Self { d, pieces: vec![(0.0, EmpiricalMeasure::zero())], horizon }
    }

    /// `ρ_t = (μ_t^a + μ_t^b)/2` for two Kac paths, with a piece boundary at
    /// every jump of either path.
    pub fn from_paths(a: &KacPath, b: &KacPath) -> Result<Self, BranchError> {
        let d = a.dim();
        if b.dim() != d {
            return Err(BranchError::Dimension { expected: d, got: b.dim() });
        }
        if a.start() != 0.0 || b.start() != 0.0 {
            return Err(BranchError::Environment("paths must start at time 0".into()));
        }
        let horizon = a.horizon.min(b.horizon);
        let flat = |p: &KacPath| -> Vec<f64> { p.initial.velocities.iter().flat_map(|v| v.as_slice().to_vec()).collect() };
        let (mut va, mut vb) = (flat(a), flat(b));
        let (wa, wb) = (0.5 / a.n() as f64, 0.5 / b.n() as f64);
        let build = |va: &[f64], vb: &[f64]| -> EmpiricalMeasure<f64> {
            let atoms = va
                .chunks_exact(d)
                .map(|x| (Velocity::from_vec(x.to_vec()), wa))
                .chain(vb.chunks_exact(d).map(|x| (Velocity::from_vec(x.to_vec()), wb)))
                .collect();
            EmpiricalMeasure::from_parts(atoms)
        };
        let mut pieces = vec![(0.0, build(&va, &vb))];
        let (mut i, mut j) = (0, 0);
        loop {
            let ta = a.events.get(i).map_or(f64::INFINITY, |e| e.time);
            let tb = b.events.get(j).map_or(f64::INFINITY, |e| e.time);
            let t = ta.min(tb);
            if !(t < horizon) {
                break;
            }
            let (v, ev) = if ta <= tb {
                i += 1;
                (&mut va, &a.events[i - 1])
            } else {
                j += 1;
                (&mut vb, &b.events[j - 1])
            };
            v[ev.i * d..(ev.i + 1) * d].copy_from_slice(&ev.post.0);
            v[ev.j * d..(ev.j + 1) * d].copy_from_slice(&ev.post.1);
            let rho = build(&va, &vb);
            if pieces.last().unwrap().0 == t {
                pieces.last_mut().unwrap().1 = rho;
            } else {
                pieces.push((t, rho));
            }
        }
        Self::new(d, pieces, horizon)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn pieces(&self) -> &[(f64, EmpiricalMeasure<f64>)] {
        &self.pieces
    }

    fn piece_end(&self, k: usize) -> f64 {
        self.pieces.get(k + 1).map_or(self.horizon, |p| p.0)
    }

    /// Index of the piece containing `t`.
    pub fn piece_index(&self, t: f64) -> usize {
        self.pieces.partition_point(|p| p.0 <= t).saturating_sub(1)
    }

    pub fn at(&self, t: f64) -> &EmpiricalMeasure<f64> {
        &self.pieces[self.piece_index(t)].1
    }

    /// `∫_s^t ⟨1 + |v|^q, ρ_r⟩ dr`.
    pub fn moment_integral(&self, q: f64, s: f64, t: f64) -> f64 {
        let mut acc = 0.0;
        for (k, (start, rho)) in self.pieces.iter().enumerate() {
            let lo = start.max(s);
            let hi = self.piece_end(k).min(t);
            if hi > lo {
                acc += (hi - lo) * weighted_mass(rho, q);
            }
        }
        acc
    }

    /// The moment envelope `(1 + |v_0|^2) exp(8 ∫_s^t m_3)` with
    /// `m_3 = ⟨1 + |v|^3, ρ⟩`.
    pub fn moment_envelope(&self, v0: &[f64], s: f64, t: f64) -> f64 {
        (1.0 + norm_sq(v0)) * (8.0 * self.moment_integral(3.0, s, t)).exp()
    }
}

/// `⟨1 + |v|^q, ρ⟩`.
pub fn weighted_mass(rho: &EmpiricalMeasure<f64>, q: f64) -> f64 {
    rho.atoms().iter().map(|(v, w)| w * (1.0 + v.norm_sq().powf(0.5 * q))).sum()
}

/// One piece of a pair of environments on a common atom list.
#[derive(Clone, Debug)]
pub(crate) struct JointPiece {
    pub start: f64,
    pub end: f64,
    pub x: Vec<f64>,
    pub w: [Vec<f64>; 2],
    pub wbar: Vec<f64>,
    pub speed: Vec<f64>,
    cum_w: Vec<f64>,
    cum_ws: Vec<f64>,
}

impl JointPiece {
    fn new(start: f64, end: f64, d: usize, atoms: [&EmpiricalMeasure<f64>; 2]) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut x = Vec::new();
        let mut w = [Vec::new(), Vec::new()];
        for (side, rho) in atoms.iter().enumerate() {
            for (v, m) in rho.atoms() {
                if *m == 0.0 {
                    continue;
                }
                let key: Vec<u64> = v.as_slice().iter().map(|c| c.to_bits()).collect();
                let k = *index.entry(key).or_insert_with(|| {
                    x.extend_from_slice(v.as_slice());
                    w[0].push(0.0);
                    w[1].push(0.0);
                    w[0].len() - 1
                });
                w[side][k] += m;
            }
        }
        let wbar: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| a.max(*b)).collect();
        let speed: Vec<f64> = x.chunks_exact(d.max(1)).map(|v| norm_sq(v).sqrt()).collect();
        let mut cum_w = Vec::with_capacity(wbar.len());
        let mut cum_ws = Vec::with_capacity(wbar.len());
        let (mut a, mut b) = (0.0, 0.0);
        for (wb, s) in wbar.iter().zip(&speed) {
            a += wb;
            b += wb * s;
            cum_w.push(a);
            cum_ws.push(b);
        }
        Self { start, end, x, w, wbar, speed, cum_w, cum_ws }
    }

    /// `Σ_j w̄_j`.
    pub fn mass(&self) -> f64 {
        self.cum_w.last().copied().unwrap_or(0.0)
    }

    /// `Σ_j w̄_j |x_j|`.
    pub fn speed_mass(&self) -> f64 {
        self.cum_ws.last().copied().unwrap_or(0.0)
    }

    fn pick(cum: &[f64], u: f64) -> usize {
        let target = u * cum.last().copied().unwrap_or(0.0);
        cum.partition_point(|&c| c <= target).min(cum.len() - 1)
    }

    /// Atom index with probability `∝ w̄_j`.
    pub fn pick_by_mass(&self, u: f64) -> usize {
        Self::pick(&self.cum_w, u)
    }

    /// Atom index with probability `∝ w̄_j |x_j|`.
    pub fn pick_by_speed(&self, u: f64) -> usize {
        Self::pick(&self.cum_ws, u)
    }
}

/// Two environments on a common refinement of their piece boundaries, with
/// atoms matched by exact velocity.
#[derive(Clone, Debug)]
pub(crate) struct JointEnvironment {
    pub d: usize,
    pub pieces: Vec<JointPiece>,
    pub horizon: f64,
}

impl JointEnvironment {
    pub fn new(a: &Environment, b: &Environment) -> Result<Self, BranchError> {
        if a.d != b.d {
            return Err(BranchError::Dimension { expected: a.d, got: b.d });
        }
        let horizon = a.horizon.min(b.horizon);
        let mut starts: Vec<f64> = a.pieces.iter().chain(&b.pieces).map(|p| p.0).filter(|&s| s < horizon || s == 0.0).collect();
        starts.sort_by(f64::total_cmp);
        starts.dedup();
        let pieces = starts
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let end = starts.get(k + 1).copied().unwrap_or(horizon);
                JointPiece::new(s, end, a.d, [a.at(s), b.at(s)])
            })
            .collect();
        Ok(Self { d: a.d, pieces, horizon })
    }

    pub fn single(e: &Environment) -> Self {
        Self::new(e, e).expect("same dimension")
    }

    pub fn piece_index(&self, t: f64) -> usize {
        self.pieces.partition_point(|p| p.start <= t).saturating_sub(1)
    }

    /// `∫_s^t ⟨1 + |v|^q, |ρ^1_r - ρ^2_r|⟩ dr`.
    pub fn difference_integral(&self, q: f64, s: f64, t: f64) -> f64 {
        let mut acc = 0.0;
        for p in &self.pieces {
            let (lo, hi) = (p.start.max(s), p.end.min(t));
            if hi > lo {
                let m: f64 = p
                    .w[0]
                    .iter()
                    .zip(&p.w[1])
                    .zip(&p.speed)
                    .map(|((a, b), s)| (a - b).abs() * (1.0 + s.powf(q)))
                    .sum();
                acc += (hi - lo) * m;
            }
        }
        acc
    }
}

/// `∫_s^t ⟨1 + |v|^q, |ρ^1_r - ρ^2_r|⟩ dr` for two environments.
pub fn difference_integral(a: &Environment, b: &Environment, q: f64, s: f64, t: f64) -> Result<f64, BranchError> {
    Ok(JointEnvironment::new(a, b)?.difference_integral(q, s, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::CollisionKernel;
    use crate::rng::stream;
    use crate::simulator::{gaussian_state, run};

    fn two_point() -> EmpiricalMeasure<f64> {
        EmpiricalMeasure::new(vec![
            (Velocity::from_vec(vec![1.0, 0.0, 0.0]), 0.5),
            (Velocity::from_vec(vec![-1.0, 0.0, 0.0]), 0.5),
        ])
        .unwrap()
    }

    #[test]
    fn rejects_heavy_environment() {
        let rho = EmpiricalMeasure::new(vec![(Velocity::from_vec(vec![2.0, 0.0, 0.0]), 0.5)]).unwrap();
        assert!(matches!(Environment::frozen(rho, 1.0), Err(BranchError::Skp { .. })));
        let rho = EmpiricalMeasure::new(vec![(Velocity::from_vec(vec![0.0, 0.0, 0.0]), 1.5)]).unwrap();
        assert!(matches!(Environment::frozen(rho, 1.0), Err(BranchError::Skp { .. })));
    }

    #[test]
    fn frozen_moments() {
        let e = Environment::frozen(two_point(), 2.0).unwrap();
        assert_eq!(e.moment_integral(3.0, 0.0, 2.0), 4.0);
        assert_eq!(e.moment_integral(3.0, 0.5, 1.0), 1.0);
        assert!((e.moment_envelope(&[0.0, 1.0, 0.0], 0.0, 1.0) - 2.0 * 16f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn path_environment_tracks_both_paths() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let mut rng = stream(5, 0);
        let a = run(&gaussian_state(8, 3, &mut rng), &k, 0.5, 1).unwrap();
        let b = run(&gaussian_state(12, 3, &mut rng), &k, 0.5, 2).unwrap();
        let e = Environment::from_paths(&a, &b).unwrap();
        assert_eq!(e.pieces().len(), 1 + a.events.len() + b.events.len());
        for &t in &[0.0, 0.1, 0.27, 0.49] {
            let rho = e.at(t);
            assert!((rho.total_mass() - 1.0).abs() < 1e-12);
            let fa = a.flat_at(t).unwrap();
            let fb = b.flat_at(t).unwrap();
            let want: f64 = fa.iter().map(|x| x * x).sum::<f64>() / 16.0 + fb.iter().map(|x| x * x).sum::<f64>() / 24.0;
            let got: f64 = rho.atoms().iter().map(|(v, w)| w * v.norm_sq()).sum();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_matches_shared_atoms() {
        let e1 = Environment::frozen(two_point(), 1.0).unwrap();
        let rho2 = EmpiricalMeasure::new(vec![
            (Velocity::from_vec(vec![1.0, 0.0, 0.0]), 0.3),
            (Velocity::from_vec(vec![0.0, 1.0, 0.0]), 0.5),
        ])
        .unwrap();
        let e2 = Environment::new(3, vec![(0.0, two_point()), (0.5, rho2)], 1.0).unwrap();
        let j = JointEnvironment::new(&e1, &e2).unwrap();
        assert_eq!(j.pieces.len(), 2);
        assert_eq!(j.pieces[1].x.len(), 9);
        assert_eq!(j.pieces[1].wbar, vec![0.5, 0.5, 0.5]);
        // |ρ1 - ρ2| = 0.2 δ_{e1} + 0.5 δ_{-e1} + 0.5 δ_{e2}, each weighted by 2.
        assert!((j.difference_integral(1.0, 0.0, 1.0) - 0.5 * 2.0 * 1.2).abs() < 1e-12);
    }
}
