//! Velocities, particle states, empirical measures and the collision map.
//!
//! A particle state of the Kac process is a normalized empirical measure on
//! `R^d`: mean velocity zero and mean squared speed one. Collisions conserve
//! both, so the state never leaves that set in exact arithmetic. Floating
//! point drift is audited against [`EPS_CONS`] rather than renormalized away.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Tolerance on momentum and energy drift of a particle state.
pub const EPS_CONS: f64 = 1e-8;

/// Tolerance on `|sigma| = 1` for collision directions.
pub const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("dimension {0} is below 2")]
    DimensionTooSmall(usize),
    #[error("direction has norm {0}, expected 1")]
    NonUnitDirection(f64),
    #[error("non-finite component in velocity")]
    NonFinite,
    #[error("negative or non-finite weight {weight} at atom {atom}")]
    BadWeight { atom: usize, weight: f64 },
    #[error("a particle state needs at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("state is not centred: |mean velocity| = {0:e}")]
    NotCentred(f64),
    #[error("state energy is {0}, expected 1")]
    WrongEnergy(f64),
    #[error("measure mass is {0}, expected 1")]
    WrongMass(f64),
    #[error("test function is non-finite at atom {atom}")]
    NonFiniteEvaluation { atom: usize },
    #[error("measure has no atoms")]
    Empty,
    #[error("sample of odd size {0} has zero spread and no canonical rescaling")]
    DegenerateSpread(usize),
}

/// A velocity in `R^d`, `d >= 2`.
#[derive(Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Velocity<T = f64>(Vec<T>);

impl<T: Real> Velocity<T> {
    pub fn new(components: Vec<T>) -> Result<Self, ModelError> {
        if components.len() < 2 {
            return Err(ModelError::DimensionTooSmall(components.len()));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self(components))
    }

    /// Wraps components without validation. Hot loops use this after checking
    /// dimensions once.
    #[inline]
    pub fn from_vec(components: Vec<T>) -> Self {
        Self(components)
    }

    pub fn from_f64(components: &[f64]) -> Result<Self, ModelError> {
        Self::new(components.iter().map(|&c| T::of(c)).collect())
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![T::zero(); d])
    }

    /// The `k`-th standard basis vector scaled by `scale`.
    pub fn axis(d: usize, k: usize, scale: T) -> Self {
        let mut v = vec![T::zero(); d];
        v[k] = scale;
        Self(v)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    #[inline]
    pub fn norm_sq(&self) -> T {
        norm_sq(&self.0)
    }

    #[inline]
    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn dot(&self, other: &Self) -> T {
        dot(&self.0, &other.0)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a + b).collect())
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.iter().map(|&a| a * s).collect())
    }

    pub fn distance(&self, other: &Self) -> T {
        distance(&self.0, &other.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Velocity<U> {
        Velocity(self.0.iter().map(|c| U::of(c.to_f64_lossy())).collect())
    }
}

impl<T: fmt::Debug> fmt::Debug for Velocity<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub(crate) fn norm_sq<T: Real>(a: &[T]) -> T {
    dot(a, a)
}

#[inline]
pub(crate) fn distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        .sqrt()
}

/// Post-collision velocities `(v', v'_*)` for pre-collision `(v, v_*)` and a
/// unit direction of separation `sigma`:
/// `v' + v'_* = v + v_*`, `v' - v'_* = |v - v_*| sigma`.
pub fn collide<T: Real>(
    v: &Velocity<T>,
    v_star: &Velocity<T>,
    sigma: &Velocity<T>,
) -> Result<(Velocity<T>, Velocity<T>), ModelError> {
    if v.dim() != v_star.dim() {
        return Err(ModelError::DimensionMismatch(v.dim(), v_star.dim()));
    }
    if v.dim() != sigma.dim() {
        return Err(ModelError::DimensionMismatch(v.dim(), sigma.dim()));
    }
    let n = sigma.norm();
    if (n - T::one()).abs() > T::of(UNIT_TOL).max(T::rounding_tol()) {
        return Err(ModelError::NonUnitDirection(n.to_f64_lossy()));
    }
    Ok(collide_unchecked(v, v_star, sigma))
}

/// [`collide`] without the dimension and unit-norm checks.
#[inline]
pub fn collide_unchecked<T: Real>(
    v: &Velocity<T>,
    v_star: &Velocity<T>,
    sigma: &Velocity<T>,
) -> (Velocity<T>, Velocity<T>) {
    let d = v.dim();
    let mut a = vec![T::zero(); d];
    let mut b = vec![T::zero(); d];
    collide_into(&v.0, &v_star.0, &sigma.0, &mut a, &mut b);
    (Velocity(a), Velocity(b))
}

/// Slice form of the collision map writing into caller buffers.
#[inline]
pub fn collide_into<T: Real>(v: &[T], v_star: &[T], sigma: &[T], out: &mut [T], out_star: &mut [T]) {
    let half = T::of(0.5);
    let r = distance(v, v_star) * half;
    for k in 0..v.len() {
        let c = (v[k] + v_star[k]) * half;
        out[k] = c + r * sigma[k];
        out_star[k] = c - r * sigma[k];
    }
}

/// Signature of a collision map, so audits can be run against a substitute.
pub type CollisionMap<T> = fn(&Velocity<T>, &Velocity<T>, &Velocity<T>) -> (Velocity<T>, Velocity<T>);

/// `N` velocities forming an element of the normalized empirical set `S_N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState<T = f64> {
    pub velocities: Vec<Velocity<T>>,
    pub time: T,
}

/// Momentum and energy deviation of a state from the normalized set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationAudit {
    /// `|N^{-1} sum v_i|`
    pub momentum: f64,
    /// `|N^{-1} sum |v_i|^2 - 1|`
    pub energy: f64,
}

impl ConservationAudit {
    pub fn within(&self, tol: f64) -> bool {
        self.momentum <= tol && self.energy <= tol
    }
}

impl<T: Real> ParticleState<T> {
    /// Validates `N >= 2`, a common dimension `d >= 2`, finite components and
    /// the centring and energy constraints within [`EPS_CONS`].
    pub fn new(velocities: Vec<Velocity<T>>, time: T) -> Result<Self, ModelError> {
        let s = Self::new_unchecked(velocities, time)?;
        let audit = s.audit();
        let tol = cons_tol::<T>();
        if audit.momentum > tol {
            return Err(ModelError::NotCentred(audit.momentum));
        }
        if audit.energy > tol {
            return Err(ModelError::WrongEnergy(1.0 + audit.energy));
        }
        Ok(s)
    }

    /// Structural checks only (count, dimension, finiteness).
    pub fn new_unchecked(velocities: Vec<Velocity<T>>, time: T) -> Result<Self, ModelError> {
        if velocities.len() < 2 {
            return Err(ModelError::TooFewParticles(velocities.len()));
        }
        let d = velocities[0].dim();
        if d < 2 {
            return Err(ModelError::DimensionTooSmall(d));
        }
        for v in &velocities {
            if v.dim() != d {
                return Err(ModelError::DimensionMismatch(d, v.dim()));
            }
            if !v.is_finite() {
                return Err(ModelError::NonFinite);
            }
        }
        Ok(Self { velocities, time })
    }

    pub fn n(&self) -> usize {
        self.velocities.len()
    }

    pub fn dim(&self) -> usize {
        self.velocities[0].dim()
    }

    pub fn momentum(&self) -> Velocity<T> {
        let d = self.dim();
        let mut m = vec![T::zero(); d];
        for v in &self.velocities {
            for (a, &b) in m.iter_mut().zip(v.as_slice()) {
                *a = *a + b;
            }
        }
        Velocity(m)
    }

    /// Mean squared speed `N^{-1} sum |v_i|^2`.
    pub fn energy(&self) -> T {
        let s: T = self.velocities.iter().map(|v| v.norm_sq()).sum();
        s / T::of(self.n() as f64)
    }

    pub fn audit(&self) -> ConservationAudit {
        let n = self.n() as f64;
        ConservationAudit {
            momentum: self.momentum().norm().to_f64_lossy() / n,
            energy: (self.energy().to_f64_lossy() - 1.0).abs(),
        }
    }

    /// Uniform-weight empirical measure `N^{-1} sum delta_{v_i}`.
    pub fn to_measure(&self) -> EmpiricalMeasure<T> {
        let w = T::one() / T::of(self.n() as f64);
        EmpiricalMeasure::from_parts(self.velocities.iter().map(|v| (v.clone(), w)).collect())
    }
}

fn cons_tol<T: Real>() -> f64 {
    EPS_CONS.max(T::epsilon().to_f64_lossy() * 1e3)
}

/// Finite measure with finitely many weighted atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure<T = f64> {
    atoms: Vec<(Velocity<T>, T)>,
    total_mass: T,
}

#[derive(Serialize, Deserialize)]
struct MeasureRepr<T> {
    atoms: Vec<(Velocity<T>, T)>,
    mass: T,
}

impl<T: Real + Serialize> Serialize for EmpiricalMeasure<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MeasureRepr { atoms: self.atoms.clone(), mass: self.total_mass }.serialize(s)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for EmpiricalMeasure<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MeasureRepr::<T>::deserialize(d)?;
        let m = Self::new(repr.atoms).map_err(serde::de::Error::custom)?;
        let tol = T::of(1e-12).max(T::rounding_tol()) * (T::one() + repr.mass.abs());
        if (m.total_mass - repr.mass).abs() > tol {
            return Err(serde::de::Error::custom(format!(
                "declared mass {} does not match atom weights {}",
                repr.mass, m.total_mass
            )));
        }
        Ok(m)
    }
}

impl<T: Real> EmpiricalMeasure<T> {
    pub fn new(atoms: Vec<(Velocity<T>, T)>) -> Result<Self, ModelError> {
        if let Some((v, _)) = atoms.first() {
            let d = v.dim();
            if d < 2 {
                return Err(ModelError::DimensionTooSmall(d));
            }
            for (i, (v, w)) in atoms.iter().enumerate() {
                if v.dim() != d {
                    return Err(ModelError::DimensionMismatch(d, v.dim()));
                }
                if !v.is_finite() {
                    return Err(ModelError::NonFinite);
                }
                if !w.is_finite() || *w < T::zero() {
                    return Err(ModelError::BadWeight { atom: i, weight: w.to_f64_lossy() });
                }
            }
        }
        Ok(Self::from_parts(atoms))
    }

    pub(crate) fn from_parts(atoms: Vec<(Velocity<T>, T)>) -> Self {
        let total_mass = atoms.iter().map(|(_, w)| *w).sum();
        Self { atoms, total_mass }
    }

    /// Uniform weights `1/n` on the given velocities.
    pub fn uniform(velocities: Vec<Velocity<T>>) -> Result<Self, ModelError> {
        if velocities.is_empty() {
            return Err(ModelError::Empty);
        }
        let w = T::one() / T::of(velocities.len() as f64);
        Self::new(velocities.into_iter().map(|v| (v, w)).collect())
    }

    pub fn zero() -> Self {
        Self { atoms: Vec::new(), total_mass: T::zero() }
    }

    pub fn atoms(&self) -> &[(Velocity<T>, T)] {
        &self.atoms
    }

    pub fn into_atoms(self) -> Vec<(Velocity<T>, T)> {
        self.atoms
    }

    pub fn total_mass(&self) -> T {
        self.total_mass
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.atoms.first().map(|(v, _)| v.dim())
    }

    /// Un-normalized first moment `sum w_i v_i`.
    pub fn first_moment(&self) -> Option<Velocity<T>> {
        let d = self.dim()?;
        let mut m = vec![T::zero(); d];
        for (v, w) in &self.atoms {
            for (a, &b) in m.iter_mut().zip(v.as_slice()) {
                *a = *a + *w * b;
            }
        }
        Some(Velocity(m))
    }

    /// Checks membership of the Boltzmann sphere: unit mass, zero mean,
    /// unit energy, each within `tol`.
    pub fn check_boltzmann_sphere(&self, tol: f64) -> Result<(), ModelError> {
        let mass = self.total_mass.to_f64_lossy();
        if (mass - 1.0).abs() > tol {
            return Err(ModelError::WrongMass(mass));
        }
        let mean = self.first_moment().ok_or(ModelError::Empty)?.norm().to_f64_lossy();
        if mean > tol {
            return Err(ModelError::NotCentred(mean));
        }
        let energy = moment(self, T::of(2.0)).to_f64_lossy();
        if (energy - 1.0).abs() > tol {
            return Err(ModelError::WrongEnergy(energy));
        }
        Ok(())
    }

    /// Merges atoms with bit-identical velocities, summing their weights.
    /// Order of first occurrence is kept.
    pub fn merge_duplicates(&self) -> Self {
        use std::collections::HashMap;
        let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(self.atoms.len());
        let mut out: Vec<(Velocity<T>, T)> = Vec::with_capacity(self.atoms.len());
        for (v, w) in &self.atoms {
            let key: Vec<u64> = v.as_slice().iter().map(|c| c.to_f64_lossy().to_bits()).collect();
            match index.get(&key) {
                Some(&k) => out[k].1 = out[k].1 + *w,
                None => {
                    index.insert(key, out.len());
                    out.push((v.clone(), *w));
                }
            }
        }
        Self::from_parts(out)
    }

    /// Multiplies every weight by `s`.
    pub fn scaled(&self, s: T) -> Self {
        Self::from_parts(self.atoms.iter().map(|(v, w)| (v.clone(), *w * s)).collect())
    }
}

/// Un-normalized moment `sum w_i |v_i|^q`.
pub fn moment<T: Real>(mu: &EmpiricalMeasure<T>, q: T) -> T {
    if q == T::zero() {
        return mu.total_mass;
    }
    let two = T::of(2.0);
    mu.atoms
        .iter()
        .map(|(v, w)| {
            let r2 = v.norm_sq();
            let p = if q == two { r2 } else { r2.powf(q / two) };
            *w * p
        })
        .sum()
}

/// Pairing `<f, mu> = sum w_i f(v_i)`.
pub fn integrate<T: Real>(f: &TestFunction<T>, mu: &EmpiricalMeasure<T>) -> Result<T, ModelError> {
    let mut acc = T::zero();
    for (i, (v, w)) in mu.atoms.iter().enumerate() {
        let y = f.eval(v.as_slice());
        if !y.is_finite() {
            return Err(ModelError::NonFiniteEvaluation { atom: i });
        }
        acc = acc + *w * y;
    }
    Ok(acc)
}

type Evaluator<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;

/// A test function on `R^d` with a declared weighted norm `||f||_(p)`:
/// `|f(v)| <= norm (1+|v|^p)` and `f/(1+|v|^p)` is `norm`-Lipschitz.
#[derive(Clone)]
pub struct TestFunction<T = f64> {
    name: String,
    evaluator: Evaluator<T>,
    weight_order: T,
    declared_norm: T,
}

impl<T: fmt::Debug> fmt::Debug for TestFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("p", &self.weight_order)
            .field("norm", &self.declared_norm)
            .finish()
    }
}

/// A failed membership spot check.
#[derive(Debug, Clone, PartialEq)]
pub struct NormViolation {
    pub point: Vec<f64>,
    pub other: Option<Vec<f64>>,
    pub ratio: f64,
}

impl<T: Real> TestFunction<T> {
    pub fn new<F>(name: impl Into<String>, weight_order: T, declared_norm: T, f: F) -> Self
    where
        F: Fn(&[T]) -> T + Send + Sync + 'static,
    {
        Self { name: name.into(), evaluator: Arc::new(f), weight_order, declared_norm }
    }

    #[inline]
    pub fn eval(&self, v: &[T]) -> T {
        (self.evaluator)(v)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight_order(&self) -> T {
        self.weight_order
    }

    pub fn declared_norm(&self) -> T {
        self.declared_norm
    }

    pub fn constant(c: T) -> Self {
        Self::new(format!("const({c})"), T::of(2.0), c.abs(), move |_| c)
    }

    /// `|v|^2`, a member of `F`.
    pub fn energy() -> Self {
        Self::new("energy", T::of(2.0), T::one(), |v| norm_sq(v))
    }

    /// `|v|^q`, with weight order `max(q, 2)`.
    pub fn power(q: T) -> Self {
        let two = T::of(2.0);
        let p = q.max(two);
        Self::new(format!("|v|^{q}"), p, T::of(2.0).max(q), move |v| norm_sq(v).powf(q / two))
    }

    /// The `k`-th velocity component.
    pub fn component(k: usize) -> Self {
        Self::new(format!("v_{k}"), T::of(2.0), T::one(), move |v| v[k])
    }

    /// `(1+|v|^p) a sin(k.v + phase)`, with `||f||_(p) <= |a| max(1, |k|)`.
    pub fn harmonic(amplitude: T, wavevector: Vec<T>, phase: T, p: T) -> Self {
        let k_norm = norm_sq(&wavevector).sqrt();
        let norm = amplitude.abs() * k_norm.max(T::one());
        let two = T::of(2.0);
        Self::new(format!("harmonic(p={p})"), p, norm, move |v| {
            let w = if p == two { T::one() + norm_sq(v) } else { T::one() + norm_sq(v).powf(p / two) };
            w * amplitude * (dot(&wavevector, v) + phase).sin()
        })
    }

    /// Bounded smooth function `a sin(k.v + phase)`, `|f| <= |a|`.
    pub fn bounded_harmonic(amplitude: T, wavevector: Vec<T>, phase: T) -> Self {
        let k_norm = norm_sq(&wavevector).sqrt();
        // |f/(1+|v|^2)| <= |a|; its gradient is bounded by |a|(|k| + 1).
        let norm = amplitude.abs() * (k_norm + T::one());
        Self::new("bounded_harmonic", T::of(2.0), norm, move |v| {
            amplitude * (dot(&wavevector, v) + phase).sin()
        })
    }

    /// Weighted evaluation `f(v)/(1+|v|^p)`.
    pub fn hat(&self, v: &[T]) -> T {
        let two = T::of(2.0);
        let w = T::one() + norm_sq(v).powf(self.weight_order / two);
        self.eval(v) / w
    }

    /// Probabilistic membership check of the declared norm on `n` sampled
    /// points and `n` sampled pairs. Points are Gaussian with random scales
    /// up to 10 so that both the bulk and the tails are probed.
    pub fn spot_check<R: Rng + ?Sized>(&self, d: usize, n: usize, rng: &mut R) -> Result<(), NormViolation> {
        let bound = self.declared_norm.to_f64_lossy() * (1.0 + 1e-9) + 1e-12;
        let sample = |rng: &mut R| -> Vec<T> {
            let scale = 10.0_f64.powf(rng.random_range(-2.0..1.0));
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::of(z * scale)
                })
                .collect()
        };
        for _ in 0..n {
            let v = sample(rng);
            let r = self.hat(&v).abs().to_f64_lossy();
            if !(r <= bound) {
                return Err(NormViolation { point: to_f64(&v), other: None, ratio: r });
            }
            let mut w = v.clone();
            let step = 10.0_f64.powf(rng.random_range(-4.0..0.0));
            for c in w.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *c = *c + T::of(z * step);
            }
            let dist = distance(&v, &w).to_f64_lossy();
            if dist > 0.0 {
                let lip = (self.hat(&v) - self.hat(&w)).abs().to_f64_lossy() / dist;
                if !(lip <= bound) {
                    return Err(NormViolation { point: to_f64(&v), other: Some(to_f64(&w)), ratio: lip });
                }
            }
        }
        Ok(())
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|c| c.to_f64_lossy()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v3(x: f64, y: f64, z: f64) -> Velocity {
        Velocity::new(vec![x, y, z]).unwrap()
    }

    #[test]
    fn head_on_collision_into_orthogonal_axis() {
        let (a, b) = collide(&v3(1.0, 0.0, 0.0), &v3(-1.0, 0.0, 0.0), &v3(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(a, v3(0.0, 1.0, 0.0));
        assert_eq!(b, v3(0.0, -1.0, 0.0));
    }

    #[test]
    fn sigma_equal_to_u_is_identity_and_minus_u_swaps() {
        let v = v3(0.3, -1.2, 2.0);
        let w = v3(-0.7, 0.4, 1.0);
        let u = v.sub(&w).scale(1.0 / v.distance(&w));
        let (a, b) = collide(&v, &w, &u).unwrap();
        assert!(a.distance(&v) < 1e-15 && b.distance(&w) < 1e-15);
        let (a, b) = collide(&v, &w, &u.scale(-1.0)).unwrap();
        assert!(a.distance(&w) < 1e-15 && b.distance(&v) < 1e-15);
    }

    #[test]
    fn collide_rejects_bad_inputs() {
        let v = v3(1.0, 0.0, 0.0);
        let w = Velocity::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(collide(&v, &w, &v), Err(ModelError::DimensionMismatch(3, 2))));
        assert!(matches!(
            collide(&v, &v3(0.0, 1.0, 0.0), &v3(0.0, 2.0, 0.0)),
            Err(ModelError::NonUnitDirection(_))
        ));
    }

    #[test]
    fn f32_collision_conserves() {
        let v = Velocity::<f32>::new(vec![1.0, 0.5]).unwrap();
        let w = Velocity::<f32>::new(vec![-0.25, 0.0]).unwrap();
        let s = Velocity::<f32>::new(vec![0.6, 0.8]).unwrap();
        let (a, b) = collide(&v, &w, &s).unwrap();
        let e0 = v.norm_sq() + w.norm_sq();
        assert!((a.norm_sq() + b.norm_sq() - e0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn collision_conserves_momentum_and_energy(
            v in prop::collection::vec(-10.0..10.0f64, 3),
            w in prop::collection::vec(-10.0..10.0f64, 3),
            s in prop::collection::vec(-1.0..1.0f64, 3),
        ) {
            let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(n > 1e-3);
            let sigma = Velocity::new(s.iter().map(|x| x / n).collect()).unwrap();
            let v = Velocity::new(v).unwrap();
            let w = Velocity::new(w).unwrap();
            let (a, b) = collide(&v, &w, &sigma).unwrap();
            let e0 = v.norm_sq() + w.norm_sq();
            let e1 = a.norm_sq() + b.norm_sq();
            prop_assert!((e1 - e0).abs() <= 1e-12 * e0.max(1.0));
            let m0 = v.add(&w);
            let m1 = a.add(&b);
            prop_assert!(m0.distance(&m1) <= 1e-12 * m0.norm().max(1.0));
        }
    }

    #[test]
    fn moments_of_small_measures() {
        let mu = EmpiricalMeasure::uniform(vec![v3(1.0, 0.0, 0.0), v3(-1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(moment(&mu, 2.0), 1.0);
        assert_eq!(moment(&mu, 0.0), mu.total_mass());
        let nu = EmpiricalMeasure::uniform(vec![v3(2.0, 0.0, 0.0), v3(-2.0, 0.0, 0.0)]).unwrap();
        assert!((moment(&nu, 3.0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn integrate_on_normalized_state() {
        let s = ParticleState::new(
            vec![v3(1.0, 0.0, 0.0), v3(-1.0, 0.0, 0.0), v3(0.0, 1.0, 0.0), v3(0.0, -1.0, 0.0)],
            0.0,
        )
        .unwrap();
        let mu = s.to_measure();
        assert!((integrate(&TestFunction::constant(1.0), &mu).unwrap() - 1.0).abs() < 1e-15);
        assert!((integrate(&TestFunction::energy(), &mu).unwrap() - 1.0).abs() < EPS_CONS);
        assert!(integrate(&TestFunction::component(0), &mu).unwrap().abs() < EPS_CONS);
        let bad = TestFunction::new("log", 2.0, 1.0, |v: &[f64]| v[0].ln());
        assert_eq!(integrate(&bad, &mu), Err(ModelError::NonFiniteEvaluation { atom: 1 }));
    }

    #[test]
    fn particle_state_invariants() {
        assert!(matches!(
            ParticleState::new(vec![v3(1.0, 0.0, 0.0)], 0.0),
            Err(ModelError::TooFewParticles(1))
        ));
        assert!(matches!(
            ParticleState::new(vec![v3(1.0, 0.0, 0.0), v3(1.0, 0.0, 0.0)], 0.0),
            Err(ModelError::NotCentred(_))
        ));
        assert!(matches!(
            ParticleState::new(vec![v3(2.0, 0.0, 0.0), v3(-2.0, 0.0, 0.0)], 0.0),
            Err(ModelError::WrongEnergy(_))
        ));
    }

    #[test]
    fn measure_json_shape() {
        let mu = EmpiricalMeasure::new(vec![(v3(1.0, 0.0, 0.0), 0.25), (v3(0.0, 2.0, 0.0), 0.75)]).unwrap();
        let s = serde_json::to_string(&mu).unwrap();
        assert_eq!(s, r#"{"atoms":[[[1.0,0.0,0.0],0.25],[[0.0,2.0,0.0],0.75]],"mass":1.0}"#);
        let back: EmpiricalMeasure = serde_json::from_str(&s).unwrap();
        assert_eq!(back, mu);
        let bad = r#"{"atoms":[[[1.0,0.0],0.25]],"mass":1.0}"#;
        assert!(serde_json::from_str::<EmpiricalMeasure>(bad).is_err());
        let neg = r#"{"atoms":[[[1.0,0.0],-0.25]],"mass":-0.25}"#;
        assert!(serde_json::from_str::<EmpiricalMeasure>(neg).is_err());
    }

    #[test]
    fn merge_sums_duplicate_weights() {
        let mu = EmpiricalMeasure::new(vec![
            (v3(1.0, 0.0, 0.0), 0.25),
            (v3(0.0, 1.0, 0.0), 0.5),
            (v3(1.0, 0.0, 0.0), 0.25),
        ])
        .unwrap();
        let m = mu.merge_duplicates();
        assert_eq!(m.len(), 2);
        assert_eq!(m.atoms()[0].1, 0.5);
    }

    #[test]
    fn declared_norms_survive_spot_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for f in [
            TestFunction::energy(),
            TestFunction::constant(1.0),
            TestFunction::component(1),
            TestFunction::harmonic(0.5, vec![1.0, -0.5, 0.25], 0.3, 2.0),
            TestFunction::harmonic(0.2, vec![2.0, 0.0, 1.0], 1.0, 3.0),
            TestFunction::bounded_harmonic(1.0, vec![0.3, 0.3, 0.0], 0.1),
        ] {
            f.spot_check(3, 1000, &mut rng).unwrap_or_else(|e| panic!("{}: {e:?}", f.name()));
        }
        let liar = TestFunction::new("liar", 2.0, 0.1, |v: &[f64]| 1.0 + norm_sq(v));
        assert!(liar.spot_check(3, 1000, &mut rng).is_err());
    }
}
