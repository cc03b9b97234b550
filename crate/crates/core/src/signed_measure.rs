//! Total variation of time-integrated signed measures on a finite partition.
//!
//! For `μ_t = μ_0 + ∫_0^t ν_s ds`, the total variation evolves as
//! `|μ_t| = |μ_0| + ∫_0^t ⟨σ_s, ν_s⟩ ds` with `σ_s = sign(μ_s)` cellwise. On a
//! step grid the sign is frozen at the left endpoint of each step, which is
//! exact on steps where no cell changes sign and off by at most
//! `2|ν_k(c)|Δt` on each step where cell `c` does.

use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{sign3, Exact};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignedMeasureError {
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("cell count mismatch: {0} vs {1}")]
    CellMismatch(usize, usize),
    #[error("step size must be positive")]
    BadStep,
}

/// Signed masses on `K` abstract cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FiniteSignedMeasure<T> {
    pub cells: Vec<T>,
}

impl<T: Exact> FiniteSignedMeasure<T> {
    pub fn new(cells: Vec<T>) -> Self {
        Self { cells }
    }

    pub fn zero(k: usize) -> Self {
        Self { cells: vec![T::zero(); k] }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_variation(&self) -> T {
        self.cells.iter().fold(T::zero(), |acc, x| acc + x.abs())
    }

    /// Cellwise sign in `{-1, 0, 1}`.
    pub fn signs(&self) -> Vec<i8> {
        self.cells.iter().map(sign3).collect()
    }

    /// `|μ|` as a measure; equals `σ·μ` cellwise.
    pub fn abs(&self) -> Self {
        Self { cells: self.cells.iter().map(|x| x.abs()).collect() }
    }

    /// `self += h·other`.
    pub fn add_scaled(&mut self, other: &Self, h: &T) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a = a.clone() + b.clone() * h.clone();
        }
    }

    /// `⟨σ, ν⟩ = Σ_c σ(c) ν(c)`.
    pub fn pair_signs(signs: &[i8], nu: &Self) -> T {
        signs.iter().zip(&nu.cells).fold(T::zero(), |acc, (s, x)| match s {
            1 => acc + x.clone(),
            -1 => acc - x.clone(),
            _ => acc,
        })
    }
}

/// `μ_0` and a step function `ν` with value `nu[k]` on `[kΔt, (k+1)Δt)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureFlow<T> {
    pub mu0: FiniteSignedMeasure<T>,
    pub nu: Vec<FiniteSignedMeasure<T>>,
    pub dt: T,
}

impl<T: Exact> MeasureFlow<T> {
    pub fn new(mu0: FiniteSignedMeasure<T>, nu: Vec<FiniteSignedMeasure<T>>, dt: T) -> Result<Self, SignedMeasureError> {
        if !(dt > T::zero()) {
            return Err(SignedMeasureError::BadStep);
        }
        for step in &nu {
            if step.len() != mu0.len() {
                return Err(SignedMeasureError::CellMismatch(mu0.len(), step.len()));
            }
        }
        Ok(Self { mu0, nu, dt })
    }

    /// Samples `ν` at left endpoints of a grid of `steps` steps of size `dt`.
    pub fn from_fn<F: FnMut(&T) -> Vec<T>>(
        mu0: FiniteSignedMeasure<T>,
        dt: T,
        steps: usize,
        mut nu: F,
    ) -> Result<Self, SignedMeasureError> {
        let mut t = T::zero();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            out.push(FiniteSignedMeasure::new(nu(&t)));
            t = t + dt.clone();
        }
        Self::new(mu0, out, dt)
    }

    pub fn horizon(&self) -> T {
        let mut t = T::zero();
        for _ in 0..self.nu.len() {
            t = t + self.dt.clone();
        }
        t
    }

    /// The same step function on a grid of half the step size.
    pub fn refine(&self) -> Self {
        let two = T::one() + T::one();
        Self {
            mu0: self.mu0.clone(),
            nu: self.nu.iter().flat_map(|s| [s.clone(), s.clone()]).collect(),
            dt: self.dt.clone() / two,
        }
    }

    /// `max_k ‖ν_k‖`.
    pub fn max_rate(&self) -> T {
        self.nu.iter().map(|s| s.total_variation()).fold(T::zero(), |a, b| if b > a { b } else { a })
    }

    fn check_time(&self, t: &T) -> Result<(), SignedMeasureError>
    where
        T: ToPrimitive,
    {
        let h = self.horizon();
        if *t < T::zero() || *t > h {
            return Err(SignedMeasureError::TimeOutOfRange {
                t: t.to_f64().unwrap_or(f64::NAN),
                horizon: h.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }

    /// Visits each step `[s, s + h)` clipped to `[0, t]` with the state at
    /// its left end.
    fn walk<F: FnMut(&FiniteSignedMeasure<T>, &FiniteSignedMeasure<T>, &T)>(&self, t: &T, mut visit: F) -> FiniteSignedMeasure<T> {
        let mut mu = self.mu0.clone();
        let mut s = T::zero();
        for step in &self.nu {
            if s >= *t {
                break;
            }
            let end = s.clone() + self.dt.clone();
            let h = if end > *t { t.clone() - s.clone() } else { self.dt.clone() };
            visit(&mu, step, &h);
            mu.add_scaled(step, &h);
            s = end;
        }
        mu
    }
}

/// `μ_t = μ_0 + ∫_0^t ν_s ds`, exact for the step function `ν`.
pub fn evolve<T: Exact + ToPrimitive>(flow: &MeasureFlow<T>, t: &T) -> Result<FiniteSignedMeasure<T>, SignedMeasureError> {
    flow.check_time(t)?;
    Ok(flow.walk(t, |_, _, _| {}))
}

/// Comparison of `|μ_t|` with `|μ_0| + Σ_k ⟨σ_{s_k}, ν_k⟩ h_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TvReport<T> {
    pub tv_t: T,
    pub tv_0: T,
    pub integral: T,
    pub discrepancy: T,
    /// Number of (step, cell) pairs whose sign differs between the two ends
    /// of the step.
    pub sign_changes: usize,
    /// `2 · sign_changes · Δt · max_k ‖ν_k‖`.
    pub bound: T,
}

impl<T: Exact> TvReport<T> {
    pub fn within_bound(&self) -> bool {
        self.discrepancy <= self.bound
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvSummary {
    pub tv_t: f64,
    pub tv_0: f64,
    pub integral: f64,
    pub discrepancy: f64,
    pub sign_changes: usize,
    pub bound: f64,
    pub within_bound: bool,
}

impl<T: Exact + ToPrimitive> TvReport<T> {
    pub fn summary(&self) -> TvSummary {
        let f = |x: &T| x.to_f64().unwrap_or(f64::NAN);
        TvSummary {
            tv_t: f(&self.tv_t),
            tv_0: f(&self.tv_0),
            integral: f(&self.integral),
            discrepancy: f(&self.discrepancy),
            sign_changes: self.sign_changes,
            bound: f(&self.bound),
            within_bound: self.within_bound(),
        }
    }
}

pub fn tv_identity_check<T: Exact + ToPrimitive>(flow: &MeasureFlow<T>, t: &T) -> Result<TvReport<T>, SignedMeasureError> {
    flow.check_time(t)?;
    let mut integral = T::zero();
    let mut changes = 0;
    let mut prev_signs: Option<Vec<i8>> = None;
    let mu_t = flow.walk(t, |mu, step, h| {
        let signs = mu.signs();
        if let Some(p) = &prev_signs {
            changes += p.iter().zip(&signs).filter(|(a, b)| a != b).count();
        }
        integral = integral.clone() + FiniteSignedMeasure::pair_signs(&signs, step) * h.clone();
        prev_signs = Some(signs);
    });
    if let Some(p) = &prev_signs {
        changes += p.iter().zip(mu_t.signs()).filter(|(a, b)| **a != *b).count();
    }
    let tv_0 = flow.mu0.total_variation();
    let tv_t = mu_t.total_variation();
    let discrepancy = (tv_t.clone() - (tv_0.clone() + integral.clone())).abs();
    let two = T::one() + T::one();
    let mut bound = T::zero();
    for _ in 0..changes {
        bound = bound + two.clone() * flow.dt.clone() * flow.max_rate();
    }
    Ok(TvReport { tv_t, tv_0, integral, discrepancy, sign_changes: changes, bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use proptest::prelude::*;
    use rand::Rng;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn zero_rate_keeps_initial() {
        let flow = MeasureFlow::new(
            FiniteSignedMeasure::new(vec![1.0, -2.0]),
            vec![FiniteSignedMeasure::zero(2); 4],
            0.25,
        )
        .unwrap();
        assert_eq!(evolve(&flow, &1.0).unwrap().cells, vec![1.0, -2.0]);
        let r = tv_identity_check(&flow, &1.0).unwrap();
        assert_eq!(r.discrepancy, 0.0);
    }

    #[test]
    fn scalar_ode_and_single_crossing() {
        let dt = q(1, 8);
        let flow = MeasureFlow::new(
            FiniteSignedMeasure::new(vec![q(-1, 1)]),
            vec![FiniteSignedMeasure::new(vec![q(1, 1)]); 16],
            dt.clone(),
        )
        .unwrap();
        for k in 0..=16 {
            let t = q(k, 8);
            assert_eq!(evolve(&flow, &t).unwrap().cells[0], t.clone() - q(1, 1));
        }
        let r = tv_identity_check(&flow, &q(2, 1)).unwrap();
        assert_eq!(r.tv_t, q(1, 1));
        assert!(r.discrepancy <= q(2, 1) * dt);
        assert!(r.within_bound());
    }

    #[test]
    fn rejects_out_of_range_time() {
        let flow = MeasureFlow::new(FiniteSignedMeasure::new(vec![0.0]), vec![FiniteSignedMeasure::new(vec![1.0])], 0.5)
            .unwrap();
        assert!(matches!(evolve(&flow, &0.6), Err(SignedMeasureError::TimeOutOfRange { .. })));
        assert!(matches!(evolve(&flow, &-0.1), Err(SignedMeasureError::TimeOutOfRange { .. })));
    }

    #[test]
    fn random_flow_matches_independent_summation() {
        let mut rng = crate::rng::stream(3, 0);
        let k = 5;
        let steps = 12;
        let mu0: Vec<BigRational> = (0..k).map(|_| q(rng.random_range(-20..20), 7)).collect();
        let nu: Vec<Vec<BigRational>> =
            (0..steps).map(|_| (0..k).map(|_| q(rng.random_range(-30..30), 11)).collect()).collect();
        let dt = q(1, 3);
        let flow = MeasureFlow::new(
            FiniteSignedMeasure::new(mu0.clone()),
            nu.iter().cloned().map(FiniteSignedMeasure::new).collect(),
            dt.clone(),
        )
        .unwrap();
        let got = evolve(&flow, &flow.horizon()).unwrap();
        // Cell by cell, summing over steps in reverse order.
        for c in 0..k {
            let mut acc = q(0, 1);
            for s in nu.iter().rev() {
                acc += s[c].clone() * dt.clone();
            }
            assert_eq!(got.cells[c], mu0[c].clone() + acc);
        }
    }

    #[test]
    fn sign_constant_flow_is_exact() {
        let flow = MeasureFlow::new(
            FiniteSignedMeasure::new(vec![q(1, 1), q(-2, 1), q(0, 1)]),
            vec![FiniteSignedMeasure::new(vec![q(1, 3), q(-1, 5), q(0, 1)]); 10],
            q(1, 10),
        )
        .unwrap();
        let r = tv_identity_check(&flow, &q(1, 1)).unwrap();
        assert_eq!(r.sign_changes, 0);
        assert_eq!(r.discrepancy, q(0, 1));
    }

    #[test]
    fn halving_halves_discrepancy_on_oscillating_flow() {
        let r = |dt: f64, steps: usize| {
            let flow = MeasureFlow::from_fn(
                FiniteSignedMeasure::new((0..10).map(|c| 0.1 * (c as f64 - 4.5)).collect()),
                dt,
                steps,
                |t| (0..10).map(|c| (3.0 + c as f64) * (t * (2.0 + 0.7 * c as f64) + c as f64).cos()).collect(),
            )
            .unwrap();
            tv_identity_check(&flow, &flow.horizon()).unwrap().discrepancy
        };
        let coarse = r(0.01, 400);
        let fine = r(0.005, 800);
        let ratio = coarse / fine;
        assert!((1.5..=4.0).contains(&ratio), "ratio {ratio}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sign_times_measure_is_abs(cells in proptest::collection::vec(-5i64..5, 1..12)) {
            let m = FiniteSignedMeasure::new(cells.iter().map(|&c| q(c, 3)).collect::<Vec<_>>());
            let s = m.signs();
            prop_assert!(s.iter().all(|x| [-1, 0, 1].contains(x)));
            for ((x, sg), a) in m.cells.iter().zip(&s).zip(&m.abs().cells) {
                prop_assert_eq!(x.clone() * q(*sg as i64, 1), a.clone());
            }
        }

        #[test]
        fn discrepancy_within_bound(seed in any::<u64>()) {
            let mut rng = crate::rng::stream(seed, 0);
            let k = 6;
            let mu0 = FiniteSignedMeasure::new((0..k).map(|_| q(rng.random_range(-10..10), 4)).collect());
            let nu = (0..10).map(|_| FiniteSignedMeasure::new((0..k).map(|_| q(rng.random_range(-10..10), 3)).collect())).collect();
            let flow = MeasureFlow::new(mu0, nu, q(1, 5)).unwrap();
            let r = tv_identity_check(&flow, &flow.horizon()).unwrap();
            prop_assert!(r.within_bound());
            if r.sign_changes == 0 {
                prop_assert_eq!(r.discrepancy, q(0, 1));
            }
        }
    }
}
