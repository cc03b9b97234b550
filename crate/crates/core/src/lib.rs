//! Simulation and verification laboratory for Kac's mean-field model of
//! elastic collisions.
//!
//! The crate simulates the `N`-particle Kac jump process, computes the
//! weighted Wasserstein distance `W` exactly on empirical measures, simulates
//! the linearized (signed branching) Kac process with its couplings, and runs
//! desk-scale experiments on consistency rates, sampling rates and moment
//! production.

pub mod scalar;
pub mod model;
pub mod quadrature;
pub mod sumtree;
pub mod rng;
pub mod stats;
pub mod kernels;
pub mod simulator;
pub mod transport;
pub mod sampling;
pub mod signed_measure;
pub mod branching;
pub mod experiments;

pub use model::{
    collide, collide_unchecked, integrate, moment, EmpiricalMeasure, ModelError, ParticleState,
    TestFunction, Velocity, EPS_CONS,
};
pub use scalar::{Exact, Real};

pub type Velocity64 = Velocity<f64>;
pub type Velocity32 = Velocity<f32>;
pub type Measure64 = EmpiricalMeasure<f64>;
pub type Measure32 = EmpiricalMeasure<f32>;
pub type State64 = ParticleState<f64>;
pub type State32 = ParticleState<f32>;
