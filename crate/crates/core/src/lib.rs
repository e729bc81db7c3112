//! Benchmark of generative inverse-design solvers on an analytic stand-in
//! for a gas-turbine combustor with six design parameters and three labels.
//!
//! The numeric core ([`nn`], [`mmd`], [`ode`] and the three network solvers)
//! is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix it to
//! `f64`, which is what the benchmark uses throughout.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod cfm;
pub mod cwgan;
pub mod error;
pub mod eval;
pub mod inn;
pub mod io;
pub mod mmd;
pub mod nn;
pub mod ode;
pub mod problem;
pub mod profile;
pub mod scalar;
pub mod seed;
pub mod solver;
pub mod surrogate;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mlp = nn::Mlp<f64>;
pub type Tape = nn::Tape<f64>;
pub type Adam = nn::Adam<f64>;
pub type InnModel = inn::InnModel<f64>;
pub type VectorFieldNet = cfm::VectorFieldNet<f64>;
pub type Generator = cwgan::Generator<f64>;
pub type SurrogateSet = surrogate::SurrogateSet<f64>;
pub type BayesSolver = bayes::BayesSolver<SurrogateSet>;
