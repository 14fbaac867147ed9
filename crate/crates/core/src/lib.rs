//! Walk-on-spheres solvers for Poisson, screened Poisson, and variable
//! coefficient elliptic problems, with path-replay reverse-mode gradients.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bessel;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod kernels;
pub mod rng;
pub mod solvers;
pub mod adjoint;
pub mod optimize;
pub mod experiments;
pub mod io;

pub use adjoint::{ParamGradients, ParamId, ParamSet};
pub use error::{Error, Result};
pub use fields::{BoundaryCondition, Field, GridTexture};
pub use geometry::{Domain, EpsilonShell, Primitive, Side, Vec3};
pub use rng::PathSeed;
pub use solvers::{Estimate, PdeKind, Problem};
