//! Collocation ODE solvers on γ-bounded piecewise polynomial bases and the
//! Hamiltonian Monte Carlo sampler built on them.

pub mod basis;
pub mod collocation;
pub mod densities;
pub mod diagnostics;
pub mod error;
pub mod hmc;
pub mod linalg;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use basis::{CollocationBasis, GammaPolicy, PieceSpec};
pub use collocation::{KthOrderProblem, OdeProblem, SolverOptions};
pub use densities::{Density, GlmDensity, QuadraticDensity, StronglyConvexDensity};
pub use diagnostics::{QuadratureOracle, ReferenceTrajectory};
pub use hmc::{HmcConfig, HmcRun};
pub use linalg::DenseMatrix;

pub type Basis64 = CollocationBasis<f64>;
pub type Basis32 = CollocationBasis<f32>;
pub type Matrix64 = DenseMatrix<f64>;
pub type Matrix32 = DenseMatrix<f32>;
pub type GlmDensity64 = GlmDensity<f64>;
pub type GlmDensity32 = GlmDensity<f32>;
pub type HmcRun64 = HmcRun<f64>;
pub type HmcRun32 = HmcRun<f32>;
