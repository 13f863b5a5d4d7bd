//! Derivative-free minimization used by every fitting stage.
//!
//! Parameters live in a flat scalar vector with typed blocks. Euclidean
//! blocks are plain scalars; rotation blocks hold a local 3-vector increment
//! applied to a stored base rotation through the exponential map, so the
//! optimizer itself never leaves the rotation manifold and finite-difference
//! probes of those coordinates are exp-map perturbations.

mod minimize;
mod params;

pub use minimize::{
    finite_diff_gradient, minimize, minimize_with_gradient, ConvergedBy, GradMode, OptimConfig,
    OptimError, OptimReport,
};
pub(crate) use minimize::minimize_annealed;
pub use params::{BlockId, ParamVector, PoseBlock};
