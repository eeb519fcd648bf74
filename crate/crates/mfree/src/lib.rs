//! hp-adaptive meshfree solver for elliptic PDEs.
//!
//! The pipeline discretises a domain with a variable-density node cloud,
//! builds collocation stencils from polyharmonic splines augmented with
//! monomials, assembles and solves the resulting sparse system, estimates
//! the local error by re-evaluating the solution with higher-order explicit
//! operators, and adapts both the local spacing `h` and the local
//! approximation order `m` until a stopping rule fires.
//!
//! Modules follow the pipeline stages:
//!
//! - [`nodegen`]: domain shapes, spacing/order fields, Poisson-disc node
//!   placement and nearest-neighbour queries,
//! - [`approx`]: stencil weights for differential operators,
//! - [`system`]: sparse assembly and the iterative linear solver,
//! - [`adapt`]: error indicator, marking, refinement rules and field
//!   transfer between iterations,
//! - [`problems`]: the built-in benchmark problems and post-processing,
//! - [`driver`]: the adaptivity loop and convergence studies,
//! - [`config`]: run configuration with per-problem defaults.

pub mod adapt;
pub mod approx;
pub mod config;
pub mod driver;
pub mod nodegen;
pub mod problems;
pub mod spatial;
pub mod system;

/// Coordinates of a point in `D`-dimensional space.
pub type Point<const D: usize> = nalgebra::SVector<f64, D>;

/// Convenience constructor for literal points.
pub fn pt<const D: usize>(coords: [f64; D]) -> Point<D> {
    Point::<D>::from(coords)
}

/// Any error produced by the solver pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    NodeGen(#[from] nodegen::NodeGenError),
    #[error(transparent)]
    Approx(#[from] approx::ApproxError),
    #[error(transparent)]
    System(#[from] system::SystemError),
    #[error(transparent)]
    Adapt(#[from] adapt::AdaptError),
    #[error(transparent)]
    Problem(#[from] problems::ProblemError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
