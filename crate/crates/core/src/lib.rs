//! Bezier trajectory matching (BTM) for dataset condensation.
//!
//! Teacher SGD trajectories are replaced by quadratic Bezier surrogates
//! `(theta_0, phi, theta_T)`; synthetic datasets are then learned by matching
//! student displacements to surrogate segments. Alongside the condensation
//! engines the crate ships runnable certificates for the geometry of this
//! supervision: reachable gradient spans, the projection lower bound, the
//! Eckart-Young rank bottleneck, the rank-2 displacement structure of a
//! quadratic curve and the chord deviation bounds.

pub mod certify;
pub mod condense;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod surrogate;
pub mod teacher;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use linalg::{Matrix, SvdResult};
pub use eval::{Dataset, MetricReport};
pub use io::FORMAT_VERSION;
pub use model::{Batch, MixedGradStrategy, Mlp, MlpConfig, Params};
pub use surrogate::BezierSurrogate;
pub use teacher::Trajectory;
