//! Simulation of one-dimensional transient diffusions conditioned on their
//! terminal local time at a level: recurrent transforms, Bessel-type motions,
//! local-time bridges and the path-decomposition sampler, with a statistical
//! harness for the closed-form laws they must reproduce.

pub mod bridge;
pub mod direct;
pub mod engine;
pub mod error;
pub mod io;
pub mod local_time;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod scale;
pub mod stats;
pub mod transforms;
pub mod validate;

pub use engine::{Path, SimOptions, StopRule};
pub use error::{Error, Result};
pub use model::{DiffusionSpec, SpecFile, TransformKind};
pub use rng::RandomSource;
pub use scale::{build_scale, BoundaryKind, MixedLaw, ScaleTable, Side};
