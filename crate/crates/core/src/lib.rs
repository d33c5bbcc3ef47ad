//! Numerical laboratory for hypocoercive decay of linear kinetic equations
//! in one space and one velocity dimension.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bogovskii;
pub mod certificate;
pub mod coercivity;
pub mod decay;
pub mod error;
pub mod evolution;
pub mod generator;
pub mod grid;
pub mod kj;
pub mod ledger;
pub mod models;
pub mod numerics;
pub mod scenario;
pub mod steady;

pub use bogovskii::{bogovskii_solve, poincare_constant, PartitionOfUnity, Slab, SlabWeights, SpaceTimeVectorField};
pub use certificate::{certify, CertifyOptions, DecayCertificate};
pub use coercivity::{build_test_functions, lambda1_global, TestFunctions};
pub use decay::{fit_exponential, recursion_verify, DecaySeries, WeakScenario};
pub use error::{HypoError, Result};
pub use evolution::{evolve, evolve_with, Trajectory};
pub use grid::{local_density, weighted_inner, weighted_norm_sq, Grid, PhaseField, SpatialField, XBoundary};
pub use kj::{assemble_kj, KJFields};
pub use ledger::{LedgerLine, Relation};
pub use models::{CollisionKind, ForceProfile, KineticModel, TemperatureProfile, TransportScheme};
pub use scenario::ScenarioConfig;
pub use steady::{compute_stationary, SteadyMethod, StationaryState};
