//! One-shot weighted distributed linear regression.
//!
//! Local least-squares fits are combined with task-optimal weights;
//! [`fs_efficiency`] measures the finite-sample cost of distributing and
//! [`rmt`] gives its random-matrix limit. [`multishot`] simulates
//! multi-round alternatives on a synchronous parameter server, and
//! [`harness`] drives reproducible experiments from the command line.

pub mod datamodel;
pub mod error;
pub mod estimators;
pub mod fs_efficiency;
pub mod harness;
pub mod linalg;
pub mod multishot;
pub mod quadrature;
pub mod rmt;
pub mod rng;

pub use datamodel::{Dataset, PartitionPlan, ProblemSpec, ScaleDistribution};
pub use error::{Error, Result};
pub use estimators::{FunctionalTask, WeightVector};
