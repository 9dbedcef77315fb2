//! Estimating tabular MDP dynamics from near-optimal expert demonstrations.
//!
//! [`itl::fit`] returns a point estimate whose ε-balls match the expert's
//! behavior; [`bitl::sample`] draws a posterior over dynamics restricted to
//! the same constraint set. The MLE, Dirichlet posterior and maximum causal
//! entropy estimators are provided as baselines.

pub mod bitl;
pub mod constraints;
pub mod data;
pub mod env;
pub mod error;
pub mod itl;
pub mod mce;
pub mod mdp;
pub mod metrics;
pub mod persist;
pub mod qp;
pub mod seed;

pub use bitl::{DynamicsSampleSet, HmcConfig};
pub use constraints::{ConstraintKind, ConstraintSpec, ExpertConstraints, LinearConstraintSet};
pub use data::{BatchDataset, EstimatedExpertPolicy};
pub use env::{Expert, ExpertSpec, GridworldSpec, RandomworldSpec, TransferVariant};
pub use error::{Error, Result};
pub use itl::{ItlConfig, ItlResult};
pub use mce::{MceConfig, MceResult};
pub use mdp::{Dynamics, EpsilonBall, Policy, Rewards, TabularMdp, ValueResult};
pub use qp::{QpProblem, QpSolution, QpStatus};
