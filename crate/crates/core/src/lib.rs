//! Posterior predictive variance decompositions for discrete Bayesian
//! hierarchies.
//!
//! A [`hierarchy::HierarchicalModel`] places a prior over a grid of discrete
//! modeling choices (factors) and attaches a predictive backend to every
//! full assignment. Once fitted, the posterior predictive variance of the
//! next outcome is a fixed number; every [`cscope::DecompositionPlan`] splits
//! it into conditional expectation/variance terms that must sum back to it.
//! [`engine`] evaluates those terms exactly or by nested Monte Carlo.

pub mod backend;
pub mod conjugate;
pub mod cscope;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod glm;
pub mod hierarchy;
pub mod modeldoc;
pub mod par;
pub mod rng;

pub use backend::{CellModel, ConditionalDraw, FittedCell, ParameterSplit, PredictiveMoments};
pub use cscope::{count_plans, enumerate_plans, term_labels, DecompositionPlan, TermLabel};
pub use engine::{
    decompose_exact, decompose_mc, drop_term_report, total_variance, DecompositionResult, EngineKind, McBudget,
};
pub use error::{Error, Result};
pub use hierarchy::{
    joint_posterior, marginalize, Dataset, FactorAssignment, FactorSpec, FittedHierarchy, HierarchicalModel,
    PosteriorTable,
};
pub use par::ExecMode;
