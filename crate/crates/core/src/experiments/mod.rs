//! Bundled end-to-end analyses.

pub mod bma;
pub mod challenger;
pub mod sweep;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hierarchy::{marginalize, FittedHierarchy};

pub use bma::{bma_equivalence_check, random_bma, BmaComponent, BmaEquivalenceReport};
pub use challenger::{run_challenger, ChallengerConfig, ChallengerDataset, ChallengerReport};
pub use sweep::{fit_replicate, run_sweep, SweepConfig, SweepReport, SweepTarget};

/// Posterior probability of one covariate subset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetImportance {
    pub subset: String,
    pub probability: f64,
}

/// Posterior probability of every level of the subset factor, summing over
/// the other factors: `p(X_j | D) = sum_i p(m_i | D) p(X_j | D, m_i)`.
pub fn variable_set_importance(fitted: &FittedHierarchy, subset_factor: usize) -> Result<Vec<SubsetImportance>> {
    let factor = fitted
        .model()
        .factors()
        .get(subset_factor)
        .ok_or_else(|| Error::InvalidArgument(format!("no discrete factor {}", subset_factor + 1)))?;
    let marginal = marginalize(fitted.posterior(), &[subset_factor])?;
    Ok(factor
        .levels
        .iter()
        .zip(marginal.weights)
        .map(|(subset, probability)| SubsetImportance { subset: subset.clone(), probability })
        .collect())
}
