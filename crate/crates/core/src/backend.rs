//! Per-cell predictive backends.
//!
//! A hierarchy attaches one [`CellModel`] to every full factor assignment.
//! Fitting a cell against a dataset yields a [`FittedCell`], which supplies
//! the marginal likelihood, the predictive moments of the next outcome, the
//! split of those moments over the cell's continuous parameter, and draws of
//! that parameter for the Monte Carlo engine.

use std::fmt::Debug;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hierarchy::Dataset;

/// Mean and variance of a predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMoments {
    pub mean: f64,
    pub variance: f64,
}

impl PredictiveMoments {
    pub fn new(mean: f64, variance: f64) -> Self {
        debug_assert!(mean.is_finite() && variance.is_finite() && variance >= 0.0);
        Self { mean, variance }
    }
}

/// Law-of-total-variance split of a cell's predictive variance over its
/// continuous parameter: `E Var(Y | param)` and `Var E(Y | param)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSplit {
    pub e_var: f64,
    pub var_e: f64,
}

impl ParameterSplit {
    pub fn total(&self) -> f64 {
        self.e_var + self.var_e
    }
}

/// Distribution of the next outcome given one draw of the cell parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionalDraw {
    Normal { mean: f64, variance: f64 },
    Binomial { trials: u64, p: f64 },
    PointMass(f64),
}

impl ConditionalDraw {
    pub fn mean(&self) -> f64 {
        match *self {
            ConditionalDraw::Normal { mean, .. } => mean,
            ConditionalDraw::Binomial { trials, p } => trials as f64 * p,
            ConditionalDraw::PointMass(x) => x,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            ConditionalDraw::Normal { variance, .. } => variance,
            ConditionalDraw::Binomial { trials, p } => trials as f64 * p * (1.0 - p),
            ConditionalDraw::PointMass(_) => 0.0,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            ConditionalDraw::Normal { mean, variance } => {
                Normal::new(mean, variance.sqrt()).expect("finite normal").sample(rng)
            }
            ConditionalDraw::Binomial { trials, p } => {
                Binomial::new(trials, p.clamp(0.0, 1.0)).expect("valid binomial").sample(rng) as f64
            }
            ConditionalDraw::PointMass(x) => x,
        }
    }
}

/// Unfitted backend for one full factor assignment.
pub trait CellModel: Send + Sync + Debug {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn FittedCell>>;
}

/// A backend conditioned on data.
pub trait FittedCell: Send + Sync + Debug {
    fn log_marginal(&self) -> f64;

    fn moments(&self) -> PredictiveMoments;

    fn parameter_split(&self) -> ParameterSplit;

    /// Draws the cell parameter from its posterior and returns the implied
    /// conditional distribution of the next outcome.
    fn draw(&self, rng: &mut ChaCha8Rng) -> ConditionalDraw;
}

/// Uniform index in `0..len`.
pub(crate) fn uniform_index(rng: &mut ChaCha8Rng, len: usize) -> usize {
    rng.random_range(0..len)
}
