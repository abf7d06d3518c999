//! Model averaging over conjugate Normal components, decomposed three ways:
//! conditioning on the model index with the parameter mixed out, on
//! (model, parameter) jointly, and on the model index then the parameter.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::backend::CellModel;
use crate::conjugate::NormalKnownVarSpec;
use crate::cscope::DecompositionPlan;
use crate::engine::{decompose_exact, DecompositionResult, EXACT_TOL};
use crate::error::{Error, Result};
use crate::hierarchy::{Dataset, FactorSpec, FittedHierarchy, HierarchicalModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BmaComponent {
    pub prior_weight: f64,
    pub spec: NormalKnownVarSpec,
}

/// A two-factor hierarchy: model index `J` (factor 1) and the component
/// mean `theta` as parameter pseudo-factor (factor 2).
pub fn bma_model(components: &[BmaComponent]) -> Result<HierarchicalModel> {
    let labels: Vec<String> = (1..=components.len()).map(|j| format!("M{j}")).collect();
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let prior = components.iter().map(|c| c.prior_weight).collect();
    let cells = components.iter().map(|c| Arc::new(c.spec) as Arc<dyn CellModel>).collect();
    HierarchicalModel::new(vec![FactorSpec::with_prior("J", &label_refs, prior)], Some("theta".into()), cells)
}

/// A random model average with `components` members and `n` observations.
pub fn random_bma(rng: &mut ChaCha8Rng, components: usize, n: usize) -> Result<(HierarchicalModel, Dataset)> {
    let raw: Vec<f64> = (0..components).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let comps: Vec<BmaComponent> = raw
        .iter()
        .map(|w| {
            Ok(BmaComponent {
                prior_weight: w / z,
                spec: NormalKnownVarSpec::new(
                    rng.random_range(0.5..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.3..3.0),
                )?,
            })
        })
        .collect::<Result<_>>()?;
    let truth = Normal::new(rng.random_range(-1.0..1.0), rng.random_range(0.5..1.5)).expect("finite");
    let ys = (0..n).map(|_| truth.sample(rng)).collect();
    Ok((bma_model(&comps)?, Dataset::new(ys)))
}

#[derive(Debug, Clone, Serialize)]
pub struct BmaForm {
    pub name: String,
    pub result: DecompositionResult,
    pub sum_of_terms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BmaEquivalenceReport {
    pub forms: Vec<BmaForm>,
    /// Mixture variance computed directly from the components.
    pub brute_force_total: f64,
    /// Largest relative gap between any form's term sum and the brute-force
    /// total.
    pub max_relative_gap: f64,
    pub agree: bool,
}

/// Decomposes a two-level model average in the three forms and checks that
/// every form's terms sum to the same total.
pub fn bma_equivalence_check(fitted: &FittedHierarchy) -> Result<BmaEquivalenceReport> {
    let model = fitted.model();
    if model.discrete_count() != 1 || model.parameter().is_none() {
        return Err(Error::InvalidModel(
            "equivalence check needs one model-index factor and a parameter factor".into(),
        ));
    }
    let plans = [
        ("model index, parameter latent", "1"),
        ("joint (model index, parameter)", "1,2"),
        ("model index then parameter", "1|2"),
    ];
    let mut forms = Vec::with_capacity(3);
    for (name, text) in plans {
        let result = decompose_exact(fitted, &DecompositionPlan::parse(text, 2)?)?;
        let sum_of_terms = result.values().iter().sum();
        forms.push(BmaForm { name: name.into(), result, sum_of_terms });
    }

    let w = fitted.posterior().weights();
    let mut mean = 0.0;
    let mut second = 0.0;
    for (i, c) in fitted.cells().iter().enumerate() {
        let mu = c.moments().mean;
        mean += w[i] * mu;
        second += w[i] * (c.parameter_split().total() + mu * mu);
    }
    let brute_force_total = second - mean * mean;
    let scale = brute_force_total.abs().max(1.0);
    let max_relative_gap = forms.iter().map(|f| (f.sum_of_terms - brute_force_total).abs() / scale).fold(0.0, f64::max);
    Ok(BmaEquivalenceReport { forms, brute_force_total, max_relative_gap, agree: max_relative_gap <= EXACT_TOL })
}

/// Two Normal components with the reference settings, equal prior weights.
pub fn default_bma() -> Result<(HierarchicalModel, Dataset)> {
    let comps = [
        BmaComponent { prior_weight: 0.5, spec: NormalKnownVarSpec::new(1.0, 0.0, 1.0)? },
        BmaComponent { prior_weight: 0.5, spec: NormalKnownVarSpec::new(1.5, 1.0, 0.5)? },
    ];
    Ok((bma_model(&comps)?, Dataset::new(vec![0.3, -0.2, 1.1, 0.4])))
}
