//! Discrete factor hierarchies, their joint posteriors, and mixture
//! predictive moments under partial conditioning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::sync::Arc;

use serde::Serialize;

use crate::backend::{CellModel, FittedCell, PredictiveMoments};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

const WEIGHT_TOL: f64 = 1e-12;

/// A discrete modeling choice with its conditional prior.
///
/// `prior` holds either a single row (the factor is a priori independent of
/// earlier factors) or one row per assignment of the earlier factors, in
/// row-major order with the last earlier factor varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorSpec {
    pub name: String,
    pub levels: Vec<String>,
    pub prior: Vec<Vec<f64>>,
}

impl FactorSpec {
    /// A factor with a uniform prior.
    pub fn uniform<S: Into<String>>(name: S, levels: &[&str]) -> Self {
        let m = levels.len().max(1);
        Self {
            name: name.into(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
            prior: vec![vec![1.0 / m as f64; levels.len()]],
        }
    }

    pub fn with_prior<S: Into<String>>(name: S, levels: &[&str], prior: Vec<f64>) -> Self {
        Self { name: name.into(), levels: levels.iter().map(|s| s.to_string()).collect(), prior: vec![prior] }
    }

    pub fn conditional<S: Into<String>>(name: S, levels: &[&str], rows: Vec<Vec<f64>>) -> Self {
        Self { name: name.into(), levels: levels.iter().map(|s| s.to_string()).collect(), prior: rows }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub(crate) fn validate(&self, earlier_cells: usize) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidModel(format!("factor `{}` has no levels", self.name)));
        }
        let unique: BTreeSet<&String> = self.levels.iter().collect();
        if unique.len() != self.levels.len() {
            return Err(Error::InvalidModel(format!("factor `{}` has duplicate level labels", self.name)));
        }
        if self.prior.len() != 1 && self.prior.len() != earlier_cells {
            return Err(Error::InvalidModel(format!(
                "factor `{}` needs 1 or {} prior rows, found {}",
                self.name,
                earlier_cells,
                self.prior.len()
            )));
        }
        for (r, row) in self.prior.iter().enumerate() {
            if row.len() != self.levels.len() {
                return Err(Error::InvalidModel(format!(
                    "factor `{}` prior row {} has {} weights for {} levels",
                    self.name,
                    r,
                    row.len(),
                    self.levels.len()
                )));
            }
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::InvalidModel(format!(
                    "factor `{}` prior row {} has a negative or non-finite weight",
                    self.name, r
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::InvalidModel(format!(
                    "factor `{}` prior row {} sums to {} (expected 1)",
                    self.name, r, s
                )));
            }
        }
        Ok(())
    }
}

/// Mixed-radix indexing of the full assignment grid. The first factor varies
/// slowest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Grid {
    dims: Vec<usize>,
    strides: Vec<usize>,
}

impl Grid {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut strides = vec![1; dims.len()];
        for k in (0..dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        Self { dims, strides }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn level(&self, flat: usize, factor: usize) -> usize {
        (flat / self.strides[factor]) % self.dims[factor]
    }

    pub fn decode(&self, flat: usize) -> Vec<usize> {
        (0..self.dims.len()).map(|k| self.level(flat, k)).collect()
    }

    pub fn encode(&self, levels: &[usize]) -> usize {
        levels.iter().zip(&self.strides).map(|(l, s)| l * s).sum()
    }

    /// Index of the projection of `flat` onto the factors in `keep`, within
    /// the sub-grid spanned by `keep` (in the given order).
    pub fn project(&self, flat: usize, keep: &[usize]) -> usize {
        keep.iter().fold(0, |acc, &k| acc * self.dims[k] + self.level(flat, k))
    }

    pub fn sub_len(&self, keep: &[usize]) -> usize {
        keep.iter().map(|&k| self.dims[k]).product()
    }
}

/// A partial assignment of levels to factors; unbound factors are latent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct FactorAssignment {
    bindings: BTreeMap<usize, usize>,
}

impl FactorAssignment {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_pairs<I: IntoIterator<Item = (usize, usize)>>(pairs: I) -> Self {
        Self { bindings: pairs.into_iter().collect() }
    }

    pub fn bind(mut self, factor: usize, level: usize) -> Self {
        self.bindings.insert(factor, level);
        self
    }

    pub fn get(&self, factor: usize) -> Option<usize> {
        self.bindings.get(&factor).copied()
    }

    pub fn scope(&self) -> BTreeSet<usize> {
        self.bindings.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bindings.iter().map(|(&k, &v)| (k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    fn matches(&self, grid: &Grid, flat: usize) -> bool {
        self.bindings.iter().all(|(&k, &l)| grid.level(flat, k) == l)
    }
}

impl fmt::Display for FactorAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (k, l)) in self.bindings.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "V{}={}", k + 1, l)?;
        }
        write!(f, "}}")
    }
}

/// Observed responses with optional named covariates.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Dataset {
    pub responses: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// One row per observation, aligned with `covariate_names`.
    pub covariates: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(responses: Vec<f64>) -> Self {
        let covariates = vec![Vec::new(); responses.len()];
        Self { responses, covariate_names: Vec::new(), covariates }
    }

    pub fn with_covariates(
        responses: Vec<f64>,
        covariate_names: Vec<String>,
        covariates: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if covariates.len() != responses.len() {
            return Err(Error::Data(format!("{} covariate rows for {} responses", covariates.len(), responses.len())));
        }
        if let Some(bad) = covariates.iter().position(|r| r.len() != covariate_names.len()) {
            return Err(Error::Data(format!("covariate row {bad} has the wrong width")));
        }
        Ok(Self { responses, covariate_names, covariates })
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn mean(&self) -> f64 {
        if self.responses.is_empty() {
            0.0
        } else {
            self.responses.iter().sum::<f64>() / self.n() as f64
        }
    }

    pub fn covariate(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.covariate_names.iter().position(|c| c == name)?;
        Some(self.covariates.iter().map(|r| r[j]).collect())
    }

    /// Reads a CSV with a header row. The column `y` holds responses, every
    /// other column is a covariate.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
        let y_col =
            headers.iter().position(|h| h == "y").ok_or_else(|| Error::Data("missing response column `y`".into()))?;
        let names: Vec<String> =
            headers.iter().enumerate().filter(|(i, _)| *i != y_col).map(|(_, h)| h.to_string()).collect();
        let mut responses = Vec::new();
        let mut rows = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
            let line = r + 2;
            let mut row = Vec::with_capacity(names.len());
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Data(format!("line {line}: `{field}` in column `{}` is not a number", &headers[i]))
                })?;
                if i == y_col {
                    responses.push(v);
                } else {
                    row.push(v);
                }
            }
            rows.push(row);
        }
        Self::with_covariates(responses, names, rows)
    }
}

/// A discrete factor hierarchy with one backend per full assignment.
///
/// An optional continuous parameter pseudo-factor may be declared; it is
/// integrated inside the backends and takes the last factor index.
#[derive(Debug, Clone)]
pub struct HierarchicalModel {
    factors: Vec<FactorSpec>,
    parameter: Option<String>,
    cells: Vec<Arc<dyn CellModel>>,
    grid: Grid,
}

impl HierarchicalModel {
    /// `cells` are listed in grid order (first factor slowest).
    pub fn new(factors: Vec<FactorSpec>, parameter: Option<String>, cells: Vec<Arc<dyn CellModel>>) -> Result<Self> {
        if factors.is_empty() && parameter.is_none() {
            return Err(Error::InvalidModel("a model needs at least one factor".into()));
        }
        let mut earlier = 1usize;
        let mut names = BTreeSet::new();
        for f in &factors {
            f.validate(earlier)?;
            if !names.insert(f.name.clone()) {
                return Err(Error::InvalidModel(format!("duplicate factor name `{}`", f.name)));
            }
            earlier *= f.len();
        }
        if let Some(p) = &parameter {
            if names.contains(p) {
                return Err(Error::InvalidModel(format!("duplicate factor name `{p}`")));
            }
        }
        let grid = Grid::new(factors.iter().map(FactorSpec::len).collect());
        if cells.len() != grid.len() {
            return Err(Error::InvalidModel(format!(
                "{} backend cells for a grid of {} assignments",
                cells.len(),
                grid.len()
            )));
        }
        Ok(Self { factors, parameter, cells, grid })
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn parameter(&self) -> Option<&str> {
        self.parameter.as_deref()
    }

    /// Number of discrete factors.
    pub fn discrete_count(&self) -> usize {
        self.factors.len()
    }

    /// Factor count including the parameter pseudo-factor.
    pub fn factor_count(&self) -> usize {
        self.factors.len() + usize::from(self.parameter.is_some())
    }

    /// Index of the parameter pseudo-factor, if declared.
    pub fn parameter_index(&self) -> Option<usize> {
        self.parameter.as_ref().map(|_| self.factors.len())
    }

    pub fn factor_name(&self, k: usize) -> &str {
        if k < self.factors.len() {
            &self.factors[k].name
        } else {
            self.parameter.as_deref().unwrap_or("?")
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn cells(&self) -> &[Arc<dyn CellModel>] {
        &self.cells
    }

    /// Chain-product prior weight of a full assignment.
    pub fn prior_weight(&self, flat: usize) -> f64 {
        let mut w = 1.0;
        let mut earlier = 0usize;
        for (k, f) in self.factors.iter().enumerate() {
            let level = self.grid.level(flat, k);
            let row = if f.prior.len() == 1 { &f.prior[0] } else { &f.prior[earlier] };
            w *= row[level];
            earlier = earlier * f.len() + level;
        }
        w
    }

    /// Human-readable labels of a full assignment.
    pub fn assignment_label(&self, flat: usize) -> String {
        self.factors
            .iter()
            .enumerate()
            .map(|(k, f)| format!("{}={}", f.name, f.levels[self.grid.level(flat, k)]))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Normalized joint posterior over the full assignment grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorTable {
    grid: Grid,
    weights: Vec<f64>,
    pub log_evidence: f64,
}

impl PosteriorTable {
    /// Combines prior weights and log marginal likelihoods in log space.
    pub fn from_log_marginals(model: &HierarchicalModel, log_marginals: &[f64]) -> Result<Self> {
        let grid = model.grid().clone();
        assert_eq!(log_marginals.len(), grid.len());
        let log_w: Vec<f64> = (0..grid.len())
            .map(|i| {
                let p = model.prior_weight(i);
                if p == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    p.ln() + log_marginals[i]
                }
            })
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegeneratePosterior);
        }
        let scaled: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = scaled.iter().sum();
        let weights = scaled.iter().map(|w| w / z).collect();
        Ok(Self { grid, weights, log_evidence: max + z.ln() })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, levels: &[usize]) -> f64 {
        self.weights[self.grid.encode(levels)]
    }

    /// `(levels, weight)` for every full assignment.
    pub fn entries(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        self.weights.iter().enumerate().map(|(i, &w)| (self.grid.decode(i), w))
    }

    /// Posterior mass of the event described by `partial`.
    pub fn mass(&self, partial: &FactorAssignment) -> f64 {
        self.weights.iter().enumerate().filter(|(i, _)| partial.matches(&self.grid, *i)).map(|(_, w)| w).sum()
    }
}

/// Posterior weights over assignments of a subset of factors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalTable {
    pub factors: Vec<usize>,
    pub dims: Vec<usize>,
    /// Row-major over `factors`, last varying fastest.
    pub weights: Vec<f64>,
}

impl MarginalTable {
    pub fn weight(&self, levels: &[usize]) -> f64 {
        let flat = levels.iter().zip(&self.dims).fold(0, |acc, (l, d)| acc * d + l);
        self.weights[flat]
    }
}

/// Sums the joint posterior down to the factors in `keep`.
pub fn marginalize(posterior: &PosteriorTable, keep: &[usize]) -> Result<MarginalTable> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument("marginalize needs a nonempty keep set".into()));
    }
    let grid = posterior.grid();
    let k = grid.dims().len();
    let mut sorted: Vec<usize> = keep.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != keep.len() || sorted.iter().any(|&f| f >= k) {
        return Err(Error::InvalidArgument(format!("keep set {keep:?} must hold distinct factor indices below {k}")));
    }
    let mut weights = vec![0.0; grid.sub_len(&sorted)];
    for (i, w) in posterior.weights().iter().enumerate() {
        weights[grid.project(i, &sorted)] += w;
    }
    Ok(MarginalTable { dims: sorted.iter().map(|&f| grid.dims()[f]).collect(), factors: sorted, weights })
}

/// A hierarchy whose cells have been fitted to a dataset, together with the
/// resulting joint posterior.
#[derive(Debug)]
pub struct FittedHierarchy {
    model: HierarchicalModel,
    cells: Vec<Arc<dyn FittedCell>>,
    posterior: PosteriorTable,
}

impl FittedHierarchy {
    pub fn fit(model: HierarchicalModel, data: &Dataset, mode: ExecMode) -> Result<Self> {
        let fits = par::map_slice(mode, model.cells(), |c| c.fit(data));
        let mut cells = Vec::with_capacity(fits.len());
        for (i, fit) in fits.into_iter().enumerate() {
            match fit {
                Ok(c) => cells.push(Arc::from(c)),
                Err(e) => return Err(Error::Backend { assignment: model.assignment_label(i), message: e.to_string() }),
            }
        }
        Self::from_fitted(model, cells)
    }

    pub fn from_fitted(model: HierarchicalModel, cells: Vec<Arc<dyn FittedCell>>) -> Result<Self> {
        let log_m: Vec<f64> = cells.iter().map(|c| c.log_marginal()).collect();
        if let Some(i) = log_m.iter().position(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::Backend {
                assignment: model.assignment_label(i),
                message: format!("non-finite log marginal likelihood {}", log_m[i]),
            });
        }
        let posterior = PosteriorTable::from_log_marginals(&model, &log_m)?;
        Ok(Self { model, cells, posterior })
    }

    /// Replaces the posterior weights, e.g. to impose an externally computed
    /// table. The weights must cover the grid and sum to one.
    pub fn with_posterior(mut self, posterior: PosteriorTable) -> Result<Self> {
        if posterior.grid() != self.model.grid() {
            return Err(Error::InvalidArgument("posterior grid does not match the model".into()));
        }
        self.posterior = posterior;
        Ok(self)
    }

    pub fn model(&self) -> &HierarchicalModel {
        &self.model
    }

    pub fn posterior(&self) -> &PosteriorTable {
        &self.posterior
    }

    /// The same fitted cells under a different prior over the same grid.
    pub fn reweighted(&self, model: HierarchicalModel) -> Result<Self> {
        if model.grid() != self.model.grid() {
            return Err(Error::InvalidArgument("reweighting needs an identical factor grid".into()));
        }
        Self::from_fitted(model, self.cells.clone())
    }

    pub fn cells(&self) -> &[Arc<dyn FittedCell>] {
        &self.cells
    }

    pub fn cell(&self, flat: usize) -> &dyn FittedCell {
        self.cells[flat].as_ref()
    }

    /// Mixture moments over the completions of `partial`, latent factors
    /// mixed out under the conditional posterior.
    pub fn conditional_moments(&self, partial: &FactorAssignment) -> Result<PredictiveMoments> {
        let grid = self.model.grid();
        for (k, l) in partial.iter() {
            if k >= grid.dims().len() {
                return Err(Error::InvalidArgument(format!("factor index {} is not a discrete factor", k + 1)));
            }
            if l >= grid.dims()[k] {
                return Err(Error::InvalidArgument(format!("level {l} out of range for factor {}", k + 1)));
            }
        }
        let members: Vec<usize> = (0..grid.len()).filter(|&i| partial.matches(grid, i)).collect();
        mixture(&members, self.posterior.weights(), &self.cells).ok_or_else(|| Error::NullEvent(partial.to_string()))
    }
}

/// Mixture moments of the listed cells under (renormalized) posterior
/// weights; `None` when their mass is zero.
pub(crate) fn mixture(members: &[usize], weights: &[f64], cells: &[Arc<dyn FittedCell>]) -> Option<PredictiveMoments> {
    let mass: f64 = members.iter().map(|&i| weights[i]).sum();
    if mass <= 0.0 {
        return None;
    }
    let mut mean = 0.0;
    for &i in members {
        mean += weights[i] / mass * cells[i].moments().mean;
    }
    let mut var = 0.0;
    for &i in members {
        let m = cells[i].moments();
        let d = m.mean - mean;
        var += weights[i] / mass * (m.variance + d * d);
    }
    Some(PredictiveMoments::new(mean, var))
}

/// Fits every cell and returns the normalized joint posterior.
pub fn joint_posterior(model: &HierarchicalModel, data: &Dataset) -> Result<PosteriorTable> {
    let fitted = FittedHierarchy::fit(model.clone(), data, ExecMode::Sequential)?;
    Ok(fitted.posterior)
}
