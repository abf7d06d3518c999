//! Sample-size sweep on simulated binomial regressions with link and
//! covariate-subset uncertainty.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::CellModel;
use crate::cscope::DecompositionPlan;
use crate::engine::decompose_exact;
use crate::error::{Error, Result};
use crate::glm::{GlmCellSpec, GlmModelSpec, LinkFunction, McmcSettings, PredictionTarget};
use crate::hierarchy::{Dataset, FactorSpec, FittedHierarchy, HierarchicalModel};
use crate::par::{self, ExecMode};
use crate::rng::{derive_seed, stream};

/// Short names of the three terms of plan `1|2`, in engine order.
pub const TERM_NAMES: [&str; 3] = ["predictions", "models", "links"];

/// What is predicted at the fresh covariate vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepTarget {
    /// The success count out of `trials`, including binomial noise.
    #[default]
    Count,
    /// The success probability, i.e. the expected count up to the factor `trials`.
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub true_beta: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
    pub prior_sd: f64,
    /// Leading covariates whose subsets span the model space.
    pub active_covariates: usize,
    pub chain_length: usize,
    pub burn_in: usize,
    pub step_scale: Option<f64>,
    pub target: SweepTarget,
    #[serde(skip)]
    pub mode: ExecMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![25, 50, 100, 200, 400],
            replicates: 20,
            true_beta: vec![0.75, 0.25, -0.3, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            trials: 30,
            seed: 2023,
            prior_sd: crate::glm::default_prior_sd(),
            active_covariates: 4,
            chain_length: 2000,
            burn_in: 500,
            step_scale: None,
            target: SweepTarget::Count,
            mode: ExecMode::Parallel,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("n_grid must be nonempty and strictly increasing".into()));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicates must be at least 1".into()));
        }
        if self.true_beta.len() != 10 {
            return Err(Error::InvalidArgument(format!("true_beta needs 10 entries, found {}", self.true_beta.len())));
        }
        if self.active_covariates > self.true_beta.len() || self.active_covariates > 16 {
            return Err(Error::InvalidArgument("active_covariates out of range".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        Ok(())
    }

    fn covariate_names(&self) -> Vec<String> {
        (1..=self.true_beta.len()).map(|j| format!("x{j}")).collect()
    }

    /// Every subset of the active covariates (the empty one is the
    /// intercept-only model), then the model with all covariates.
    pub fn subsets(&self) -> Vec<(String, Vec<String>)> {
        let names = self.covariate_names();
        let a = self.active_covariates;
        let mut out: Vec<(String, Vec<String>)> = (0u32..(1 << a))
            .map(|mask| {
                let terms: Vec<String> = (0..a).filter(|j| mask & (1 << j) != 0).map(|j| names[j].clone()).collect();
                let label = if terms.is_empty() { "none".to_string() } else { terms.join("+") };
                (label, terms)
            })
            .collect();
        if a < names.len() {
            out.push(("all".into(), names));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub replicate: usize,
    pub term_label: String,
    pub value: f64,
    pub proportion: f64,
}

/// Replicate averages at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n: usize,
    pub replicates_ok: usize,
    pub failures: usize,
    pub values: [f64; 3],
    pub total: f64,
    pub proportions: [f64; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub curves: Vec<CurvePoint>,
    pub failures: Vec<String>,
    pub attempted: usize,
}

impl SweepReport {
    pub fn failure_fraction(&self) -> f64 {
        self.failures.len() as f64 / self.attempted.max(1) as f64
    }

    pub fn write_rows_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Columns `n,predictions,models,links,total`.
    pub fn write_absolute_curves<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", TERM_NAMES[0], TERM_NAMES[1], TERM_NAMES[2], "total"])
            .map_err(|e| Error::Io(e.to_string()))?;
        for c in &self.curves {
            w.serialize((c.n, c.values[0], c.values[1], c.values[2], c.total)).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Columns `n,predictions,models,links`.
    pub fn write_proportion_curves<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", TERM_NAMES[0], TERM_NAMES[1], TERM_NAMES[2]]).map_err(|e| Error::Io(e.to_string()))?;
        for c in &self.curves {
            w.serialize((c.n, c.proportions[0], c.proportions[1], c.proportions[2]))
                .map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

struct ReplicateOutcome {
    labels: Vec<String>,
    values: [f64; 3],
    total: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Simulates one replicate's data and fits the full link-by-subset model
/// space to it, spreading the fits according to `config.mode`.
pub fn fit_replicate(config: &SweepConfig, n: usize, replicate: usize) -> Result<FittedHierarchy> {
    let mut r = stream(config.seed, &[n as u64, replicate as u64]);
    let p = config.true_beta.len();
    let mut rows = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let eta: f64 = x.iter().zip(&config.true_beta).map(|(a, b)| a * b).sum();
        let y = Binomial::new(config.trials, logistic(eta)).expect("valid binomial").sample(&mut r);
        rows.push(x);
        ys.push(y as f64);
    }
    let names = config.covariate_names();
    let x_new: std::collections::BTreeMap<String, f64> =
        names.iter().map(|nm| (nm.clone(), r.sample::<f64, _>(StandardNormal))).collect();
    let data = Dataset::with_covariates(ys, names, rows)?;

    let subsets = config.subsets();
    let mut cells: Vec<Arc<dyn CellModel>> = Vec::with_capacity(3 * subsets.len());
    for (li, link) in LinkFunction::ALL.iter().enumerate() {
        for (si, (_, terms)) in subsets.iter().enumerate() {
            let model = GlmModelSpec {
                link: *link,
                covariates: terms.clone(),
                trials: config.trials,
                prior_sd: config.prior_sd,
            };
            cells.push(Arc::new(GlmCellSpec {
                model,
                x_new: x_new.clone(),
                target: match config.target {
                    SweepTarget::Count => PredictionTarget::Count { trials: config.trials },
                    SweepTarget::Probability => PredictionTarget::Probability,
                },
                mcmc: McmcSettings {
                    chain_length: config.chain_length,
                    burn_in: config.burn_in,
                    step_scale: config.step_scale,
                    seed: derive_seed(config.seed, &[n as u64, replicate as u64, (li * subsets.len() + si) as u64]),
                },
            }));
        }
    }
    let links: Vec<&str> = LinkFunction::ALL.iter().map(|l| l.code()).collect();
    let subset_labels: Vec<&str> = subsets.iter().map(|s| s.0.as_str()).collect();
    let model = HierarchicalModel::new(
        vec![FactorSpec::uniform("link", &links), FactorSpec::uniform("subset", &subset_labels)],
        None,
        cells,
    )?;
    FittedHierarchy::fit(model, &data, config.mode)
}

fn run_replicate(config: &SweepConfig, n: usize, replicate: usize) -> Result<ReplicateOutcome> {
    let fitted = fit_replicate(config, n, replicate)?;
    let result = decompose_exact(&fitted, &DecompositionPlan::parse("1|2", 2)?)?;
    let v = result.values();
    Ok(ReplicateOutcome {
        labels: result.terms.iter().map(|t| t.label.text.clone()).collect(),
        values: [v[0], v[1], v[2]],
        total: result.total,
    })
}

/// Runs every `(n, replicate)` pair, in parallel when enabled, and averages
/// term values and proportions per `n`. A replicate whose fit fails is
/// skipped and counted.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepReport> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> =
        config.n_grid.iter().flat_map(|&n| (0..config.replicates).map(move |r| (n, r))).collect();
    let outcomes = par::map_slice(config.mode, &jobs, |&(n, r)| run_replicate(config, n, r));

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut curves = Vec::with_capacity(config.n_grid.len());
    for &n in &config.n_grid {
        let mut vals: Vec<[f64; 3]> = Vec::new();
        let mut props: Vec<[f64; 3]> = Vec::new();
        let mut totals = Vec::new();
        let mut failed = 0;
        for ((jn, r), out) in jobs.iter().zip(&outcomes) {
            if *jn != n {
                continue;
            }
            match out {
                Ok(o) => {
                    let p = [o.values[0] / o.total, o.values[1] / o.total, o.values[2] / o.total];
                    for ((label, &value), &proportion) in o.labels.iter().zip(&o.values).zip(&p) {
                        rows.push(SweepRow { n, replicate: *r, term_label: label.clone(), value, proportion });
                    }
                    vals.push(o.values);
                    props.push(p);
                    totals.push(o.total);
                }
                Err(e) => {
                    failed += 1;
                    failures.push(format!("n={n} replicate={r}: {e}"));
                }
            }
        }
        let avg = |xs: &[[f64; 3]], k: usize| -> f64 {
            let col: Vec<f64> = xs.iter().map(|x| x[k]).collect();
            par::pairwise_sum(&col) / col.len().max(1) as f64
        };
        curves.push(CurvePoint {
            n,
            replicates_ok: vals.len(),
            failures: failed,
            values: [avg(&vals, 0), avg(&vals, 1), avg(&vals, 2)],
            total: par::pairwise_sum(&totals) / totals.len().max(1) as f64,
            proportions: [avg(&props, 0), avg(&props, 1), avg(&props, 2)],
        });
    }
    Ok(SweepReport { rows, curves, failures, attempted: jobs.len() })
}
