//! The shuttle O-ring analysis: three links × eight covariate subsets,
//! predicting the failure probability at 31°F.

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::CellModel;
use crate::cscope::DecompositionPlan;
use crate::engine::{decompose_exact, DecompositionResult};
use crate::error::{Error, Result};
use crate::glm::{GlmCellSpec, GlmFit, GlmModelSpec, LinkFunction, McmcSettings, PredictionTarget};
use crate::hierarchy::{Dataset, FactorSpec, FittedHierarchy, HierarchicalModel};
use crate::par::ExecMode;
use crate::rng::derive_seed;

use super::{variable_set_importance, SubsetImportance};

const BUNDLED: &str = include_str!("../../data/challenger.csv");

/// Covariate subsets in table order; `none` is the intercept-only model.
pub const SUBSETS: [(&str, &[&str]); 8] = [
    ("t", &["t"]),
    ("t^2", &["t^2"]),
    ("s", &["s"]),
    ("t,t^2", &["t", "t^2"]),
    ("t,s", &["t", "s"]),
    ("t^2,s", &["t^2", "s"]),
    ("t,t^2,s", &["t", "t^2", "s"]),
    ("none", &[]),
];

/// Models kept by the six-model restriction, as one-based table indices.
pub const RESTRICTED_MODELS: [usize; 6] = [1, 4, 5, 7, 8, 15];

pub const TRIALS: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChallengerRow {
    pub damaged: u32,
    pub t: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChallengerDataset {
    pub rows: Vec<ChallengerRow>,
}

impl ChallengerDataset {
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED.as_bytes()).expect("bundled data is valid")
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ChallengerRow>, _>>()
            .map_err(|e| Error::Data(e.to_string()))?;
        if rows.len() != 23 {
            return Err(Error::Data(format!("expected 23 flights, found {}", rows.len())));
        }
        if let Some(r) = rows.iter().find(|r| r.damaged > TRIALS as u32) {
            return Err(Error::Data(format!("damaged count {} exceeds {TRIALS}", r.damaged)));
        }
        Ok(Self { rows })
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset::with_covariates(
            self.rows.iter().map(|r| r.damaged as f64).collect(),
            vec!["t".into(), "s".into()],
            self.rows.iter().map(|r| vec![r.t, r.s]).collect(),
        )
        .expect("rows are aligned")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChallengerConfig {
    /// Coefficient prior sd on the standardized scale. Model weights are
    /// sensitive to it through the Occam factor of each Laplace marginal.
    pub prior_sd: f64,
    pub chain_length: usize,
    pub burn_in: usize,
    pub step_scale: Option<f64>,
    pub seed: u64,
    pub t_new: f64,
    pub s_new: f64,
    #[serde(skip)]
    pub mode: ExecMode,
}

impl Default for ChallengerConfig {
    fn default() -> Self {
        Self {
            prior_sd: 30.0,
            chain_length: 4000,
            burn_in: 1000,
            step_scale: None,
            seed: 1986,
            t_new: 31.0,
            s_new: 200.0,
            mode: ExecMode::Parallel,
        }
    }
}

/// One row of the 24-model table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRow {
    pub id: String,
    pub link: String,
    pub subset: String,
    pub log_marginal: f64,
    pub weight: f64,
    pub restricted_weight: f64,
    pub mean_p: f64,
    pub var_p: f64,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChallengerReport {
    pub models: Vec<ModelRow>,
    /// Plan `1|2` over all 24 models.
    pub three_term: DecompositionResult,
    /// Plan `1,2` under the six-model prior.
    pub restricted: DecompositionResult,
    pub importance: Vec<SubsetImportance>,
    pub warnings: Vec<String>,
}

fn model_with_prior(
    cells: Vec<Arc<dyn CellModel>>,
    link_prior: Vec<Vec<f64>>,
    subset_prior: Vec<Vec<f64>>,
) -> Result<HierarchicalModel> {
    let links: Vec<&str> = LinkFunction::ALL.iter().map(|l| l.code()).collect();
    let subsets: Vec<&str> = SUBSETS.iter().map(|s| s.0).collect();
    HierarchicalModel::new(
        vec![
            FactorSpec::conditional("link", &links, link_prior),
            FactorSpec::conditional("subset", &subsets, subset_prior),
        ],
        None,
        cells,
    )
}

/// Prior rows for the six-model restriction: uniform over the kept models.
fn restricted_prior() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut per_link = [[0.0; 8]; 3];
    for &m in &RESTRICTED_MODELS {
        per_link[(m - 1) / 8][(m - 1) % 8] = 1.0;
    }
    let total = RESTRICTED_MODELS.len() as f64;
    let link_row: Vec<f64> = per_link.iter().map(|r| r.iter().sum::<f64>() / total).collect();
    let subset_rows = per_link
        .iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            if s > 0.0 {
                r.iter().map(|x| x / s).collect()
            } else {
                vec![1.0 / 8.0; 8]
            }
        })
        .collect();
    (vec![link_row], subset_rows)
}

/// Fits all 24 models and decomposes the predictive variance of
/// `p` at the configured temperature and pressure.
pub fn run_challenger(data: &ChallengerDataset, config: &ChallengerConfig) -> Result<ChallengerReport> {
    let dataset = data.to_dataset();
    let x_new: BTreeMap<String, f64> = [("t".to_string(), config.t_new), ("s".to_string(), config.s_new)].into();
    let mut specs = Vec::with_capacity(24);
    for (li, link) in LinkFunction::ALL.iter().enumerate() {
        for (si, (_, terms)) in SUBSETS.iter().enumerate() {
            let mut model = GlmModelSpec::new(*link, terms, TRIALS);
            model.prior_sd = config.prior_sd;
            specs.push(GlmCellSpec {
                model,
                x_new: x_new.clone(),
                target: PredictionTarget::Probability,
                mcmc: McmcSettings {
                    chain_length: config.chain_length,
                    burn_in: config.burn_in,
                    step_scale: config.step_scale,
                    seed: derive_seed(config.seed, &[(li * 8 + si) as u64]),
                },
            });
        }
    }
    // Fit once, keeping the concrete fits for the model table.
    let fits: Vec<Result<GlmFit>> = crate::par::map_slice(config.mode, &specs, |s| GlmFit::fit(s, &dataset));
    let mut concrete = Vec::with_capacity(24);
    for (i, f) in fits.into_iter().enumerate() {
        concrete.push(f.map_err(|e| Error::Backend {
            assignment: format!("m{} ({}, {})", i + 1, specs[i].model.link, SUBSETS[i % 8].0),
            message: e.to_string(),
        })?);
    }
    let cells: Vec<Arc<dyn CellModel>> = specs.iter().map(|s| Arc::new(s.clone()) as Arc<dyn CellModel>).collect();
    let fitted_cells: Vec<Arc<dyn crate::backend::FittedCell>> =
        concrete.iter().map(|f| Arc::new(f.clone()) as Arc<dyn crate::backend::FittedCell>).collect();

    let full_model = model_with_prior(cells.clone(), vec![vec![1.0 / 3.0; 3]], vec![vec![1.0 / 8.0; 8]])?;
    let full = FittedHierarchy::from_fitted(full_model, fitted_cells)?;
    let (link_row, subset_rows) = restricted_prior();
    let restricted_fit = full.reweighted(model_with_prior(cells, link_row, subset_rows)?)?;

    let three_term = decompose_exact(&full, &DecompositionPlan::parse("1|2", 2)?)?;
    let restricted = decompose_exact(&restricted_fit, &DecompositionPlan::parse("1,2", 2)?)?;
    let importance = variable_set_importance(&full, 1)?;

    let mut warnings = Vec::new();
    let models = concrete
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if let Some(w) = &f.warning {
                warnings.push(format!("m{}: {w}", i + 1));
            }
            let m = crate::backend::FittedCell::moments(f);
            ModelRow {
                id: format!("m{}", i + 1),
                link: specs[i].model.link.code().to_string(),
                subset: SUBSETS[i % 8].0.to_string(),
                log_marginal: f.laplace.log_marginal,
                weight: full.posterior().weights()[i],
                restricted_weight: restricted_fit.posterior().weights()[i],
                mean_p: m.mean,
                var_p: m.variance,
                acceptance_rate: f.acceptance_rate,
            }
        })
        .collect();
    Ok(ChallengerReport { models, three_term, restricted, importance, warnings })
}
