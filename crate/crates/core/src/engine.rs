//! Term-by-term evaluation of decomposition plans.
//!
//! For a plan with blocks `B_1..B_m` let `P_j = B_1 ∪ .. ∪ B_j`. Block term
//! `j` is `E_{P_{j-1}} Var_{B_j | P_{j-1}} E(Y | P_j, D)` and the leading
//! term is `E_{P_m} Var(Y | P_m, D)`; latent factors are mixed out inside
//! every conditional moment. The exact engine evaluates these as nested
//! weighted sums over the factor grid. The Monte Carlo engine samples them.
//!
//! A model may expose its backend parameter as a pseudo-factor. It can only
//! be conditioned on in the last block, with no discrete factor latent,
//! since its meaning depends on the full discrete assignment.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::Serialize;

use crate::backend::PredictiveMoments;
use crate::cscope::{term_labels, DecompositionPlan, TermKind, TermLabel};
use crate::error::{Error, Result};
use crate::hierarchy::{FactorAssignment, FittedHierarchy};
use crate::par::{self, ExecMode};
use crate::rng;

/// Relative conservation tolerance of the exact engine.
pub const EXACT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Exact,
    MonteCarlo,
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineKind::Exact => "exact",
            EngineKind::MonteCarlo => "monte-carlo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermEstimate {
    pub label: TermLabel,
    pub value: f64,
    pub std_error: f64,
    pub proportion: f64,
    pub engine: EngineKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionResult {
    pub plan: String,
    #[serde(skip)]
    pub plan_struct: DecompositionPlan,
    pub terms: Vec<TermEstimate>,
    /// Directly computed `Var(Y | D)`.
    pub total: f64,
    pub mean: f64,
    pub residual: f64,
    pub residual_se: f64,
    pub engine: EngineKind,
    pub seed: Option<u64>,
}

impl DecompositionResult {
    pub fn proportions(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.proportion).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.value).collect()
    }

    /// Exact: `|residual| <= 1e-10 max(1, total)`. Monte Carlo:
    /// `|residual| <= 3 SE(residual)`.
    pub fn conserves(&self) -> bool {
        match self.engine {
            EngineKind::Exact => self.residual.abs() <= EXACT_TOL * self.total.max(1.0),
            EngineKind::MonteCarlo => self.residual.abs() <= 3.0 * self.residual_se,
        }
    }

    fn assemble(
        plan: &DecompositionPlan,
        labels: Vec<TermLabel>,
        estimates: Vec<(f64, f64)>,
        total: PredictiveMoments,
        engine: EngineKind,
        seed: Option<u64>,
    ) -> Self {
        let sum: f64 = estimates.iter().map(|e| e.0).sum();
        let residual_se = estimates.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        let terms = labels
            .into_iter()
            .zip(estimates)
            .map(|(label, (value, std_error))| TermEstimate {
                label,
                value,
                std_error,
                proportion: value / total.variance,
                engine,
            })
            .collect();
        Self {
            plan: plan.to_string(),
            plan_struct: plan.clone(),
            terms,
            total: total.variance,
            mean: total.mean,
            residual: total.variance - sum,
            residual_se,
            engine,
            seed,
        }
    }
}

/// The fixed left-hand side: predictive moments with every factor mixed out.
pub fn total_variance(fitted: &FittedHierarchy) -> PredictiveMoments {
    fitted.conditional_moments(&FactorAssignment::empty()).expect("a normalized posterior has unit mass")
}

/// Grouping of grid cells by their projection onto each plan prefix.
struct Levels {
    /// `group_of[j][cell]` for prefix length `j = 0..=m`.
    group_of: Vec<Vec<usize>>,
    group_count: Vec<usize>,
    param_block: Option<usize>,
}

impl Levels {
    fn new(fitted: &FittedHierarchy, plan: &DecompositionPlan) -> Result<Self> {
        let model = fitted.model();
        if plan.k() != model.factor_count() {
            return Err(Error::InvalidPlan(format!(
                "plan is over {} factors but the model declares {}",
                plan.k(),
                model.factor_count()
            )));
        }
        plan.validate()?;
        let param = model.parameter_index();
        let m = plan.blocks().len();
        let param_block = param.and_then(|p| plan.blocks().iter().position(|b| b.contains(&p)));
        if let Some(j) = param_block {
            if j + 1 != m || plan.latent().iter().any(|&f| Some(f) != param) {
                return Err(Error::InvalidPlan(format!(
                    "parameter `{}` may only be conditioned on in the last block with no latent factors",
                    model.factor_name(param.unwrap())
                )));
            }
        }
        let grid = model.grid();
        let mut group_of = Vec::with_capacity(m + 1);
        let mut group_count = Vec::with_capacity(m + 1);
        for j in 0..=m {
            let keep: Vec<usize> = plan.prefix(j).into_iter().filter(|&f| Some(f) != param).collect();
            group_of.push((0..grid.len()).map(|i| grid.project(i, &keep)).collect());
            group_count.push(grid.sub_len(&keep));
        }
        Ok(Self { group_of, group_count, param_block })
    }

    fn depth(&self) -> usize {
        self.group_of.len() - 1
    }
}

/// Evaluates every term of `plan` by nested weighted sums.
pub fn decompose_exact(fitted: &FittedHierarchy, plan: &DecompositionPlan) -> Result<DecompositionResult> {
    let levels = Levels::new(fitted, plan)?;
    let labels = term_labels(plan)?;
    let w = fitted.posterior().weights();
    let cells = fitted.cells();
    let m = levels.depth();

    // Group masses and means at every prefix level.
    let mut mass = Vec::with_capacity(m + 1);
    let mut mean = Vec::with_capacity(m + 1);
    for j in 0..=m {
        let mut wsum = vec![0.0; levels.group_count[j]];
        let mut msum = vec![0.0; levels.group_count[j]];
        for (i, cell) in cells.iter().enumerate() {
            let g = levels.group_of[j][i];
            wsum[g] += w[i];
            msum[g] += w[i] * cell.moments().mean;
        }
        let means = msum.iter().zip(&wsum).map(|(s, &ws)| if ws > 0.0 { s / ws } else { 0.0 }).collect::<Vec<f64>>();
        mass.push(wsum);
        mean.push(means);
    }

    let mut estimates = Vec::with_capacity(m + 1);
    let leading = if levels.param_block.is_some() {
        cells.iter().enumerate().map(|(i, c)| w[i] * c.parameter_split().e_var).sum()
    } else {
        let mut acc = 0.0;
        for (i, cell) in cells.iter().enumerate() {
            if w[i] == 0.0 {
                continue;
            }
            let g = levels.group_of[m][i];
            let mo = cell.moments();
            let d = mo.mean - mean[m][g];
            acc += w[i] * (mo.variance + d * d);
        }
        acc
    };
    estimates.push((leading, 0.0));

    for j in (0..m).rev() {
        let mut seen = vec![false; levels.group_count[j + 1]];
        let mut acc = 0.0;
        for i in 0..cells.len() {
            let g = levels.group_of[j + 1][i];
            if seen[g] || mass[j + 1][g] == 0.0 {
                continue;
            }
            seen[g] = true;
            let parent = levels.group_of[j][i];
            let d = mean[j + 1][g] - mean[j][parent];
            acc += mass[j + 1][g] * d * d;
        }
        if levels.param_block == Some(j) {
            acc += cells.iter().enumerate().map(|(i, c)| w[i] * c.parameter_split().var_e).sum::<f64>();
        }
        estimates.push((acc, 0.0));
    }

    Ok(DecompositionResult::assemble(plan, labels, estimates, total_variance(fitted), EngineKind::Exact, None))
}

/// Outer and inner sample sizes of the Monte Carlo engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct McBudget {
    pub outer: usize,
    pub inner: usize,
}

impl McBudget {
    pub fn new(outer: usize, inner: usize) -> Self {
        Self { outer, inner }
    }

    /// Parses `OUTERxINNER`, e.g. `4096x1024`.
    pub fn parse(text: &str) -> Result<Self> {
        let (o, i) = text
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::InvalidArgument(format!("budget `{text}` is not OUTERxINNER")))?;
        let parse =
            |s: &str| {
                s.trim().parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| {
                    Error::InvalidArgument(format!("budget `{text}` needs two positive sizes OUTERxINNER"))
                })
            };
        Ok(Self::new(parse(o)?, parse(i)?))
    }
}

impl fmt::Display for McBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.outer, self.inner)
    }
}

/// Weighted samplers over the cells of every group at one prefix level.
struct GroupSamplers {
    members: Vec<Vec<usize>>,
    samplers: Vec<Option<WeightedIndex<f64>>>,
}

impl GroupSamplers {
    fn new(group_of: &[usize], count: usize, weights: &[f64]) -> Self {
        let mut members = vec![Vec::new(); count];
        for (i, &g) in group_of.iter().enumerate() {
            if weights[i] > 0.0 {
                members[g].push(i);
            }
        }
        let samplers = members
            .iter()
            .map(|ms| {
                if ms.is_empty() {
                    None
                } else {
                    Some(WeightedIndex::new(ms.iter().map(|&i| weights[i])).expect("positive weights"))
                }
            })
            .collect();
        Self { members, samplers }
    }

    fn sample(&self, group: usize, rng: &mut ChaCha8Rng) -> usize {
        let s = self.samplers[group].as_ref().expect("sampled groups have mass");
        self.members[group][s.sample(rng)]
    }
}

/// Estimates every term by nested sampling; deterministic in `(seed, budget)`
/// regardless of thread count.
///
/// Block terms use the paired estimator
/// `Var_{B_j} E(Y | P_j) = Var(M | P_{j-1}) - E (M_1 - M_2)^2 / 2`,
/// where `M_1, M_2` are conditional means of the outcome given two
/// independent completions that share `P_j`. The leading term averages the
/// within-draw variance plus the spread of the draw means. Sample variances
/// use the `n - 1` divisor and standard errors come from the spread of the
/// per-outer-sample estimates.
pub fn decompose_mc(
    fitted: &FittedHierarchy,
    plan: &DecompositionPlan,
    budget: McBudget,
    seed: u64,
    mode: ExecMode,
) -> Result<DecompositionResult> {
    if budget.inner < 2 {
        return Err(Error::InvalidArgument("the inner budget needs at least 2 draws".into()));
    }
    if budget.outer < 2 {
        return Err(Error::InvalidArgument("the outer budget needs at least 2 samples".into()));
    }
    let levels = Levels::new(fitted, plan)?;
    let labels = term_labels(plan)?;
    let w = fitted.posterior().weights();
    let m = levels.depth();
    let samplers: Vec<GroupSamplers> =
        (0..=m).map(|j| GroupSamplers::new(&levels.group_of[j], levels.group_count[j], w)).collect();
    let param_manifest = levels.param_block.is_some();

    let leading_one = |i: usize| -> f64 {
        let mut r = rng::stream(seed, &[0, i as u64]);
        let f0 = samplers[0].sample(0, &mut r);
        if param_manifest {
            return fitted.cell(f0).draw(&mut r).variance();
        }
        let g = levels.group_of[m][f0];
        let mut means = Vec::with_capacity(budget.inner);
        let mut vars = Vec::with_capacity(budget.inner);
        for _ in 0..budget.inner {
            let f = samplers[m].sample(g, &mut r);
            let d = fitted.cell(f).draw(&mut r);
            means.push(d.mean());
            vars.push(d.variance());
        }
        let (_, spread) = par::mean_and_variance(&means);
        par::pairwise_sum(&vars) / vars.len() as f64 + spread
    };

    let block_one = |j: usize, i: usize| -> f64 {
        let mut r = rng::stream(seed, &[j as u64 + 1, i as u64]);
        let f0 = samplers[0].sample(0, &mut r);
        let parent = levels.group_of[j][f0];
        let mut m1 = Vec::with_capacity(budget.inner);
        let mut half_sq = Vec::with_capacity(budget.inner);
        for _ in 0..budget.inner {
            let f = samplers[j].sample(parent, &mut r);
            let (a, b) = if levels.param_block == Some(j) {
                let x = fitted.cell(f).draw(&mut r).mean();
                (x, x)
            } else {
                let a = fitted.cell(f).draw(&mut r).mean();
                let f2 = samplers[j + 1].sample(levels.group_of[j + 1][f], &mut r);
                (a, fitted.cell(f2).draw(&mut r).mean())
            };
            m1.push(a);
            half_sq.push(0.5 * (a - b) * (a - b));
        }
        let (_, v) = par::mean_and_variance(&m1);
        v - par::pairwise_sum(&half_sq) / half_sq.len() as f64
    };

    let summarize = |xs: Vec<f64>| -> (f64, f64) {
        let (mean, var) = par::mean_and_variance(&xs);
        (mean, (var / xs.len() as f64).sqrt())
    };

    let mut estimates = vec![summarize(par::map_indexed(mode, budget.outer, leading_one))];
    for j in (0..m).rev() {
        estimates.push(summarize(par::map_indexed(mode, budget.outer, |i| block_one(j, i))));
    }

    Ok(DecompositionResult::assemble(
        plan,
        labels,
        estimates,
        total_variance(fitted),
        EngineKind::MonteCarlo,
        Some(seed),
    ))
}

/// A term whose share of the total falls below the report threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlaggedTerm {
    pub label: String,
    pub value: f64,
    pub proportion: f64,
    /// Factors that could be fixed at a constant, for the trailing
    /// `Var_{B_1} E` term only.
    pub fix_factors: Vec<usize>,
    pub suggestion: Option<String>,
    pub reduced_expression: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropTermReport {
    pub plan: String,
    pub threshold: f64,
    pub flagged: Vec<FlaggedTerm>,
}

impl DropTermReport {
    pub fn is_empty(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Lists terms whose proportion is below `threshold`. A small trailing
/// `Var_{B_1} E(Y | B_1, D)` term means the predictions hardly move with
/// `B_1`, so the report suggests fixing those factors and shows the reduced
/// expression over the remaining blocks.
pub fn drop_term_report(result: &DecompositionResult, threshold: f64) -> DropTermReport {
    let plan = &result.plan_struct;
    let flagged = result
        .terms
        .iter()
        .filter(|t| t.proportion < threshold)
        .map(|t| {
            let mut ft = FlaggedTerm {
                label: t.label.text.clone(),
                value: t.value,
                proportion: t.proportion,
                fix_factors: Vec::new(),
                suggestion: None,
                reduced_expression: None,
            };
            if t.label.kind == TermKind::Block(0) {
                let first = &plan.blocks()[0];
                ft.fix_factors = first.iter().copied().collect();
                let names = first.iter().map(|f| format!("V{}", f + 1)).collect::<Vec<_>>().join(",");
                ft.suggestion = Some(format!("fix {names} at a constant level"));
                ft.reduced_expression = Some(reduced_expression(plan));
            }
            ft
        })
        .collect();
    DropTermReport { plan: result.plan.clone(), threshold, flagged }
}

fn reduced_expression(plan: &DecompositionPlan) -> String {
    let rest: Vec<_> = plan.blocks()[1..].to_vec();
    if rest.is_empty() {
        return "Var(Y|D)".to_string();
    }
    match DecompositionPlan::new(rest, plan.k()) {
        Ok(reduced) => match term_labels(&reduced) {
            Ok(labels) => {
                format!("Var(Y|D) = {}", labels.iter().map(|l| l.text.as_str()).collect::<Vec<_>>().join(" + "))
            }
            Err(_) => "Var(Y|D)".to_string(),
        },
        Err(_) => "Var(Y|D)".to_string(),
    }
}

/// One CSV row per term.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub plan: String,
    pub term_label: String,
    pub value: f64,
    pub std_error: f64,
    pub proportion: f64,
    pub engine: EngineKind,
    pub seed: Option<u64>,
}

pub fn result_rows(result: &DecompositionResult) -> Vec<ResultRow> {
    result
        .terms
        .iter()
        .map(|t| ResultRow {
            plan: result.plan.clone(),
            term_label: t.label.text.clone(),
            value: t.value,
            std_error: t.std_error,
            proportion: t.proportion,
            engine: t.engine,
            seed: result.seed,
        })
        .collect()
}

/// Writes results as CSV with columns
/// `plan,term_label,value,std_error,proportion,engine,seed`.
pub fn write_results_csv<W: std::io::Write>(results: &[DecompositionResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        for row in result_rows(r) {
            w.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
