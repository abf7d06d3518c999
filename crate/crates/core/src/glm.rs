//! Binomial regression backend with logit, complementary log-log and probit
//! links: analytic log-posterior derivatives, Laplace marginal likelihood,
//! random-walk Metropolis, and predictive moments at a new covariate vector.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::backend::{uniform_index, CellModel, ConditionalDraw, FittedCell, ParameterSplit, PredictiveMoments};
use crate::error::{Error, Result};
use crate::hierarchy::Dataset;
use crate::rng;

/// Probabilities are kept at least this far from 0 and 1 inside logs.
pub const PROB_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    Logit,
    Cloglog,
    Probit,
}

impl LinkFunction {
    pub const ALL: [LinkFunction; 3] = [LinkFunction::Logit, LinkFunction::Cloglog, LinkFunction::Probit];

    /// One-letter code: L, C or P.
    pub fn code(self) -> &'static str {
        match self {
            LinkFunction::Logit => "L",
            LinkFunction::Cloglog => "C",
            LinkFunction::Probit => "P",
        }
    }

    /// Inverse link, clamped to `[1e-15, 1 - 1e-15]`.
    pub fn inverse(self, eta: f64) -> f64 {
        let p = match self {
            LinkFunction::Logit => 1.0 / (1.0 + (-eta).exp()),
            LinkFunction::Probit => 0.5 * erfc(-eta * FRAC_1_SQRT_2),
            LinkFunction::Cloglog => -(-eta.exp()).exp_m1(),
        };
        p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    /// Success and failure probabilities with their logs, the derivative of
    /// the inverse link and its second derivative.
    fn parts(self, eta: f64) -> LinkParts {
        match self {
            LinkFunction::Logit => {
                let p = 1.0 / (1.0 + (-eta).exp());
                let q = 1.0 / (1.0 + eta.exp());
                let f = p * q;
                LinkParts { p, q, ln_p: -softplus(-eta), ln_q: -softplus(eta), f, df: f * (q - p) }
            }
            LinkFunction::Probit => {
                let p = 0.5 * erfc(-eta * FRAC_1_SQRT_2);
                let q = 0.5 * erfc(eta * FRAC_1_SQRT_2);
                let f = (-0.5 * eta * eta).exp() / (2.0 * PI).sqrt();
                LinkParts { p, q, ln_p: p.max(PROB_CLAMP).ln(), ln_q: q.max(PROB_CLAMP).ln(), f, df: -eta * f }
            }
            LinkFunction::Cloglog => {
                let e = eta.exp();
                let q = (-e).exp();
                let p = -(-e).exp_m1();
                let f = e * q;
                LinkParts { p, q, ln_p: p.max(PROB_CLAMP).ln(), ln_q: (-e).max(PROB_CLAMP.ln()), f, df: f * (1.0 - e) }
            }
        }
    }
}

impl fmt::Display for LinkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkFunction::Logit => "logit",
            LinkFunction::Cloglog => "cloglog",
            LinkFunction::Probit => "probit",
        })
    }
}

impl FromStr for LinkFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" | "l" => Ok(LinkFunction::Logit),
            "cloglog" | "c" => Ok(LinkFunction::Cloglog),
            "probit" | "p" => Ok(LinkFunction::Probit),
            other => Err(Error::InvalidModel(format!("unknown link `{other}`"))),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy)]
struct LinkParts {
    p: f64,
    q: f64,
    ln_p: f64,
    ln_q: f64,
    f: f64,
    df: f64,
}

/// How one design column is derived from a raw covariate.
///
/// `name` is either a column of the dataset or `col^2`, the square of the
/// centered column. Every column is then standardized with the training
/// mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnTransform {
    pub name: String,
    pub source: String,
    pub squared: bool,
    pub source_mean: f64,
    pub mean: f64,
    pub sd: f64,
}

impl ColumnTransform {
    fn raw(&self, x: f64) -> f64 {
        if self.squared {
            (x - self.source_mean).powi(2)
        } else {
            x
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (self.raw(x) - self.mean) / self.sd
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Intercept plus standardized covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub columns: Vec<ColumnTransform>,
}

impl Design {
    pub fn build(terms: &[String], data: &Dataset) -> Result<Self> {
        let n = data.n();
        let mut columns = Vec::with_capacity(terms.len());
        let mut x = DMatrix::from_element(n, terms.len() + 1, 1.0);
        for (j, term) in terms.iter().enumerate() {
            let (source, squared) = match term.strip_suffix("^2") {
                Some(s) => (s.to_string(), true),
                None => (term.clone(), false),
            };
            let raw = data.covariate(&source).ok_or_else(|| Error::MissingCovariate(source.clone()))?;
            let (source_mean, _) = mean_sd(&raw);
            let mut t = ColumnTransform { name: term.clone(), source, squared, source_mean, mean: 0.0, sd: 1.0 };
            let derived: Vec<f64> = raw.iter().map(|&v| t.raw(v)).collect();
            let (mean, sd) = mean_sd(&derived);
            if sd.is_nan() || sd <= 0.0 {
                return Err(Error::InvalidModel(format!("covariate `{term}` is constant")));
            }
            t.mean = mean;
            t.sd = sd;
            for i in 0..n {
                x[(i, j + 1)] = t.apply(raw[i]);
            }
            columns.push(t);
        }
        let d = x.ncols();
        if n < d || x.clone().svd(false, false).rank(1e-10 * n.max(1) as f64) < d {
            return Err(Error::InvalidModel(format!("design with columns {terms:?} is rank deficient")));
        }
        Ok(Self { x, columns })
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Design row for raw covariate values.
    pub fn row(&self, x_new: &BTreeMap<String, f64>) -> Result<DVector<f64>> {
        let mut r = DVector::from_element(self.dim(), 1.0);
        for (j, c) in self.columns.iter().enumerate() {
            let v = x_new.get(&c.source).ok_or_else(|| Error::MissingCovariate(c.source.clone()))?;
            r[j + 1] = c.apply(*v);
        }
        Ok(r)
    }
}

/// A single binomial regression: link, covariate terms, trials per
/// observation and an independent `N(0, prior_sd^2)` coefficient prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmModelSpec {
    pub link: LinkFunction,
    #[serde(default)]
    pub covariates: Vec<String>,
    pub trials: u64,
    #[serde(default = "default_prior_sd")]
    pub prior_sd: f64,
}

pub fn default_prior_sd() -> f64 {
    10.0
}

impl GlmModelSpec {
    pub fn new(link: LinkFunction, covariates: &[&str], trials: u64) -> Self {
        Self {
            link,
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            trials,
            prior_sd: default_prior_sd(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidModel("trials must be at least 1".into()));
        }
        if !(self.prior_sd.is_finite() && self.prior_sd > 0.0) {
            return Err(Error::InvalidModel("prior_sd must be positive".into()));
        }
        Ok(())
    }
}

/// A regression bound to its data.
#[derive(Debug, Clone)]
pub struct GlmProblem {
    pub spec: GlmModelSpec,
    pub design: Design,
    pub y: Vec<f64>,
    ln_binom: f64,
}

impl GlmProblem {
    pub fn new(spec: GlmModelSpec, data: &Dataset) -> Result<Self> {
        spec.validate()?;
        let m = spec.trials as f64;
        for &y in &data.responses {
            if y < 0.0 || y > m || y.fract() != 0.0 {
                return Err(Error::Data(format!("count {y} is not an integer in [0, {m}]")));
            }
        }
        let design = Design::build(&spec.covariates, data)?;
        let ln_binom =
            data.responses.iter().map(|&y| ln_gamma(m + 1.0) - ln_gamma(y + 1.0) - ln_gamma(m - y + 1.0)).sum();
        Ok(Self { spec, design, y: data.responses.clone(), ln_binom })
    }

    pub fn dim(&self) -> usize {
        self.design.dim()
    }

    fn ln_prior(&self, beta: &DVector<f64>) -> f64 {
        let s = self.spec.prior_sd;
        let d = beta.len() as f64;
        -0.5 * beta.norm_squared() / (s * s) - d * (s.ln() + 0.5 * (2.0 * PI).ln())
    }

    /// Log posterior (unnormalized: likelihood times prior) only.
    pub fn log_posterior_value(&self, beta: &DVector<f64>) -> f64 {
        let eta = &self.design.x * beta;
        let m = self.spec.trials as f64;
        let mut ll = self.ln_binom;
        for (i, &e) in eta.iter().enumerate() {
            let p = self.spec.link.parts(e);
            ll += self.y[i] * p.ln_p + (m - self.y[i]) * p.ln_q;
        }
        ll + self.ln_prior(beta)
    }

    /// Value, gradient and Hessian of the log posterior.
    pub fn log_posterior(&self, beta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let x = &self.design.x;
        let eta = x * beta;
        let m = self.spec.trials as f64;
        let d = beta.len();
        let s2 = self.spec.prior_sd * self.spec.prior_sd;
        let mut value = self.ln_binom;
        let mut d1 = DVector::zeros(eta.len());
        let mut d2 = DVector::zeros(eta.len());
        for (i, &e) in eta.iter().enumerate() {
            let lp = self.spec.link.parts(e);
            let y = self.y[i];
            value += y * lp.ln_p + (m - y) * lp.ln_q;
            let p = lp.p.max(PROB_CLAMP);
            let q = lp.q.max(PROB_CLAMP);
            let score = y / p - (m - y) / q;
            d1[i] = lp.f * score;
            d2[i] = lp.df * score - lp.f * lp.f * (y / (p * p) + (m - y) / (q * q));
        }
        value += self.ln_prior(beta);
        let grad = x.transpose() * &d1 - beta / s2;
        let mut hess = x.transpose() * DMatrix::from_diagonal(&d2) * x;
        for k in 0..d {
            hess[(k, k)] -= 1.0 / s2;
        }
        (value, grad, hess)
    }
}

/// Posterior mode and Gaussian approximation.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub mode: DVector<f64>,
    pub neg_hessian: DMatrix<f64>,
    pub log_marginal: f64,
    pub iterations: usize,
}

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 100;

/// Newton's method with step halving from zero, then
/// `log p(D|b) + log prior(b) + (d/2) log 2pi - (1/2) log det(-H)` at the mode.
pub fn laplace_fit(problem: &GlmProblem) -> Result<LaplaceFit> {
    let d = problem.dim();
    let mut beta = DVector::zeros(d);
    let (mut value, mut grad, mut hess) = problem.log_posterior(&beta);
    let mut iterations = 0;
    while grad.norm() >= NEWTON_TOL {
        if iterations == NEWTON_MAX_ITER {
            return Err(Error::NoConvergence { grad_norm: grad.norm(), iterations });
        }
        iterations += 1;
        let neg = -&hess;
        let step = match Cholesky::new(neg) {
            Some(ch) => ch.solve(&grad),
            None => grad.clone() * 1e-2,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta + &step * t;
            let v = problem.log_posterior_value(&cand);
            if v.is_finite() && v >= value - 1e-12 * value.abs() {
                beta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { grad_norm: grad.norm(), iterations });
        }
        (value, grad, hess) = problem.log_posterior(&beta);
    }
    let neg_hessian = -hess;
    let chol = Cholesky::new(neg_hessian.clone()).ok_or(Error::Saddle)?;
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let log_marginal = value + 0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * ln_det;
    Ok(LaplaceFit { mode: beta, neg_hessian, log_marginal, iterations })
}

pub fn laplace_log_marginal(problem: &GlmProblem) -> Result<f64> {
    Ok(laplace_fit(problem)?.log_marginal)
}

/// Random-walk Metropolis settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    /// Retained draws after burn-in.
    pub chain_length: usize,
    pub burn_in: usize,
    /// Proposal scale; `None` uses `2.38 / sqrt(d)`.
    pub step_scale: Option<f64>,
    pub seed: u64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self { chain_length: 4000, burn_in: 1000, step_scale: None, seed: 20_240_601 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub draws: Vec<DVector<f64>>,
    pub acceptance_rate: f64,
    pub seed: u64,
    pub warning: Option<String>,
}

impl PosteriorDraws {
    pub fn mean(&self) -> DVector<f64> {
        let d = self.draws[0].len();
        self.draws.iter().fold(DVector::zeros(d), |acc, b| acc + b) / self.draws.len() as f64
    }
}

/// Gaussian random walk started at the Laplace mode, with proposal
/// covariance `step_scale^2 (-H)^{-1}`.
pub fn rw_metropolis(problem: &GlmProblem, laplace: &LaplaceFit, settings: &McmcSettings) -> Result<PosteriorDraws> {
    let d = problem.dim();
    let scale = settings.step_scale.unwrap_or(2.38 / (d as f64).sqrt());
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument("step_scale must be positive".into()));
    }
    if settings.chain_length == 0 {
        return Err(Error::InvalidArgument("chain_length must be positive".into()));
    }
    let cov = Cholesky::new(laplace.neg_hessian.clone()).ok_or(Error::Saddle)?.inverse();
    let l = Cholesky::new(cov).ok_or(Error::Saddle)?.l() * scale;
    let mut r: ChaCha8Rng = rng::stream(settings.seed, &[]);
    let mut current = laplace.mode.clone();
    let mut current_lp = problem.log_posterior_value(&current);
    let mut accepted = 0usize;
    let total = settings.burn_in + settings.chain_length;
    let mut draws = Vec::with_capacity(settings.chain_length);
    for it in 0..total {
        let z = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        let cand = &current + &l * z;
        let lp = problem.log_posterior_value(&cand);
        let u: f64 = r.random();
        if lp.is_finite() && u.ln() < lp - current_lp {
            current = cand;
            current_lp = lp;
            accepted += 1;
        }
        if it >= settings.burn_in {
            draws.push(current.clone());
        }
    }
    let acceptance_rate = accepted as f64 / total as f64;
    let warning = (!(0.05..=0.95).contains(&acceptance_rate))
        .then(|| format!("acceptance rate {acceptance_rate:.3} outside [0.05, 0.95]"));
    Ok(PosteriorDraws { draws, acceptance_rate, seed: settings.seed, warning })
}

/// What the predictive moments describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PredictionTarget {
    /// The success probability at `x_new`.
    Probability,
    /// The number of successes in `trials` new trials at `x_new`.
    Count { trials: u64 },
}

/// Success probabilities at a design row, one per draw.
pub fn probabilities_at(link: LinkFunction, draws: &[DVector<f64>], row: &DVector<f64>) -> Vec<f64> {
    draws.iter().map(|b| link.inverse(row.dot(b))).collect()
}

/// Moments of the target over the empirical posterior given by the draws
/// (population divisor, so the draws are treated as the posterior itself).
pub fn moments_from_probabilities(ps: &[f64], target: PredictionTarget) -> (PredictiveMoments, ParameterSplit) {
    let n = ps.len() as f64;
    let point_mass = ps.windows(2).all(|w| w[0] == w[1]);
    let mean_p = if point_mass { ps[0] } else { ps.iter().sum::<f64>() / n };
    let var_p = ps.iter().map(|p| (p - mean_p).powi(2)).sum::<f64>() / n;
    match target {
        PredictionTarget::Probability => {
            (PredictiveMoments::new(mean_p, var_p), ParameterSplit { e_var: 0.0, var_e: var_p })
        }
        PredictionTarget::Count { trials } => {
            let m = trials as f64;
            let e_var = m * ps.iter().map(|p| p * (1.0 - p)).sum::<f64>() / n;
            let var_e = m * m * var_p;
            (PredictiveMoments::new(m * mean_p, e_var + var_e), ParameterSplit { e_var, var_e })
        }
    }
}

pub fn predictive_moments_at(
    problem: &GlmProblem,
    draws: &PosteriorDraws,
    x_new: &BTreeMap<String, f64>,
    target: PredictionTarget,
) -> Result<PredictiveMoments> {
    let row = problem.design.row(x_new)?;
    let ps = probabilities_at(problem.spec.link, &draws.draws, &row);
    Ok(moments_from_probabilities(&ps, target).0)
}

/// A regression cell of a hierarchy: fitted by Laplace for its weight and by
/// random-walk Metropolis for its predictive moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmCellSpec {
    #[serde(flatten)]
    pub model: GlmModelSpec,
    pub x_new: BTreeMap<String, f64>,
    pub target: PredictionTarget,
    #[serde(default)]
    pub mcmc: McmcSettings,
}

impl CellModel for GlmCellSpec {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn FittedCell>> {
        Ok(Box::new(GlmFit::fit(self, data)?))
    }
}

/// A fitted regression cell.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub problem: GlmProblem,
    pub laplace: LaplaceFit,
    pub acceptance_rate: f64,
    pub warning: Option<String>,
    pub probabilities: Vec<f64>,
    pub target: PredictionTarget,
    moments: PredictiveMoments,
    split: ParameterSplit,
}

impl GlmFit {
    pub fn fit(spec: &GlmCellSpec, data: &Dataset) -> Result<Self> {
        let problem = GlmProblem::new(spec.model.clone(), data)?;
        let laplace = laplace_fit(&problem)?;
        let draws = rw_metropolis(&problem, &laplace, &spec.mcmc)?;
        let row = problem.design.row(&spec.x_new)?;
        let probabilities = probabilities_at(problem.spec.link, &draws.draws, &row);
        let (moments, split) = moments_from_probabilities(&probabilities, spec.target);
        Ok(Self {
            problem,
            laplace,
            acceptance_rate: draws.acceptance_rate,
            warning: draws.warning,
            probabilities,
            target: spec.target,
            moments,
            split,
        })
    }
}

impl FittedCell for GlmFit {
    fn log_marginal(&self) -> f64 {
        self.laplace.log_marginal
    }

    fn moments(&self) -> PredictiveMoments {
        self.moments
    }

    fn parameter_split(&self) -> ParameterSplit {
        self.split
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> ConditionalDraw {
        let p = self.probabilities[uniform_index(rng, self.probabilities.len())];
        match self.target {
            PredictionTarget::Probability => ConditionalDraw::PointMass(p),
            PredictionTarget::Count { trials } => ConditionalDraw::Binomial { trials, p },
        }
    }
}
