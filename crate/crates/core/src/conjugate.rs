//! Closed-form backends: Normal with known variance, Normal–inverse-gamma,
//! Beta-Binomial, and a fixed-probability Bernoulli.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::backend::{CellModel, ConditionalDraw, FittedCell, ParameterSplit, PredictiveMoments};
use crate::error::{Error, Result};
use crate::hierarchy::Dataset;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!("{name} must be finite and positive, got {v}")))
    }
}

/// `Y_i ~ N(theta, sigma^2)` with `theta ~ N(theta0, tau0^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalKnownVarSpec {
    pub sigma: f64,
    #[serde(default)]
    pub theta0: f64,
    pub tau0: f64,
}

impl NormalKnownVarSpec {
    pub fn new(sigma: f64, theta0: f64, tau0: f64) -> Result<Self> {
        let s = Self { sigma, theta0, tau0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        positive("sigma", self.sigma)?;
        positive("tau0", self.tau0)?;
        if !self.theta0.is_finite() {
            return Err(Error::InvalidModel("theta0 must be finite".into()));
        }
        Ok(())
    }
}

/// Posterior mean and variance of `theta`.
///
/// The posterior mean is the precision-weighted combination
/// `tau_n^2 (n ybar / sigma^2 + theta0 / tau0^2)`.
pub fn nn_posterior_params(spec: &NormalKnownVarSpec, data: &Dataset) -> (f64, f64) {
    let n = data.n() as f64;
    let s2 = spec.sigma * spec.sigma;
    let t2 = spec.tau0 * spec.tau0;
    let tau_n2 = 1.0 / (n / s2 + 1.0 / t2);
    let sum: f64 = data.responses.iter().sum();
    let theta_n = tau_n2 * (sum / s2 + spec.theta0 / t2);
    (theta_n, tau_n2)
}

/// `(E Var, Var E)` over `theta`: `(sigma^2, tau_n^2)`.
pub fn nn_decomposition(spec: &NormalKnownVarSpec, data: &Dataset) -> (f64, f64) {
    let (_, tau_n2) = nn_posterior_params(spec, data);
    (spec.sigma * spec.sigma, tau_n2)
}

/// Log marginal density of the responses under the Normal–Normal model.
pub fn nn_log_marginal(spec: &NormalKnownVarSpec, data: &Dataset) -> f64 {
    let n = data.n() as f64;
    if data.n() == 0 {
        return 0.0;
    }
    let s2 = spec.sigma * spec.sigma;
    let t2 = spec.tau0 * spec.tau0;
    let ybar = data.mean();
    let ss: f64 = data.responses.iter().map(|y| (y - ybar) * (y - ybar)).sum();
    -0.5 * n * (LN_2PI + s2.ln())
        - 0.5 * (1.0 + n * t2 / s2).ln()
        - 0.5 * (ss / s2 + n * (ybar - spec.theta0).powi(2) / (s2 + n * t2))
}

impl CellModel for NormalKnownVarSpec {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn FittedCell>> {
        self.validate()?;
        let (theta_n, tau_n2) = nn_posterior_params(self, data);
        Ok(Box::new(NormalKnownVarFit {
            sigma2: self.sigma * self.sigma,
            theta_n,
            tau_n2,
            log_marginal: nn_log_marginal(self, data),
        }))
    }
}

#[derive(Debug, Clone)]
struct NormalKnownVarFit {
    sigma2: f64,
    theta_n: f64,
    tau_n2: f64,
    log_marginal: f64,
}

impl FittedCell for NormalKnownVarFit {
    fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    fn moments(&self) -> PredictiveMoments {
        PredictiveMoments::new(self.theta_n, self.sigma2 + self.tau_n2)
    }

    fn parameter_split(&self) -> ParameterSplit {
        ParameterSplit { e_var: self.sigma2, var_e: self.tau_n2 }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> ConditionalDraw {
        let theta = Normal::new(self.theta_n, self.tau_n2.sqrt()).expect("finite").sample(rng);
        ConditionalDraw::Normal { mean: theta, variance: self.sigma2 }
    }
}

/// `Y_i ~ N(mu, s2)`, `mu | s2 ~ N(mu0, s2 / kappa0)`, `s2 ~ InvGamma(alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalInvGammaSpec {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub mu0: f64,
    #[serde(default = "one")]
    pub kappa0: f64,
}

fn one() -> f64 {
    1.0
}

impl NormalInvGammaSpec {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let s = Self { alpha, beta, mu0: 0.0, kappa0: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 2.0) {
            return Err(Error::InvalidModel(format!("alpha must exceed 2, got {}", self.alpha)));
        }
        positive("beta", self.beta)?;
        positive("kappa0", self.kappa0)?;
        if !self.mu0.is_finite() {
            return Err(Error::InvalidModel("mu0 must be finite".into()));
        }
        Ok(())
    }

    /// Updated `(mu_n, kappa_n, alpha_n, beta_n)`.
    pub fn posterior(&self, data: &Dataset) -> (f64, f64, f64, f64) {
        let n = data.n() as f64;
        let ybar = data.mean();
        let ss: f64 = data.responses.iter().map(|y| (y - ybar) * (y - ybar)).sum();
        let kappa_n = self.kappa0 + n;
        let mu_n = (self.kappa0 * self.mu0 + n * ybar) / kappa_n;
        let alpha_n = self.alpha + 0.5 * n;
        let beta_n = self.beta + 0.5 * ss + self.kappa0 * n * (ybar - self.mu0).powi(2) / (2.0 * kappa_n);
        (mu_n, kappa_n, alpha_n, beta_n)
    }
}

/// Student-t posterior predictive mean and variance.
pub fn nig_predictive_moments(spec: &NormalInvGammaSpec, data: &Dataset) -> PredictiveMoments {
    let split = nig_split(spec, data);
    let (mu_n, ..) = spec.posterior(data);
    PredictiveMoments::new(mu_n, split.total())
}

fn nig_split(spec: &NormalInvGammaSpec, data: &Dataset) -> ParameterSplit {
    let (_, kappa_n, alpha_n, beta_n) = spec.posterior(data);
    // alpha > 2 keeps alpha_n - 1 > 1.
    assert!(alpha_n > 2.0, "posterior shape must exceed 2");
    let e_s2 = beta_n / (alpha_n - 1.0);
    ParameterSplit { e_var: e_s2, var_e: e_s2 / kappa_n }
}

pub fn nig_log_marginal(spec: &NormalInvGammaSpec, data: &Dataset) -> f64 {
    let n = data.n() as f64;
    let (_, kappa_n, alpha_n, beta_n) = spec.posterior(data);
    ln_gamma(alpha_n) - ln_gamma(spec.alpha) + spec.alpha * spec.beta.ln() - alpha_n * beta_n.ln()
        + 0.5 * (spec.kappa0.ln() - kappa_n.ln())
        - 0.5 * n * LN_2PI
}

impl CellModel for NormalInvGammaSpec {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn FittedCell>> {
        self.validate()?;
        let (mu_n, kappa_n, alpha_n, beta_n) = self.posterior(data);
        Ok(Box::new(NormalInvGammaFit {
            mu_n,
            kappa_n,
            alpha_n,
            beta_n,
            split: nig_split(self, data),
            log_marginal: nig_log_marginal(self, data),
        }))
    }
}

#[derive(Debug, Clone)]
struct NormalInvGammaFit {
    mu_n: f64,
    kappa_n: f64,
    alpha_n: f64,
    beta_n: f64,
    split: ParameterSplit,
    log_marginal: f64,
}

impl FittedCell for NormalInvGammaFit {
    fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    fn moments(&self) -> PredictiveMoments {
        PredictiveMoments::new(self.mu_n, self.split.total())
    }

    fn parameter_split(&self) -> ParameterSplit {
        self.split
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> ConditionalDraw {
        let precision = Gamma::new(self.alpha_n, 1.0 / self.beta_n).expect("valid gamma").sample(rng);
        let s2 = 1.0 / precision;
        let mu = Normal::new(self.mu_n, (s2 / self.kappa_n).sqrt()).expect("finite").sample(rng);
        ConditionalDraw::Normal { mean: mu, variance: s2 }
    }
}

/// `Y ~ Binomial(trials, p)` with `p ~ Beta(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaBinomialSpec {
    pub trials: u64,
    pub a: f64,
    pub b: f64,
}

impl BetaBinomialSpec {
    pub fn new(trials: u64, a: f64, b: f64) -> Result<Self> {
        let s = Self { trials, a, b };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidModel("trials must be at least 1".into()));
        }
        positive("a", self.a)?;
        positive("b", self.b)
    }

    /// Beta posterior after observing counts out of `trials` each.
    pub fn updated(&self, data: &Dataset) -> Result<Self> {
        let m = self.trials as f64;
        let mut s = 0.0;
        for &y in &data.responses {
            if y < 0.0 || y > m || y.fract() != 0.0 {
                return Err(Error::Data(format!("count {y} is not an integer in [0, {m}]")));
            }
            s += y;
        }
        let n = data.n() as f64;
        Ok(Self { trials: self.trials, a: self.a + s, b: self.b + n * m - s })
    }

    pub fn log_marginal(&self, data: &Dataset) -> Result<f64> {
        let post = self.updated(data)?;
        let m = self.trials as f64;
        let binoms: f64 = data.responses.iter().map(|&y| ln_choose(m, y)).sum();
        Ok(binoms + ln_beta(post.a, post.b) - ln_beta(self.a, self.b))
    }
}

/// Beta-Binomial split of the predictive variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaBinomialDecomposition {
    /// `m E[p(1-p)]`
    pub e_var: f64,
    /// `m^2 Var(p)`
    pub var_e: f64,
    pub var_e_dominates: bool,
}

pub fn beta_binomial_decomposition(spec: &BetaBinomialSpec) -> BetaBinomialDecomposition {
    let m = spec.trials as f64;
    let (a, b) = (spec.a, spec.b);
    let s = a + b;
    let e_var = m * a * b / (s * (s + 1.0));
    let var_e = m * m * a * b / (s * s * (s + 1.0));
    BetaBinomialDecomposition { e_var, var_e, var_e_dominates: var_e > e_var }
}

impl CellModel for BetaBinomialSpec {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn FittedCell>> {
        self.validate()?;
        Ok(Box::new(BetaBinomialFit { post: self.updated(data)?, log_marginal: self.log_marginal(data)? }))
    }
}

#[derive(Debug, Clone)]
struct BetaBinomialFit {
    post: BetaBinomialSpec,
    log_marginal: f64,
}

impl FittedCell for BetaBinomialFit {
    fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    fn moments(&self) -> PredictiveMoments {
        let d = beta_binomial_decomposition(&self.post);
        let mean = self.post.trials as f64 * self.post.a / (self.post.a + self.post.b);
        PredictiveMoments::new(mean, d.e_var + d.var_e)
    }

    fn parameter_split(&self) -> ParameterSplit {
        let d = beta_binomial_decomposition(&self.post);
        ParameterSplit { e_var: d.e_var, var_e: d.var_e }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> ConditionalDraw {
        let p = Beta::new(self.post.a, self.post.b).expect("valid beta").sample(rng);
        ConditionalDraw::Binomial { trials: self.post.trials, p }
    }
}

/// `Y ~ Bernoulli(p)` with `p` known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliFixedSpec {
    pub p: f64,
}

impl BernoulliFixedSpec {
    pub fn new(p: f64) -> Result<Self> {
        let s = Self { p };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.p) {
            Ok(())
        } else {
            Err(Error::InvalidModel(format!("p must lie in [0, 1], got {}", self.p)))
        }
    }
}

impl CellModel for BernoulliFixedSpec {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn FittedCell>> {
        self.validate()?;
        let mut lm = 0.0;
        for &y in &data.responses {
            lm += if y == 1.0 {
                self.p.ln()
            } else if y == 0.0 {
                (1.0 - self.p).ln()
            } else {
                return Err(Error::Data(format!("Bernoulli response {y} is not 0 or 1")));
            };
        }
        Ok(Box::new(BernoulliFit { p: self.p, log_marginal: lm }))
    }
}

#[derive(Debug, Clone)]
struct BernoulliFit {
    p: f64,
    log_marginal: f64,
}

impl FittedCell for BernoulliFit {
    fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    fn moments(&self) -> PredictiveMoments {
        PredictiveMoments::new(self.p, self.p * (1.0 - self.p))
    }

    fn parameter_split(&self) -> ParameterSplit {
        ParameterSplit { e_var: self.p * (1.0 - self.p), var_e: 0.0 }
    }

    fn draw(&self, _rng: &mut ChaCha8Rng) -> ConditionalDraw {
        ConditionalDraw::Binomial { trials: 1, p: self.p }
    }
}
