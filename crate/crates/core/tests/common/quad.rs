use nalgebra::{DMatrix, DVector};
use ppv_core::glm::{GlmProblem, LinkFunction};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

pub fn inv_link(link: LinkFunction, eta: f64) -> f64 {
    match link {
        LinkFunction::Logit => 1.0 / (1.0 + (-eta).exp()),
        LinkFunction::Probit => 0.5 * erfc(-eta / std::f64::consts::SQRT_2),
        LinkFunction::Cloglog => -(-eta.exp()).exp_m1(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(ln p, ln(1 - p))` without cancellation in either tail.
pub fn log_probs(link: LinkFunction, eta: f64) -> (f64, f64) {
    match link {
        LinkFunction::Logit => (-softplus(-eta), -softplus(eta)),
        LinkFunction::Probit => {
            let z = eta / std::f64::consts::SQRT_2;
            ((0.5 * erfc(-z)).ln(), (0.5 * erfc(z)).ln())
        }
        LinkFunction::Cloglog => ((-(-eta.exp()).exp_m1()).ln(), -eta.exp()),
    }
}

/// Log joint density of data and coefficients, written independently of the
/// library from the problem's design matrix.
pub fn log_joint(p: &GlmProblem, beta: &[f64]) -> f64 {
    let x = &p.design.x;
    let m = p.spec.trials as f64;
    let mut s = 0.0;
    for i in 0..x.nrows() {
        let eta: f64 = (0..x.ncols()).map(|j| x[(i, j)] * beta[j]).sum();
        let (lp, lq) = log_probs(p.spec.link, eta);
        let y = p.y[i];
        s += ln_gamma(m + 1.0) - ln_gamma(y + 1.0) - ln_gamma(m - y + 1.0);
        if y > 0.0 {
            s += y * lp;
        }
        if y < m {
            s += (m - y) * lq;
        }
    }
    let sd = p.spec.prior_sd;
    for b in beta {
        s += -0.5 * (b / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    s
}

pub fn simpson_weights(n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| {
            if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        })
        .collect()
}

/// `log ∫ exp(log_joint) g` and posterior expectations of `g`, on a Simpson
/// grid spanning +-10 posterior sd around `center`.
pub fn quadrature<G: Fn(&[f64]) -> f64>(p: &GlmProblem, center: &DVector<f64>, sd: &[f64], g: G) -> (f64, f64) {
    let d = center.len();
    let n = if d == 1 { 4000 } else { 300 };
    let w = simpson_weights(n);
    let shift = log_joint(p, center.as_slice());
    let node = |k: usize, i: usize| center[k] - 10.0 * sd[k] + 20.0 * sd[k] * i as f64 / n as f64;
    let h: f64 = sd.iter().map(|s| 20.0 * s / n as f64 / 3.0).product();
    let (mut z, mut zg) = (0.0, 0.0);
    if d == 1 {
        for (i, wi) in w.iter().enumerate() {
            let b = [node(0, i)];
            let f = (log_joint(p, &b) - shift).exp() * wi;
            z += f;
            zg += f * g(&b);
        }
    } else {
        for i in 0..=n {
            for j in 0..=n {
                let b = [node(0, i), node(1, j)];
                let f = (log_joint(p, &b) - shift).exp() * w[i] * w[j];
                z += f;
                zg += f * g(&b);
            }
        }
    }
    ((z * h).ln() + shift, zg / z)
}

pub fn posterior_sd(neg_hessian: &DMatrix<f64>) -> Vec<f64> {
    let cov = neg_hessian.clone().try_inverse().unwrap();
    (0..cov.nrows()).map(|k| cov[(k, k)].sqrt()).collect()
}
