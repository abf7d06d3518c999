mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use ppv_core::conjugate::{beta_binomial_decomposition, BetaBinomialSpec};
use ppv_core::glm::{
    laplace_fit, laplace_log_marginal, moments_from_probabilities, predictive_moments_at, rw_metropolis, GlmCellSpec,
    GlmFit, GlmModelSpec, GlmProblem, LinkFunction, McmcSettings, PosteriorDraws, PredictionTarget,
};
use ppv_core::{
    decompose_mc, CellModel, Dataset, DecompositionPlan, ExecMode, FactorSpec, FittedHierarchy, HierarchicalModel,
    McBudget,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::quad::{inv_link, posterior_sd, quadrature};
use statrs::distribution::{Beta, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

fn random_data(rng: &mut ChaCha8Rng, n: usize, trials: u64, covariates: usize) -> Dataset {
    let names: Vec<String> = (0..covariates).map(|j| format!("x{j}")).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..covariates).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ys = rows
        .iter()
        .map(|r| {
            let eta = 0.3 + r.iter().map(|v| 0.6 * v).sum::<f64>();
            let p = 1.0 / (1.0 + (-eta).exp());
            (0..trials).filter(|_| rng.random_bool(p)).count() as f64
        })
        .collect();
    Dataset::with_covariates(ys, names, rows).unwrap()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn derivatives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for link in LinkFunction::ALL {
        let mut worst: f64 = 0.0;
        for case in 0..50 {
            let covs = case % 3;
            let (n, trials) = (rng.random_range(8..30), rng.random_range(1..10));
            let data = random_data(&mut rng, n, trials, covs);
            let names: Vec<String> = (0..covs).map(|j| format!("x{j}")).collect();
            let spec = GlmModelSpec {
                link,
                covariates: names,
                trials: data.responses.iter().fold(1.0f64, |m, v| m.max(*v)) as u64 + rng.random_range(0..3),
                prior_sd: rng.random_range(1.0..20.0),
            };
            let p = GlmProblem::new(spec, &data).unwrap();
            let d = p.dim();
            let beta = DVector::from_fn(d, |_, _| rng.random_range(-0.8..0.8));
            let (_, grad, hess) = p.log_posterior(&beta);
            let h = 1e-5;
            let mut fd_grad = vec![0.0; d];
            let mut fd_hess = vec![0.0; d * d];
            for k in 0..d {
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[k] += h;
                dn[k] -= h;
                fd_grad[k] = (p.log_posterior_value(&up) - p.log_posterior_value(&dn)) / (2.0 * h);
                let (gu, gd) = (p.log_posterior(&up).1, p.log_posterior(&dn).1);
                for j in 0..d {
                    fd_hess[j * d + k] = (gu[j] - gd[j]) / (2.0 * h);
                }
            }
            let analytic_hess: Vec<f64> = (0..d * d).map(|i| hess[(i / d, i % d)]).collect();
            worst = worst.max(max_rel(grad.as_slice(), &fd_grad)).max(max_rel(&analytic_hess, &fd_hess));
        }
        assert!(worst < 1e-5, "{link}: {worst}");
    }
}

#[test]
fn all_failure_intercept_gradient() {
    let data = Dataset::new(vec![6.0; 12]);
    let p = GlmProblem::new(GlmModelSpec::new(LinkFunction::Logit, &[], 6), &data).unwrap();
    let beta = DVector::from_element(1, 1.7);
    let (_, g, _) = p.log_posterior(&beta);
    let h = 1e-6;
    let fd = (p.log_posterior_value(&DVector::from_element(1, 1.7 + h))
        - p.log_posterior_value(&DVector::from_element(1, 1.7 - h)))
        / (2.0 * h);
    assert!((g[0] - fd).abs() <= 1e-6 * g[0].abs());
}

#[test]
fn laplace_matches_quadrature_on_small_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let balanced = Dataset::new(vec![3.0; 60]);
    let intercept = GlmProblem::new(GlmModelSpec::new(LinkFunction::Logit, &[], 6), &balanced).unwrap();
    let lap = laplace_fit(&intercept).unwrap();
    let (quad, _) = quadrature(&intercept, &lap.mode, &posterior_sd(&lap.neg_hessian), |_| 1.0);
    assert!((lap.log_marginal - quad).abs() < 1e-3, "{} vs {quad}", lap.log_marginal);

    for link in LinkFunction::ALL {
        for covs in [0usize, 1] {
            let data = random_data(&mut rng, 25, 6, covs);
            let names: Vec<&str> = if covs == 1 { vec!["x0"] } else { vec![] };
            let p = GlmProblem::new(GlmModelSpec::new(link, &names, 6), &data).unwrap();
            let lap = laplace_fit(&p).unwrap();
            let (quad, _) = quadrature(&p, &lap.mode, &posterior_sd(&lap.neg_hessian), |_| 1.0);
            assert!((lap.log_marginal - quad).abs() < 1e-2, "{link} {covs}: {} vs {quad}", lap.log_marginal);
        }
    }
}

#[test]
fn two_coefficient_laplace_within_five_thousandths() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = random_data(&mut rng, 80, 6, 1);
    let p = GlmProblem::new(GlmModelSpec::new(LinkFunction::Logit, &["x0"], 6), &data).unwrap();
    let lap = laplace_fit(&p).unwrap();
    let (quad, _) = quadrature(&p, &lap.mode, &posterior_sd(&lap.neg_hessian), |_| 1.0);
    assert!((lap.log_marginal - quad).abs() < 5e-3, "{} vs {quad}", lap.log_marginal);
}

#[test]
fn tight_prior_collapses_to_likelihood_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = random_data(&mut rng, 20, 6, 1);
    let mut spec = GlmModelSpec::new(LinkFunction::Probit, &["x0"], 6);
    spec.prior_sd = 1e-3;
    let p = GlmProblem::new(spec, &data).unwrap();
    let lm = laplace_log_marginal(&p).unwrap();
    let ll: f64 =
        data.responses.iter().map(|y| ln_gamma(7.0) - ln_gamma(y + 1.0) - ln_gamma(7.0 - y) - 6.0 * 2f64.ln()).sum();
    assert!((lm - ll).abs() < 1e-2, "{lm} vs {ll}");
}

/// Batch-means standard error of the first coordinate's chain mean.
fn batch_se(draws: &PosteriorDraws, k: usize) -> f64 {
    let xs: Vec<f64> = draws.draws.iter().map(|b| b[k]).collect();
    let batches = 40;
    let size = xs.len() / batches;
    let means: Vec<f64> =
        (0..batches).map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

#[test]
fn metropolis_mean_matches_grid() {
    let data = Dataset::new(vec![1.0, 0.0, 2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 2.0]);
    let p = GlmProblem::new(GlmModelSpec::new(LinkFunction::Cloglog, &[], 6), &data).unwrap();
    let lap = laplace_fit(&p).unwrap();
    let (_, grid_mean) = quadrature(&p, &lap.mode, &posterior_sd(&lap.neg_hessian), |b| b[0]);
    let settings = McmcSettings { chain_length: 20_000, burn_in: 1000, step_scale: None, seed: 5 };
    let draws = rw_metropolis(&p, &lap, &settings).unwrap();
    assert_eq!(draws.draws.len(), 20_000);
    assert!(draws.acceptance_rate > 0.05 && draws.acceptance_rate < 0.95);
    assert!(draws.warning.is_none());
    let mean = draws.mean()[0];
    assert!((mean - grid_mean).abs() < 3.0 * batch_se(&draws, 0), "{mean} vs {grid_mean}");
}

#[test]
fn symmetric_data_centres_the_slope() {
    let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
    let ys = [3.0, 2.0, 4.0, 4.0, 2.0, 3.0];
    let data = Dataset::with_covariates(ys.to_vec(), vec!["x".into()], xs.iter().map(|v| vec![*v]).collect()).unwrap();
    let p = GlmProblem::new(GlmModelSpec::new(LinkFunction::Logit, &["x"], 6), &data).unwrap();
    let lap = laplace_fit(&p).unwrap();
    let draws =
        rw_metropolis(&p, &lap, &McmcSettings { chain_length: 20_000, burn_in: 1000, step_scale: None, seed: 9 })
            .unwrap();
    assert!(draws.mean()[1].abs() < 3.0 * batch_se(&draws, 1));
}

#[test]
fn chains_with_different_seeds_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let data = random_data(&mut rng, 30, 6, 1);
    let p = GlmProblem::new(GlmModelSpec::new(LinkFunction::Probit, &["x0"], 6), &data).unwrap();
    let lap = laplace_fit(&p).unwrap();
    let run = |seed| {
        rw_metropolis(&p, &lap, &McmcSettings { chain_length: 20_000, burn_in: 1000, step_scale: None, seed }).unwrap()
    };
    let (a, b) = (run(1), run(2));
    for k in 0..2 {
        let se = (batch_se(&a, k).powi(2) + batch_se(&b, k).powi(2)).sqrt();
        assert!((a.mean()[k] - b.mean()[k]).abs() < 4.0 * se);
    }
    assert_eq!(run(1), a);
}

#[test]
fn extreme_step_scale_warns() {
    let data = Dataset::new(vec![1.0, 2.0, 3.0]);
    let p = GlmProblem::new(GlmModelSpec::new(LinkFunction::Logit, &[], 6), &data).unwrap();
    let lap = laplace_fit(&p).unwrap();
    let draws =
        rw_metropolis(&p, &lap, &McmcSettings { chain_length: 2000, burn_in: 0, step_scale: Some(60.0), seed: 1 })
            .unwrap();
    assert!(draws.warning.is_some(), "rate {}", draws.acceptance_rate);
    let bad = McmcSettings { step_scale: Some(0.0), ..Default::default() };
    assert!(rw_metropolis(&p, &lap, &bad).is_err());
}

#[test]
fn count_target_with_one_trial_is_bernoulli() {
    let ps = vec![0.35; 10];
    let (m, _) = moments_from_probabilities(&ps, PredictionTarget::Count { trials: 1 });
    assert!((m.mean - 0.35).abs() < 1e-15);
    assert!((m.variance - 0.35 * 0.65).abs() < 1e-15);
}

#[test]
fn beta_probability_draws_reproduce_beta_binomial() {
    let (a, b) = (2.0, 5.0);
    let beta = Beta::new(a, b).unwrap();
    let n = 200_000;
    let ps: Vec<f64> = (0..n).map(|i| beta.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
    let (_, split) = moments_from_probabilities(&ps, PredictionTarget::Count { trials: 30 });
    let closed = beta_binomial_decomposition(&BetaBinomialSpec::new(30, a, b).unwrap());
    assert!((split.e_var - closed.e_var).abs() < 1e-4 * closed.e_var, "{} vs {}", split.e_var, closed.e_var);
    assert!((split.var_e - closed.var_e).abs() < 1e-4 * closed.var_e, "{} vs {}", split.var_e, closed.var_e);
}

#[test]
fn predictive_moments_need_every_covariate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = random_data(&mut rng, 15, 6, 2);
    let p = GlmProblem::new(GlmModelSpec::new(LinkFunction::Logit, &["x0", "x1^2"], 6), &data).unwrap();
    let lap = laplace_fit(&p).unwrap();
    let draws = rw_metropolis(&p, &lap, &McmcSettings { chain_length: 500, ..Default::default() }).unwrap();
    let partial: BTreeMap<String, f64> = [("x0".to_string(), 0.5)].into();
    assert!(predictive_moments_at(&p, &draws, &partial, PredictionTarget::Probability).is_err());
    let full: BTreeMap<String, f64> = [("x0".to_string(), 0.5), ("x1".to_string(), -1.0)].into();
    let m = predictive_moments_at(&p, &draws, &full, PredictionTarget::Probability).unwrap();
    assert!(m.mean > 0.0 && m.mean < 1.0 && m.variance > 0.0);
}

#[test]
fn mc_engine_tracks_quadrature_for_two_links() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = random_data(&mut rng, 20, 6, 1);
    let x_new: BTreeMap<String, f64> = [("x0".to_string(), 1.8)].into();
    let links = [LinkFunction::Logit, LinkFunction::Cloglog];
    let mcmc = McmcSettings { chain_length: 40_000, burn_in: 2000, step_scale: None, seed: 17 };

    let mut log_m = Vec::new();
    let mut moments = Vec::new();
    for link in links {
        let p = GlmProblem::new(GlmModelSpec::new(link, &["x0"], 6), &data).unwrap();
        let lap = laplace_fit(&p).unwrap();
        let row = p.design.row(&x_new).unwrap();
        let sd = posterior_sd(&lap.neg_hessian);
        let pr = |b: &[f64]| inv_link(link, row[0] * b[0] + row[1] * b[1]);
        let (lm, mean) = quadrature(&p, &lap.mode, &sd, pr);
        let (_, second) = quadrature(&p, &lap.mode, &sd, |b| pr(b).powi(2));
        log_m.push(lm);
        moments.push((mean, second - mean * mean));
    }
    let top = log_m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let un: Vec<f64> = log_m.iter().map(|l| (l - top).exp()).collect();
    let w: Vec<f64> = un.iter().map(|u| u / un.iter().sum::<f64>()).collect();
    let mean: f64 = (0..2).map(|i| w[i] * moments[i].0).sum();
    let e_var: f64 = (0..2).map(|i| w[i] * moments[i].1).sum();
    let var_e: f64 = (0..2).map(|i| w[i] * (moments[i].0 - mean).powi(2)).sum();

    let cells: Vec<Arc<dyn CellModel>> = links
        .iter()
        .map(|&link| {
            Arc::new(GlmCellSpec {
                model: GlmModelSpec::new(link, &["x0"], 6),
                x_new: x_new.clone(),
                target: PredictionTarget::Probability,
                mcmc,
            }) as Arc<dyn CellModel>
        })
        .collect();
    let model = HierarchicalModel::new(vec![FactorSpec::uniform("link", &["L", "C"])], None, cells).unwrap();
    let f = FittedHierarchy::fit(model, &data, ExecMode::Parallel).unwrap();
    let r =
        decompose_mc(&f, &DecompositionPlan::parse("1", 1).unwrap(), McBudget::new(4096, 256), 8, ExecMode::Parallel)
            .unwrap();

    // The cells' moments carry chain error the engine SE does not see, so
    // recompute both terms per batch of the same chains and add that spread.
    let chains: Vec<Vec<f64>> = links
        .iter()
        .map(|&link| {
            GlmFit::fit(
                &GlmCellSpec {
                    model: GlmModelSpec::new(link, &["x0"], 6),
                    x_new: x_new.clone(),
                    target: PredictionTarget::Probability,
                    mcmc,
                },
                &data,
            )
            .unwrap()
            .probabilities
        })
        .collect();
    let batches = 40;
    let size = chains[0].len() / batches;
    let per_batch: Vec<[f64; 2]> = (0..batches)
        .map(|b| {
            let m: Vec<(f64, f64)> = chains
                .iter()
                .map(|c| {
                    let xs = &c[b * size..(b + 1) * size];
                    let mu = xs.iter().sum::<f64>() / size as f64;
                    (mu, xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / size as f64)
                })
                .collect();
            let mean: f64 = (0..2).map(|i| w[i] * m[i].0).sum();
            [(0..2).map(|i| w[i] * m[i].1).sum(), (0..2).map(|i| w[i] * (m[i].0 - mean).powi(2)).sum()]
        })
        .collect();
    for (k, (t, want)) in r.terms.iter().zip([e_var, var_e]).enumerate() {
        let avg = per_batch.iter().map(|v| v[k]).sum::<f64>() / batches as f64;
        let chain_var = per_batch.iter().map(|v| (v[k] - avg).powi(2)).sum::<f64>() / ((batches - 1) * batches) as f64;
        let se = (t.std_error.powi(2) + chain_var).sqrt();
        assert!((t.value - want).abs() <= 3.0 * se, "{}: {} ± {se} vs {want}", t.label.text, t.value);
    }
}
