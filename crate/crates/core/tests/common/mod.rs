#![allow(dead_code)]

pub mod quad;

use std::collections::HashSet;
use std::sync::Arc;

use ppv_core::backend::{CellModel, ConditionalDraw, FittedCell, ParameterSplit, PredictiveMoments};
use ppv_core::cscope::DecompositionPlan;
use ppv_core::{Dataset, FactorAssignment, FactorSpec, FittedHierarchy, HierarchicalModel, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A cell with hand-set moments and log marginal likelihood.
#[derive(Debug, Clone, Copy)]
pub struct FixedCell {
    pub mean: f64,
    pub var: f64,
    pub log_m: f64,
}

impl CellModel for FixedCell {
    fn fit(&self, _data: &Dataset) -> Result<Box<dyn FittedCell>> {
        Ok(Box::new(*self))
    }
}

impl FittedCell for FixedCell {
    fn log_marginal(&self) -> f64 {
        self.log_m
    }

    fn moments(&self) -> PredictiveMoments {
        PredictiveMoments::new(self.mean, self.var)
    }

    fn parameter_split(&self) -> ParameterSplit {
        ParameterSplit { e_var: self.var, var_e: 0.0 }
    }

    fn draw(&self, _rng: &mut ChaCha8Rng) -> ConditionalDraw {
        ConditionalDraw::Normal { mean: self.mean, variance: self.var }
    }
}

pub fn fixed(mean: f64, var: f64, log_m: f64) -> Arc<dyn CellModel> {
    Arc::new(FixedCell { mean, var, log_m })
}

/// `V1 in {a, b}` uniform, `Y | a ~ Bernoulli(pa)`, `Y | b ~ Bernoulli(pb)`, no data.
pub fn bernoulli_toy(pa: f64, pb: f64) -> FittedHierarchy {
    let cells: Vec<Arc<dyn CellModel>> = vec![
        Arc::new(ppv_core::conjugate::BernoulliFixedSpec::new(pa).unwrap()),
        Arc::new(ppv_core::conjugate::BernoulliFixedSpec::new(pb).unwrap()),
    ];
    let model = HierarchicalModel::new(vec![FactorSpec::uniform("V1", &["a", "b"])], None, cells).unwrap();
    FittedHierarchy::fit(model, &Dataset::new(vec![]), ppv_core::ExecMode::Sequential).unwrap()
}

fn random_row(rng: &mut ChaCha8Rng, len: usize, allow_zero: bool) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..len)
            .map(|_| if allow_zero && rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.05..1.0) })
            .collect();
        let z: f64 = raw.iter().sum();
        if z > 0.0 {
            return raw.iter().map(|w| w / z).collect();
        }
    }
}

/// A random discrete hierarchy with `k` factors of 1 to 3 levels, a
/// conditional prior on every factor after the first (zeros allowed) and
/// hand-set cells.
pub fn random_discrete(rng: &mut ChaCha8Rng, k: usize) -> FittedHierarchy {
    let dims: Vec<usize> = (0..k).map(|_| rng.random_range(1..=3)).collect();
    let mut factors = Vec::with_capacity(k);
    let mut earlier = 1;
    for (i, &d) in dims.iter().enumerate() {
        let names: Vec<String> = (0..d).map(|l| format!("l{l}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let rows = if i == 0 {
            vec![random_row(rng, d, false)]
        } else {
            (0..earlier).map(|_| random_row(rng, d, true)).collect()
        };
        factors.push(FactorSpec::conditional(format!("V{}", i + 1), &refs, rows));
        earlier *= d;
    }
    let cells = (0..earlier)
        .map(|_| fixed(rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0), rng.random_range(-5.0..0.0)))
        .collect();
    let model = HierarchicalModel::new(factors, None, cells).unwrap();
    FittedHierarchy::fit(model, &Dataset::new(vec![]), ppv_core::ExecMode::Sequential).unwrap()
}

/// Every assignment of the listed factors, as factor-level pairs.
pub fn assignments(dims: &[usize], factors: &[usize]) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new()];
    for &f in factors {
        let mut next = Vec::new();
        for a in &out {
            for l in 0..dims[f] {
                let mut b = a.clone();
                b.push((f, l));
                next.push(b);
            }
        }
        out = next;
    }
    out
}

/// Plan terms by direct enumeration of prefix assignments through
/// `conditional_moments`, in engine order (leading, then blocks m..1).
pub fn brute_force_terms(fitted: &FittedHierarchy, plan: &DecompositionPlan) -> Vec<f64> {
    let dims = fitted.model().grid().dims().to_vec();
    let post = fitted.posterior();
    let mass = |a: &[(usize, usize)]| post.mass(&FactorAssignment::from_pairs(a.iter().copied()));
    let cond =
        |a: &[(usize, usize)]| fitted.conditional_moments(&FactorAssignment::from_pairs(a.iter().copied())).unwrap();
    let blocks = plan.blocks();
    let mut prefix: Vec<usize> = Vec::new();
    let mut block_terms = Vec::new();
    for b in blocks {
        let bf: Vec<usize> = b.iter().copied().collect();
        let mut term = 0.0;
        for a in assignments(&dims, &prefix) {
            let wa = mass(&a);
            if wa <= 0.0 {
                continue;
            }
            let mean_a = cond(&a).mean;
            for c in assignments(&dims, &bf) {
                let mut ac = a.clone();
                ac.extend(c);
                let w = mass(&ac);
                if w > 0.0 {
                    term += w * (cond(&ac).mean - mean_a).powi(2);
                }
            }
        }
        block_terms.push(term);
        prefix.extend(bf);
    }
    let mut leading = 0.0;
    for a in assignments(&dims, &prefix) {
        let w = mass(&a);
        if w > 0.0 {
            leading += w * cond(&a).variance;
        }
    }
    let mut out = vec![leading];
    out.extend(block_terms.into_iter().rev());
    out
}

/// Variance of the full mixture by a direct double sum over cells.
pub fn brute_force_total(fitted: &FittedHierarchy) -> f64 {
    let w = fitted.posterior().weights();
    let mean: f64 = fitted.cells().iter().zip(w).map(|(c, wi)| wi * c.moments().mean).sum();
    fitted
        .cells()
        .iter()
        .zip(w)
        .map(|(c, wi)| {
            let m = c.moments();
            wi * (m.variance + (m.mean - mean).powi(2))
        })
        .sum()
}

/// Every map from factors to {latent, block 1..j} whose block labels are
/// onto 1..j for some j >= 1, as block lists.
pub fn brute_force_plans(k: usize) -> HashSet<Vec<Vec<usize>>> {
    let mut out = HashSet::new();
    let total = (k + 1).pow(k as u32);
    for code in 0..total {
        let mut c = code;
        let labels: Vec<usize> = (0..k)
            .map(|_| {
                let l = c % (k + 1);
                c /= k + 1;
                l
            })
            .collect();
        let j = *labels.iter().max().unwrap();
        if j == 0 || !(1..=j).all(|b| labels.contains(&b)) {
            continue;
        }
        let blocks: Vec<Vec<usize>> = (1..=j).map(|b| (0..k).filter(|&f| labels[f] == b).collect()).collect();
        out.insert(blocks);
    }
    out
}
