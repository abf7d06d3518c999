use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use serde::Serialize;
use serde_json::json;

use ppv_core::conjugate::{beta_binomial_decomposition, nn_decomposition, BetaBinomialSpec, NormalKnownVarSpec};
use ppv_core::engine::{result_rows, write_results_csv};
use ppv_core::experiments::bma::{default_bma, random_bma};
use ppv_core::experiments::{
    bma_equivalence_check, run_challenger, run_sweep, ChallengerConfig, ChallengerDataset, SweepConfig,
};
use ppv_core::modeldoc::load_model;
use ppv_core::{
    decompose_exact, decompose_mc, drop_term_report, enumerate_plans, term_labels, CellModel, Dataset,
    DecompositionPlan, DecompositionResult, ExecMode, FittedHierarchy, HierarchicalModel, McBudget,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::output::Run;
use crate::{display_path, Engine, Failure, Format, OutArgs, DEFAULT_SEED};

type CmdResult = std::result::Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn csv_bytes(results: &[DecompositionResult]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_results_csv(results, &mut buf)?;
    Ok(buf)
}

fn rows_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

fn print_result(r: &DecompositionResult, format: Format) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(r)?),
        Format::Csv => print!("{}", String::from_utf8(csv_bytes(std::slice::from_ref(r))?)?),
        Format::Text => {
            println!("plan {}  ({} engine)", r.plan, r.engine);
            for t in &r.terms {
                if t.std_error > 0.0 {
                    println!(
                        "  {:<40} {:>14.8} ± {:.2e}  {:>7.3}%",
                        t.label.text,
                        t.value,
                        t.std_error,
                        100.0 * t.proportion
                    );
                } else {
                    println!("  {:<40} {:>14.8}  {:>7.3}%", t.label.text, t.value, 100.0 * t.proportion);
                }
            }
            println!("  {:<40} {:>14.8}", "total", r.total);
        }
    }
    Ok(())
}

fn check_conservation(r: &DecompositionResult) -> CmdResult {
    if r.conserves() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!(
            "plan {}: terms sum to {} but the total is {} (residual {:.3e}, SE {:.3e})",
            r.plan,
            r.values().iter().sum::<f64>(),
            r.total,
            r.residual,
            r.residual_se
        )))
    }
}

#[derive(Serialize)]
struct PlanRow {
    index: usize,
    plan: String,
    blocks: Vec<Vec<usize>>,
    latent: Vec<usize>,
    terms: Vec<String>,
}

pub fn enumerate(k: usize, format: Format, out: &Path) -> CmdResult {
    let plans = enumerate_plans(k).map_err(usage)?;
    let rows = plans
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(PlanRow {
                index: i + 1,
                plan: p.to_string(),
                blocks: p.blocks().iter().map(|b| b.iter().map(|f| f + 1).collect()).collect(),
                latent: p.latent().iter().map(|f| f + 1).collect(),
                terms: term_labels(p)?.into_iter().map(|l| l.text).collect(),
            })
        })
        .collect::<ppv_core::Result<Vec<_>>>()
        .map_err(|e| Failure::Runtime(e.into()))?;
    let doc = json!({ "k": k, "count": rows.len(), "plans": rows });
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&doc).map_err(|e| Failure::Runtime(e.into()))?),
        Format::Csv | Format::Text => {
            println!("{}", rows.len());
            for r in &rows {
                println!("{}", r.plan);
            }
        }
    }
    let flat: Vec<_> = rows
        .iter()
        .map(|r| json!({ "index": r.index, "plan": r.plan, "latent": r.latent.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(" "), "terms": r.terms.join(" + ") }))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "plan", "latent", "terms"]).map_err(|e| Failure::Runtime(e.into()))?;
    for r in &flat {
        w.write_record([
            r["index"].to_string(),
            r["plan"].as_str().unwrap_or("").into(),
            r["latent"].as_str().unwrap_or("").into(),
            r["terms"].as_str().unwrap_or("").into(),
        ])
        .map_err(|e| Failure::Runtime(e.into()))?;
    }
    let csv = w.into_inner().map_err(|e| Failure::Runtime(anyhow::anyhow!("{e}")))?;
    let go = || -> Result<()> {
        let mut run = Run::start(out, "enumerate", None, vec![], json!({ "k": k }))?;
        run.write("plans.csv", &csv)?;
        run.write_json("plans.json", &doc)?;
        run.finish()?;
        Ok(())
    };
    go().map_err(Failure::Runtime)
}

#[derive(Debug, Args, Serialize)]
pub struct DecomposeArgs {
    /// Model document (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Data CSV with a `y` column; omit for a model without data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Plan text such as `1|2`, `1,2` or `2`.
    #[arg(long)]
    plan: String,
    #[arg(long, value_enum, default_value = "exact")]
    #[serde(skip)]
    engine: Engine,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo budget OUTERxINNER.
    #[arg(long, default_value = "1024x256")]
    budget: String,
    /// Format of the summary printed to stdout; files are always CSV and JSON.
    #[arg(long, value_enum, default_value = "text")]
    #[serde(skip)]
    format: Format,
    /// Terms below this share of the total are listed in the advisory report.
    #[arg(long, default_value_t = 0.01)]
    drop_threshold: f64,
    #[command(flatten)]
    #[serde(skip)]
    out: OutArgs,
}

pub fn decompose(args: DecomposeArgs) -> CmdResult {
    let model = load_model(&args.model)
        .with_context(|| format!("loading model {}", display_path(&args.model)))
        .map_err(usage)?;
    let data = match &args.data {
        Some(p) => {
            let file = std::fs::File::open(p).with_context(|| format!("opening {}", display_path(p))).map_err(usage)?;
            Dataset::from_csv(file).with_context(|| format!("reading {}", display_path(p))).map_err(usage)?
        }
        None => Dataset::new(vec![]),
    };
    let plan = DecompositionPlan::parse(&args.plan, model.factor_count()).context("parsing --plan").map_err(usage)?;
    let budget = McBudget::parse(&args.budget).context("parsing --budget").map_err(usage)?;
    let seed = args.seed.unwrap_or(DEFAULT_SEED);
    let fitted = FittedHierarchy::fit(model, &data, ExecMode::Parallel).context("fitting the model")?;
    let result = match args.engine {
        Engine::Exact => decompose_exact(&fitted, &plan),
        Engine::Mc => decompose_mc(&fitted, &plan, budget, seed, ExecMode::Parallel),
    }
    .map_err(anyhow::Error::from)?;
    let advisory = drop_term_report(&result, args.drop_threshold);
    print_result(&result, args.format).map_err(Failure::Runtime)?;
    if !advisory.is_empty() {
        for t in &advisory.flagged {
            eprintln!("note: {} is {:.3}% of the total", t.label, 100.0 * t.proportion);
            if let Some(s) = &t.suggestion {
                eprintln!("      {s}");
            }
        }
    }

    let mut inputs = vec![display_path(&args.model)];
    inputs.extend(args.data.as_deref().map(display_path));
    let mut config = serde_json::to_value(&args).map_err(|e| Failure::Runtime(e.into()))?;
    config["engine"] = json!(match args.engine {
        Engine::Exact => "exact",
        Engine::Mc => "mc",
    });
    let run_seed = (args.engine == Engine::Mc).then_some(seed);
    let go = || -> Result<()> {
        let mut run = Run::start(&args.out.out, "decompose", run_seed, inputs, config)?;
        run.write("results.csv", &csv_bytes(std::slice::from_ref(&result))?)?;
        run.write_json(
            "results.json",
            &json!({ "result": result, "rows": result_rows(&result), "advisory": advisory }),
        )?;
        run.finish()?;
        Ok(())
    };
    go().map_err(Failure::Runtime)?;
    check_conservation(&result)
}

#[derive(Debug, Subcommand)]
pub enum ExampleName {
    /// Normal mean with known variance and a Normal prior.
    NormalNormal {
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        theta0: f64,
        #[arg(long, default_value_t = 1.0)]
        tau0: f64,
        /// Number of observations.
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Their sample mean.
        #[arg(long, default_value_t = 0.0)]
        ybar: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Binomial count with a Beta prior on p, no data.
    BetaBinomial {
        #[arg(long, default_value_t = 30)]
        m: u64,
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        #[arg(long, default_value_t = 1.0)]
        b: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Shuttle O-ring failure probability at 31°F over 24 binomial models.
    Challenger {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        prior_sd: Option<f64>,
        #[arg(long)]
        chain_length: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Three decompositions of one model average that must share a total.
    BmaEquivalence {
        /// Use a random model average with this many components instead of the default pair.
        #[arg(long)]
        components: Option<usize>,
        /// Observations for the random model average.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn parameter_only(cell: std::sync::Arc<dyn CellModel>, name: &str) -> Result<HierarchicalModel> {
    Ok(HierarchicalModel::new(vec![], Some(name.into()), vec![cell])?)
}

pub fn example(name: ExampleName) -> CmdResult {
    match name {
        ExampleName::NormalNormal { sigma, theta0, tau0, n, ybar, out } => {
            let spec = NormalKnownVarSpec::new(sigma, theta0, tau0).map_err(usage)?;
            let data = Dataset::new(vec![ybar; n]);
            let model = parameter_only(std::sync::Arc::new(spec), "theta").map_err(Failure::Runtime)?;
            let fitted = FittedHierarchy::fit(model, &data, ExecMode::Parallel).map_err(anyhow::Error::from)?;
            let r = decompose_exact(&fitted, &DecompositionPlan::parse("1", 1).map_err(usage)?)
                .map_err(anyhow::Error::from)?;
            let closed = nn_decomposition(&spec, &data);
            print_result(&r, Format::Text).map_err(Failure::Runtime)?;
            let go = || -> Result<()> {
                let mut run = Run::start(
                    &out.out,
                    "example normal-normal",
                    None,
                    vec![],
                    json!({ "sigma": sigma, "theta0": theta0, "tau0": tau0, "n": n, "ybar": ybar }),
                )?;
                run.write("results.csv", &csv_bytes(std::slice::from_ref(&r))?)?;
                run.write_json(
                    "results.json",
                    &json!({ "result": r, "closed_form": { "e_var": closed.0, "var_e": closed.1 } }),
                )?;
                run.finish()?;
                Ok(())
            };
            go().map_err(Failure::Runtime)?;
            check_conservation(&r)
        }
        ExampleName::BetaBinomial { m, a, b, out } => {
            let spec = BetaBinomialSpec::new(m, a, b).map_err(usage)?;
            let closed = beta_binomial_decomposition(&spec);
            let model = parameter_only(std::sync::Arc::new(spec), "p").map_err(Failure::Runtime)?;
            let fitted =
                FittedHierarchy::fit(model, &Dataset::new(vec![]), ExecMode::Parallel).map_err(anyhow::Error::from)?;
            let r = decompose_exact(&fitted, &DecompositionPlan::parse("1", 1).map_err(usage)?)
                .map_err(anyhow::Error::from)?;
            print_result(&r, Format::Text).map_err(Failure::Runtime)?;
            println!("  Var-E term dominates: {}", closed.var_e_dominates);
            let go = || -> Result<()> {
                let mut run =
                    Run::start(&out.out, "example beta-binomial", None, vec![], json!({ "m": m, "a": a, "b": b }))?;
                run.write("results.csv", &csv_bytes(std::slice::from_ref(&r))?)?;
                run.write_json("results.json", &json!({ "result": r, "closed_form": closed }))?;
                run.finish()?;
                Ok(())
            };
            go().map_err(Failure::Runtime)?;
            check_conservation(&r)
        }
        ExampleName::Challenger { seed, prior_sd, chain_length, burn_in, out } => {
            let mut config = ChallengerConfig::default();
            config.seed = seed.unwrap_or(config.seed);
            config.prior_sd = prior_sd.unwrap_or(config.prior_sd);
            config.chain_length = chain_length.unwrap_or(config.chain_length);
            config.burn_in = burn_in.unwrap_or(config.burn_in);
            let report = run_challenger(&ChallengerDataset::bundled(), &config).map_err(anyhow::Error::from)?;
            print_result(&report.three_term, Format::Text).map_err(Failure::Runtime)?;
            print_result(&report.restricted, Format::Text).map_err(Failure::Runtime)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let go = || -> Result<()> {
                let mut run = Run::start(
                    &out.out,
                    "example challenger",
                    Some(config.seed),
                    vec!["bundled challenger.csv".into()],
                    serde_json::to_value(&config)?,
                )?;
                run.write("results.csv", &csv_bytes(&[report.three_term.clone(), report.restricted.clone()])?)?;
                run.write("models.csv", &rows_csv(&report.models)?)?;
                run.write("importance.csv", &rows_csv(&report.importance)?)?;
                run.write_json("results.json", &report)?;
                run.finish()?;
                Ok(())
            };
            go().map_err(Failure::Runtime)?;
            check_conservation(&report.three_term)?;
            check_conservation(&report.restricted)
        }
        ExampleName::BmaEquivalence { components, n, seed, out } => {
            let seed = seed.unwrap_or(DEFAULT_SEED);
            let (model, data) = match components {
                Some(k) => random_bma(&mut ChaCha8Rng::seed_from_u64(seed), k, n),
                None => default_bma(),
            }
            .map_err(usage)?;
            let fitted = FittedHierarchy::fit(model, &data, ExecMode::Parallel).map_err(anyhow::Error::from)?;
            let report = bma_equivalence_check(&fitted).map_err(anyhow::Error::from)?;
            for f in &report.forms {
                println!("{}: total {:.12}", f.name, f.sum_of_terms);
                print_result(&f.result, Format::Text).map_err(Failure::Runtime)?;
            }
            println!("direct mixture variance {:.12}", report.brute_force_total);
            let results: Vec<DecompositionResult> = report.forms.iter().map(|f| f.result.clone()).collect();
            let go = || -> Result<()> {
                let mut run = Run::start(
                    &out.out,
                    "example bma-equivalence",
                    components.map(|_| seed),
                    vec![],
                    json!({ "components": components, "n": n }),
                )?;
                run.write("results.csv", &csv_bytes(&results)?)?;
                run.write_json("results.json", &report)?;
                run.finish()?;
                Ok(())
            };
            go().map_err(Failure::Runtime)?;
            if report.agree {
                Ok(())
            } else {
                Err(Failure::Invariant(format!("forms disagree by {:.3e} relative", report.max_relative_gap)))
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep configuration (JSON); missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

pub fn sweep(args: SweepArgs) -> CmdResult {
    let mut config: SweepConfig = match &args.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", display_path(p))).map_err(usage)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", display_path(p))).map_err(usage)?
        }
        None => SweepConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate().map_err(usage)?;
    let report = run_sweep(&config).map_err(anyhow::Error::from)?;
    println!("n      predictions  models       links        total");
    for c in &report.curves {
        println!("{:<6} {:<12.6} {:<12.6} {:<12.6} {:.6}", c.n, c.values[0], c.values[1], c.values[2], c.total);
    }
    for f in &report.failures {
        eprintln!("replicate failed: {f}");
    }
    let go = || -> Result<()> {
        let mut run = Run::start(
            &args.out.out,
            "sweep",
            Some(config.seed),
            args.config.iter().map(|p| display_path(p)).collect(),
            serde_json::to_value(&config)?,
        )?;
        let mut rows = Vec::new();
        report.write_rows_csv(&mut rows)?;
        run.write("sweep_rows.csv", &rows)?;
        let mut abs = Vec::new();
        report.write_absolute_curves(&mut abs)?;
        run.write("curves_absolute.csv", &abs)?;
        let mut prop = Vec::new();
        report.write_proportion_curves(&mut prop)?;
        run.write("curves_proportion.csv", &prop)?;
        run.write_json(
            "results.json",
            &json!({ "curves": report.curves, "failures": report.failures, "attempted": report.attempted }),
        )?;
        run.finish()?;
        Ok(())
    };
    go().map_err(Failure::Runtime)?;
    if report.failure_fraction() > 0.1 {
        return Err(Failure::Invariant(format!("{} of {} replicates failed", report.failures.len(), report.attempted)));
    }
    Ok(())
}
