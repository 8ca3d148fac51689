use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use learnpanel::estimator::{fit, FitResult};
use learnpanel::functionals::{decompose_t, Decomposition, FittedModel, WeightedSumSpec, XkDistribution};
use learnpanel::harness::config::default_alphas;
use learnpanel::harness::io::{read_json, read_panel_file, write_json, write_panel_file, write_rows_file};
use learnpanel::harness::mc::write_report;
use learnpanel::harness::{mc_run, ExperimentConfig, StartRule};
use learnpanel::simulate::simulate_panel;

/// Every flag can also be set through an environment variable named
/// `LEARNPANEL_<FLAG>`, e.g. `LEARNPANEL_SEED=7`.
#[derive(Parser, Debug)]
#[command(name = "learnpanel", version, about = "Dynamic panel learning models: simulation, estimation, Monte Carlo")]
struct Cli {
    /// TOML experiment file; Monte Carlo design defaults when absent.
    #[arg(long, global = true, env = "LEARNPANEL_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "LEARNPANEL_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "LEARNPANEL_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, env = "LEARNPANEL_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a panel and write `panel.csv`.
    Simulate {
        #[arg(long, env = "LEARNPANEL_N", default_value_t = 1000)]
        n: usize,
    },
    /// Fit one panel; writes `fit.json` and `quantiles.csv`.
    Estimate {
        #[arg(long, env = "LEARNPANEL_INPUT")]
        input: PathBuf,
        /// Start at the configured DGP values instead of least squares.
        #[arg(long)]
        start_at_truth: bool,
    },
    /// Run the Monte Carlo experiment.
    Mc {
        /// Sample sizes; overrides the config list.
        #[arg(long, env = "LEARNPANEL_N", value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long, env = "LEARNPANEL_REPS")]
        reps: Option<usize>,
        /// Write bias² and variance unscaled.
        #[arg(long)]
        unscaled: bool,
    },
    /// Variance decomposition from a fit or from the DGP values.
    Decompose {
        /// `fit.json` from `estimate`; the DGP is used when absent.
        #[arg(long)]
        fit: Option<PathBuf>,
        /// One-based choice path, e.g. `1,1,1`.
        #[arg(long, value_delimiter = ',', default_value = "1,1,1")]
        path: Vec<usize>,
        #[arg(long, default_value_t = 0.95)]
        discount: f64,
        /// One-based period.
        #[arg(long, default_value_t = 1)]
        period: usize,
        #[arg(long, value_enum, default_value_t = Which::Conditional)]
        which: Which,
        /// Covariates, constant first.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1,0,0")]
        x: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Quantile curve of `X*_k` on an α grid.
    Quantiles {
        #[arg(long)]
        fit: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Which {
    Conditional,
    Unconditional,
    Counterfactual,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
        config.dgp.seed = s;
        config.fit.seed = s;
    }
    if let Some(t) = cli.threads {
        config.threads = Some(t);
    }
    if let Some(o) = &cli.out {
        config.output_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> Result<&Path> {
    std::fs::create_dir_all(&config.output_dir).with_context(|| format!("creating {}", config.output_dir.display()))?;
    Ok(&config.output_dir)
}

fn model_from(config: &ExperimentConfig, fit_path: &Option<PathBuf>) -> Result<FittedModel> {
    Ok(match fit_path {
        Some(p) => {
            let r: FitResult = read_json(p).with_context(|| format!("reading {}", p.display()))?;
            FittedModel { params: r.theta_hat, xk: XkDistribution::Grid(r.mixture_hat) }
        }
        None => FittedModel { params: config.dgp.params(), xk: XkDistribution::Truncated(config.dgp.xk.clone()) },
    })
}

fn quantile_rows(xk: &XkDistribution, alphas: &[f64]) -> Result<Vec<Vec<String>>> {
    alphas.iter().map(|&a| Ok(vec![a.to_string(), xk.quantile(a)?.to_string()])).collect()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    if let Some(t) = config.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match &cli.command {
        Command::Simulate { n } => {
            let sim = simulate_panel(&config.dgp, *n)?;
            let path = out_dir(&config)?.join("panel.csv");
            write_panel_file(&path, &sim.data)?;
            eprintln!("wrote {} individuals to {}", n, path.display());
        }
        Command::Estimate { input, start_at_truth } => {
            let data = read_panel_file(input).with_context(|| format!("reading {}", input.display()))?;
            let mut fc = config.fit.clone();
            if *start_at_truth || config.start == StartRule::Truth {
                fc.initial = Some(config.dgp.params());
            }
            let r = fit(&data, &fc)?;
            let dir = out_dir(&config)?;
            write_json(&dir.join("fit.json"), &r)?;
            let rows = quantile_rows(&XkDistribution::Grid(r.mixture_hat.clone()), &default_alphas())?;
            write_rows_file(&dir.join("quantiles.csv"), &["alpha", "quantile"], &rows)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "loglik {} after {} iterations, |grad| {:e}, converged {}",
                r.loglik, r.iterations, r.gradient_norm, r.converged
            );
        }
        Command::Mc { n, reps, unscaled } => {
            let mut config = config.clone();
            if !n.is_empty() {
                config.sample_sizes = n.clone();
            }
            if let Some(r) = reps {
                config.replications = *r;
            }
            config.validate()?;
            let report = mc_run(&config)?;
            let dir = out_dir(&config)?;
            write_report(dir, &report, !unscaled)?;
            write_json(&dir.join("mc_report.json"), &report)?;
            for t in &report.timing {
                eprintln!("n = {}: {} fits, mean {:.2}s, {} failures", t.n, t.successes, t.mean_secs, t.failures);
            }
        }
        Command::Decompose { fit, path, discount, period, which, x, draws } => {
            if path.contains(&0) || *period == 0 {
                bail!("choice paths and periods are one-based");
            }
            let model = model_from(&config, fit)?;
            let spec = WeightedSumSpec::discounted(path.iter().map(|d| d - 1).collect(), *discount);
            let which = match which {
                Which::Conditional => Decomposition::Conditional,
                Which::Unconditional => Decomposition::Unconditional,
                Which::Counterfactual => Decomposition::Counterfactual,
            };
            let r = decompose_t(&spec, period - 1, which, &model, x, *draws, config.seed)?;
            let dir = out_dir(&config)?;
            write_json(&dir.join("decomposition.json"), &r)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Quantiles { fit } => {
            let model = model_from(&config, fit)?;
            let rows = quantile_rows(&model.xk, &config.quantile_alphas)?;
            let dir = out_dir(&config)?;
            write_rows_file(&dir.join("quantiles.csv"), &["alpha", "quantile"], &rows)?;
        }
    }
    Ok(())
}
