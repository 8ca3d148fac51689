//! Monte Carlo experiment driver.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::fit;
use crate::estimator::FitConfig;
use crate::functionals::{decompose_t1, mixture_quantile, XkDistribution};
use crate::harness::config::{ExperimentConfig, StartRule};
use crate::harness::io::write_rows_file;
use crate::params::ParamLayout;
use crate::simulate::{simulate_panel, DgpConfig};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Data seed of replication `rep` at sample size `n`.
pub fn replication_seed(base: u64, rep: usize, n: usize) -> u64 {
    mix(mix(mix(base) ^ n as u64) ^ rep as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    /// Set when the fit failed; the remaining fields are then empty.
    pub error: Option<String>,
    /// Natural-scale values in the order of [`McReport::names`].
    pub estimates: Vec<f64>,
    /// `X*_k` quantiles at [`McReport::alphas`].
    pub quantiles: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub name: String,
    pub n: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias2: f64,
    /// Empirical variance with divisor `R`, so `bias2 + variance` is the MSE.
    pub variance: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct McTable {
    pub rows: Vec<McRow>,
}

impl McTable {
    pub fn get(&self, name: &str, n: usize) -> Option<&McRow> {
        self.rows.iter().find(|r| r.name == name && r.n == n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n: usize,
    pub mean_secs: f64,
    pub max_secs: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    /// Free parameters, then `Vk_<name>` and `Vu_<name>` per functional.
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub alphas: Vec<f64>,
    pub quantile_truth: Vec<f64>,
    pub table: McTable,
    pub timing: Vec<TimingRow>,
    pub replications: Vec<Replication>,
}

impl McReport {
    pub fn successes(&self, n: usize) -> impl Iterator<Item = &Replication> {
        self.replications.iter().filter(move |r| r.n == n && r.error.is_none())
    }

    /// `sup_α |q̂_α − q_α|` for each successful replication at `n`.
    pub fn quantile_sup_errors(&self, n: usize) -> Vec<f64> {
        self.successes(n)
            .map(|r| r.quantiles.iter().zip(&self.quantile_truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .collect()
    }
}

fn run_one(config: &ExperimentConfig, layout: &ParamLayout, n: usize, rep: usize) -> Replication {
    let seed = replication_seed(config.seed, rep, n);
    let clock = Instant::now();
    let result = (|| -> Result<Replication> {
        let dgp = DgpConfig { seed, ..config.dgp.clone() };
        let sim = simulate_panel(&dgp, n)?;
        let fit_config = FitConfig {
            initial: match config.start {
                StartRule::Truth => Some(dgp.params()),
                StartRule::LeastSquares => config.fit.initial.clone(),
            },
            ..config.fit.clone()
        };
        let r = fit(&sim.data, &fit_config)?;
        let mut estimates = layout.reported(&r.theta_hat);
        let xk = XkDistribution::Grid(r.mixture_hat.clone());
        for f in &config.functionals {
            let d = decompose_t1(&f.to_spec()?, &r.theta_hat.outcome, &xk)?;
            estimates.push(d.v_known);
            estimates.push(d.v_unknown);
        }
        let quantiles = config
            .quantile_alphas
            .iter()
            .map(|&a| mixture_quantile(&r.mixture_hat, a))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Replication {
            n,
            rep,
            seed,
            error: None,
            estimates,
            quantiles,
            loglik: r.loglik,
            converged: r.converged,
            gradient_norm: r.gradient_norm,
            iterations: r.iterations,
            wall_time_secs: clock.elapsed().as_secs_f64(),
        })
    })();
    result.unwrap_or_else(|e| Replication {
        n,
        rep,
        seed,
        error: Some(e.to_string()),
        estimates: Vec::new(),
        quantiles: Vec::new(),
        loglik: f64::NAN,
        converged: false,
        gradient_norm: f64::NAN,
        iterations: 0,
        wall_time_secs: clock.elapsed().as_secs_f64(),
    })
}

/// Runs every `(replication, sample size)` pair and aggregates against the
/// data-generating values.
pub fn mc_run(config: &ExperimentConfig) -> Result<McReport> {
    config.validate()?;
    let truth_params = config.dgp.params();
    let layout = ParamLayout::new(&truth_params, config.fit.fixed_choice)?;
    let mut names = layout.names.clone();
    let mut truth = layout.reported(&truth_params);
    let xk_truth = XkDistribution::Truncated(config.dgp.xk.clone());
    for f in &config.functionals {
        let d = decompose_t1(&f.to_spec()?, &truth_params.outcome, &xk_truth)?;
        names.push(format!("Vk_{}", f.name));
        names.push(format!("Vu_{}", f.name));
        truth.push(d.v_known);
        truth.push(d.v_unknown);
    }
    let quantile_truth = config.quantile_alphas.iter().map(|&a| xk_truth.quantile(a)).collect::<Result<Vec<f64>>>()?;

    let jobs: Vec<(usize, usize)> =
        config.sample_sizes.iter().flat_map(|&n| (0..config.replications).map(move |r| (n, r))).collect();
    let work = || jobs.par_iter().map(|&(n, r)| run_one(config, &layout, n, r)).collect::<Vec<_>>();
    let replications = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Experiment(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for &n in &config.sample_sizes {
        let ok: Vec<&Replication> = replications.iter().filter(|r| r.n == n && r.error.is_none()).collect();
        let failures = config.replications - ok.len();
        if failures * 10 > config.replications {
            let first = replications.iter().find(|r| r.n == n && r.error.is_some()).and_then(|r| r.error.clone());
            return Err(Error::Experiment(format!(
                "{failures} of {} replications failed at n = {n}; first error: {}",
                config.replications,
                first.unwrap_or_default()
            )));
        }
        let times: Vec<f64> = ok.iter().map(|r| r.wall_time_secs).collect();
        timing.push(TimingRow {
            n,
            mean_secs: times.iter().sum::<f64>() / times.len().max(1) as f64,
            max_secs: times.iter().cloned().fold(0.0, f64::max),
            successes: ok.len(),
            failures,
        });
        if ok.is_empty() {
            continue;
        }
        let reps = ok.len() as f64;
        for (j, name) in names.iter().enumerate() {
            let mean = ok.iter().map(|r| r.estimates[j]).sum::<f64>() / reps;
            let variance = ok.iter().map(|r| (r.estimates[j] - mean).powi(2)).sum::<f64>() / reps;
            rows.push(McRow {
                name: name.clone(),
                n,
                truth: truth[j],
                mean,
                bias2: (mean - truth[j]).powi(2),
                variance,
                reps: ok.len(),
            });
        }
    }
    Ok(McReport {
        names,
        truth,
        alphas: config.quantile_alphas.clone(),
        quantile_truth,
        table: McTable { rows },
        timing,
        replications,
    })
}

/// Writes `mc_table.csv`, `timing.csv`, `quantiles.csv` and
/// `replications.csv` into `dir`. With `scaled`, bias² and variance are
/// multiplied by 1000 and the headers say so.
pub fn write_report(dir: &Path, report: &McReport, scaled: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let s = if scaled { 1000.0 } else { 1.0 };
    let (hb, hv) = if scaled { ("bias2_x1000", "variance_x1000") } else { ("bias2", "variance") };
    let rows: Vec<Vec<String>> = report
        .table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.n.to_string(),
                r.truth.to_string(),
                r.mean.to_string(),
                (s * r.bias2).to_string(),
                (s * r.variance).to_string(),
                r.reps.to_string(),
            ]
        })
        .collect();
    write_rows_file(&dir.join("mc_table.csv"), &["parameter", "n", "truth", "mean", hb, hv, "reps"], &rows)?;

    let rows: Vec<Vec<String>> = report
        .timing
        .iter()
        .map(|t| vec![t.n.to_string(), t.mean_secs.to_string(), t.max_secs.to_string(), t.successes.to_string(), t.failures.to_string()])
        .collect();
    write_rows_file(&dir.join("timing.csv"), &["n", "mean_secs", "max_secs", "successes", "failures"], &rows)?;

    let mut rows = Vec::new();
    let sizes: Vec<usize> = report.timing.iter().map(|t| t.n).collect();
    for &n in &sizes {
        let ok: Vec<&Replication> = report.successes(n).collect();
        if ok.is_empty() {
            continue;
        }
        for (a, alpha) in report.alphas.iter().enumerate() {
            let mut v: Vec<f64> = ok.iter().map(|r| r.quantiles[a]).collect();
            v.sort_by(f64::total_cmp);
            let (lo, med, hi) = (v[v.len() / 20], v[v.len() / 2], v[(v.len() * 19) / 20]);
            rows.push(vec![n.to_string(), alpha.to_string(), report.quantile_truth[a].to_string(), lo.to_string(), med.to_string(), hi.to_string()]);
        }
    }
    write_rows_file(&dir.join("quantiles.csv"), &["n", "alpha", "truth", "q05", "median", "q95"], &rows)?;

    let mut header: Vec<&str> = vec!["n", "rep", "seed", "error", "loglik", "converged", "gradient_norm", "iterations", "wall_time_secs"];
    header.extend(report.names.iter().map(|s| s.as_str()));
    let rows: Vec<Vec<String>> = report
        .replications
        .iter()
        .map(|r| {
            let mut row = vec![
                r.n.to_string(),
                r.rep.to_string(),
                r.seed.to_string(),
                r.error.clone().unwrap_or_default().replace(['\n', ','], " "),
                r.loglik.to_string(),
                r.converged.to_string(),
                r.gradient_norm.to_string(),
                r.iterations.to_string(),
                r.wall_time_secs.to_string(),
            ];
            if r.estimates.is_empty() {
                row.extend(report.names.iter().map(|_| String::new()));
            } else {
                row.extend(r.estimates.iter().map(|v| v.to_string()));
            }
            row
        })
        .collect();
    write_rows_file(&dir.join("replications.csv"), &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_across_cells() {
        let a = replication_seed(1, 0, 500);
        assert_ne!(a, replication_seed(1, 1, 500));
        assert_ne!(a, replication_seed(1, 0, 1000));
        assert_ne!(a, replication_seed(2, 0, 500));
        assert_eq!(a, replication_seed(1, 0, 500));
    }

    #[test]
    fn small_experiment_is_deterministic() {
        let config = ExperimentConfig {
            sample_sizes: vec![120],
            replications: 2,
            start: StartRule::Truth,
            fit: FitConfig { max_iter: 15, ..FitConfig::default() },
            ..ExperimentConfig::default()
        };
        let a = mc_run(&config).unwrap();
        let b = mc_run(&config).unwrap();
        let strip = |r: &McReport| r.replications.iter().map(|x| (x.estimates.clone(), x.quantiles.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        let row = a.table.get("sigma_u2", 120).unwrap();
        assert!(row.bias2 >= 0.0 && row.variance >= 0.0);
        assert_eq!(a.names.len(), a.truth.len());
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &a, true).unwrap();
        let text = std::fs::read_to_string(dir.path().join("mc_table.csv")).unwrap();
        assert!(text.starts_with("parameter,n,truth,mean,bias2_x1000,variance_x1000,reps\n"));
    }
}
