//! Grid construction, start values and the outer maximization over `θ^c`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bfgs::{minimize, sup_norm, BfgsOptions};
use crate::error::{Error, Result};
use crate::model::{ChoiceParams, ModelParams, Normalization, OutcomeParams, PanelData};
use crate::npmle::{GridMixture, KKT_TOL};
use crate::params::ParamLayout;
use crate::profile::{GradientMethod, ProfileObjective};

/// `ceil(6·n^{1/3})` equally spaced points on `[−0.7·n^{1/6}, 0.7·n^{1/6}]`.
pub fn build_grid(n: usize) -> Vec<f64> {
    let nf = n.max(1) as f64;
    let q = ((6.0 * nf.cbrt()) - 1e-9).ceil().max(2.0) as usize;
    let bound = 0.7 * nf.powf(1.0 / 6.0);
    (0..q)
        .map(|s| -bound + 2.0 * bound * s as f64 / (q - 1) as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Explicit support; defaults to [`build_grid`] of the sample size.
    pub grid: Option<Vec<f64>>,
    /// Sup-norm tolerance on the gradient of the average log-likelihood.
    pub tol: f64,
    pub max_iter: usize,
    pub multistart: usize,
    pub perturbation: f64,
    pub seed: u64,
    /// Start value; a least-squares start is used when unset.
    pub initial: Option<ModelParams>,
    /// Hold `ρ` and `κ` at their start values.
    pub fixed_choice: bool,
    /// Used for the least-squares start; baseline pins when unset.
    pub normalization: Option<Normalization>,
    pub factor_dim: usize,
    pub gradient: GradientMethod,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            grid: None,
            tol: 1e-6,
            max_iter: 500,
            multistart: 1,
            perturbation: 0.1,
            seed: 0,
            initial: None,
            fixed_choice: false,
            normalization: None,
            factor_dim: 1,
            gradient: GradientMethod::Envelope,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.multistart == 0 || self.max_iter == 0 {
            return Err(Error::Config("multistart and max_iter must be at least 1".into()));
        }
        if !(self.perturbation >= 0.0) {
            return Err(Error::Config("perturbation scale must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ModelParams,
    pub mixture_hat: GridMixture,
    pub loglik: f64,
    /// Sup-norm of the gradient of the average log-likelihood.
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub kkt_residual: f64,
    pub start_index: usize,
    pub free_names: Vec<String>,
    pub free_hat: Vec<f64>,
    pub warnings: Vec<String>,
    pub wall_time_secs: f64,
}

impl FitResult {
    /// Equality ignoring wall time.
    pub fn same_estimate(&self, other: &FitResult) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        a == *other
    }
}

/// Least-squares starting values: `β` per `(t, d)` on the individuals who
/// chose `d` at `t`, loadings at one, variances split evenly between the
/// factor and the shock, `ρ = 1`, `κ = 0`.
pub fn least_squares_start(data: &PanelData, normalization: &Normalization, p: usize, alts: usize) -> Result<ModelParams> {
    let horizon = data.horizon();
    let k = data.covariate_dim();
    if data.is_empty() || horizon == 0 || k == 0 {
        return Err(Error::InvalidData("empty panel".into()));
    }
    let mut beta = vec![vec![vec![0.0; k]; alts]; horizon];
    let mut resid_var = vec![vec![1.0; alts]; horizon];
    for t in 0..horizon {
        for d in 0..alts {
            let rows: Vec<_> = data.individuals.iter().map(|h| &h[t]).filter(|o| o.d == d).collect();
            let rows = if rows.len() > k + 1 {
                rows
            } else {
                data.individuals.iter().map(|h| &h[t]).collect()
            };
            let x = DMatrix::from_fn(rows.len(), k, |i, j| rows[i].x[j]);
            let y = DVector::from_fn(rows.len(), |i, _| rows[i].y);
            let mut xtx = x.transpose() * &x;
            for j in 0..k {
                xtx[(j, j)] += 1e-8 * (1.0 + xtx[(j, j)]);
            }
            let b = xtx
                .lu()
                .solve(&(x.transpose() * &y))
                .ok_or_else(|| Error::InvalidData("singular covariate design".into()))?;
            let r = &y - &x * &b;
            resid_var[t][d] = (r.norm_squared() / rows.len() as f64).max(1e-4);
            beta[t][d] = b.iter().cloned().collect();
        }
    }
    let mean_var = resid_var.iter().flatten().sum::<f64>() / (horizon * alts) as f64;
    let mut sigma2 = vec![vec![0.0; alts]; horizon];
    for d in 0..alts {
        let avg = (0..horizon).map(|t| resid_var[t][d]).sum::<f64>() / horizon as f64;
        for t in 0..horizon {
            sigma2[t][d] = 0.5 * if normalization.tie_sigma2_over_time { avg } else { resid_var[t][d] };
        }
    }
    let mut outcome = OutcomeParams {
        beta,
        lambda_k: vec![vec![1.0; alts]; horizon],
        lambda_u: vec![vec![vec![1.0; p]; alts]; horizon],
        sigma2,
        sigma_u: (0..p).map(|i| (0..p).map(|j| if i == j { 0.5 * mean_var } else { 0.0 }).collect()).collect(),
        normalization: normalization.clone(),
    };
    for pin in &normalization.pins {
        match *pin {
            crate::model::Pin::Beta { t, d, j } => outcome.beta[t][d][j] = 0.0,
            crate::model::Pin::LambdaK { t, d } => outcome.lambda_k[t][d] = 1.0,
            crate::model::Pin::LambdaU { t, d, j } => {
                for (jj, v) in outcome.lambda_u[t][d].iter_mut().enumerate() {
                    *v = if jj == j { 1.0 } else { 0.0 };
                }
            }
        }
    }
    let params = ModelParams { outcome, choice: ChoiceParams { rho: 1.0, kappa: 0.0, crra: None } };
    params.validate()?;
    Ok(params)
}

struct StartOutcome {
    index: usize,
    free: Vec<f64>,
    value: f64,
    grad_norm: f64,
    converged: bool,
    iterations: usize,
    evaluations: usize,
    weights: Vec<f64>,
    kkt: f64,
    certified: bool,
}

/// Maximizes the profile likelihood from each start and keeps the best
/// certified result.
pub fn fit(data: &PanelData, config: &FitConfig) -> Result<FitResult> {
    let clock = Instant::now();
    config.validate()?;
    data.validate()?;
    let mut warnings = Vec::new();
    let start = match &config.initial {
        Some(p) => p.clone(),
        None => {
            let alts = data
                .individuals
                .iter()
                .flat_map(|h| h.iter().map(|o| o.d + 1))
                .max()
                .unwrap_or(0)
                .max(2);
            let norm = config.normalization.clone().unwrap_or_else(Normalization::baseline);
            least_squares_start(data, &norm, config.factor_dim, alts)?
        }
    };
    let p = start.outcome.factor_dim();
    if data.horizon() < 2 * p + 1 {
        warnings.push(format!("horizon {} is below 2p+1 = {}", data.horizon(), 2 * p + 1));
    }
    let layout = ParamLayout::new(&start, config.fixed_choice)?;
    let support = config.grid.clone().unwrap_or_else(|| build_grid(data.len()));
    let objective = ProfileObjective::new(data, support.clone(), layout.clone())?;
    let base = layout.pack(&start)?;
    let starts: Vec<Vec<f64>> = (0..config.multistart)
        .map(|j| {
            if j == 0 {
                base.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(j as u64);
                base.iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + config.perturbation * z
                    })
                    .collect()
            }
        })
        .collect();
    let n = data.len() as f64;
    let opts = BfgsOptions { gtol: config.tol, max_iter: config.max_iter, ..BfgsOptions::default() };

    let run = |(index, x0): (usize, &Vec<f64>)| -> Result<StartOutcome> {
        let mut warm: Option<Vec<f64>> = None;
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let ev = objective.value_and_gradient(x, warm.as_deref(), config.gradient)?;
            warm = Some(ev.inner.weights.clone());
            let g: Vec<f64> = ev.gradient.unwrap().iter().map(|v| -v / n).collect();
            Ok((-ev.value / n, g))
        };
        let report = minimize(f, x0, &opts)?;
        let final_eval = objective.value(&report.x, None)?;
        Ok(StartOutcome {
            index,
            grad_norm: sup_norm(&report.grad),
            converged: report.converged,
            iterations: report.iterations,
            evaluations: report.evaluations,
            value: final_eval.value,
            certified: final_eval.inner.certified,
            kkt: final_eval.inner.kkt_residual,
            weights: final_eval.inner.weights,
            free: report.x,
        })
    };
    let outcomes: Vec<Result<StartOutcome>> = starts.iter().enumerate().collect::<Vec<_>>().into_par_iter().map(run).collect();

    let mut errors = Vec::new();
    let mut best: Option<StartOutcome> = None;
    for o in outcomes {
        match o {
            Ok(o) => {
                let better = match &best {
                    None => true,
                    Some(b) => (o.certified && !b.certified) || (o.certified == b.certified && o.value > b.value),
                };
                if better {
                    best = Some(o);
                }
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    let best = best.ok_or_else(|| Error::OptimizationFailure(format!("all starts failed: {}", errors.join("; "))))?;
    if !best.certified {
        warnings.push(format!("inner solution not certified (KKT residual {:e} > {KKT_TOL:e})", best.kkt));
    }
    let theta_hat = layout.unpack(&best.free)?;
    let total: f64 = best.weights.iter().sum();
    let weights: Vec<f64> = best.weights.iter().map(|w| w / total).collect();
    Ok(FitResult {
        theta_hat,
        mixture_hat: GridMixture { support, weights },
        loglik: best.value,
        gradient_norm: best.grad_norm,
        converged: best.converged,
        iterations: best.iterations,
        evaluations: best.evaluations,
        kkt_residual: best.kkt,
        start_index: best.index,
        free_names: layout.names.clone(),
        free_hat: best.free,
        warnings,
        wall_time_secs: clock.elapsed().as_secs_f64(),
    })
}
