//! Variance decompositions, quantiles of the known-heterogeneity
//! distribution and quantile structural functions.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{posterior_update, ChoiceParams, ModelParams, OutcomeParams, PosteriorState};
use crate::npmle::GridMixture;
use crate::simulate::{ccp, ccp_crra, individual_rng, MixtureSpec};

/// Weights `ω_t` and a choice path `d^T` (zero-based alternatives).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSumSpec {
    pub weights: Vec<f64>,
    pub path: Vec<usize>,
}

impl WeightedSumSpec {
    /// `ω_t = β^{t−1}` along `path`.
    pub fn discounted(path: Vec<usize>, discount: f64) -> Self {
        let weights = (0..path.len()).map(|t| discount.powi(t as i32)).collect();
        WeightedSumSpec { weights, path }
    }

    pub fn horizon(&self) -> usize {
        self.path.len()
    }

    pub fn validate(&self, outcome: &OutcomeParams) -> Result<()> {
        if self.weights.len() != self.path.len() || self.path.len() != outcome.horizon() {
            return Err(Error::DimensionMismatch(format!(
                "weighted sum needs {} weights and choices, got {} and {}",
                outcome.horizon(),
                self.weights.len(),
                self.path.len()
            )));
        }
        if let Some(&d) = self.path.iter().find(|&&d| d >= outcome.alternatives()) {
            return Err(Error::InvalidParameter(format!("alternative {d} out of range")));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ClosedForm,
    MonteCarlo,
}

/// Monte Carlo standard errors of the three components and of the
/// identity residual `total − v_unknown − v_known`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McErrors {
    pub v_unknown: f64,
    pub v_known: f64,
    pub total: f64,
    pub identity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub v_unknown: f64,
    pub v_known: f64,
    pub total: f64,
    pub method: Method,
    /// Standard error of the identity residual.
    pub mc_se: Option<f64>,
    pub mc_errors: Option<McErrors>,
    /// Draws that entered the estimate.
    pub draws: usize,
}

impl DecompositionResult {
    pub fn identity_residual(&self) -> f64 {
        self.total - self.v_unknown - self.v_known
    }
}

/// Distribution of `X*_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum XkDistribution {
    Grid(GridMixture),
    Truncated(MixtureSpec),
}

impl XkDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            XkDistribution::Grid(m) => m.validate(),
            XkDistribution::Truncated(s) => s.validate(),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            XkDistribution::Grid(m) => mixture_moments(m).0,
            XkDistribution::Truncated(s) => s.mean(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            XkDistribution::Grid(m) => mixture_moments(m).1,
            XkDistribution::Truncated(s) => s.variance(),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            XkDistribution::Grid(m) => m.support.iter().zip(&m.weights).filter(|(s, _)| **s <= x).map(|(_, w)| w).sum(),
            XkDistribution::Truncated(s) => s.cdf(x),
        }
    }

    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        check_prob(alpha)?;
        match self {
            XkDistribution::Grid(m) => mixture_quantile(m, alpha),
            XkDistribution::Truncated(s) => {
                let lo = (0..s.means.len()).map(|c| s.bounds(c).0).fold(f64::INFINITY, f64::min);
                let hi = (0..s.means.len()).map(|c| s.bounds(c).1).fold(f64::NEG_INFINITY, f64::max);
                bisect(|x| s.cdf(x) - alpha, lo, hi)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            XkDistribution::Grid(m) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (s, w) in m.support.iter().zip(&m.weights) {
                    acc += w;
                    if u < acc {
                        return *s;
                    }
                }
                *m.support.last().expect("nonempty grid")
            }
            XkDistribution::Truncated(s) => s.sample(rng),
        }
    }

    /// `P(λX + σZ ≤ c)` with `Z` standard normal independent of `X`.
    fn convolved_cdf(&self, lambda: f64, sd: f64, c: f64) -> f64 {
        let z = std_normal();
        match self {
            XkDistribution::Grid(m) => m
                .support
                .iter()
                .zip(&m.weights)
                .map(|(s, w)| w * z.cdf((c - lambda * s) / sd))
                .sum(),
            XkDistribution::Truncated(spec) => {
                // Simpson's rule on each truncated component.
                let k = spec.truncation;
                let mass = 2.0 * z.cdf(k) - 1.0;
                let steps = 400;
                let mut total = 0.0;
                for c_idx in 0..spec.means.len() {
                    let sdc = spec.variances[c_idx].sqrt();
                    let h = 2.0 * k / steps as f64;
                    let mut acc = 0.0;
                    for j in 0..=steps {
                        let u = -k + j as f64 * h;
                        let x = spec.means[c_idx] + sdc * u;
                        let f = (-0.5 * u * u).exp() * z.cdf((c - lambda * x) / sd);
                        let coef = if j == 0 || j == steps { 1.0 } else if j % 2 == 1 { 4.0 } else { 2.0 };
                        acc += coef * f;
                    }
                    let integral = acc * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt();
                    total += spec.weights[c_idx] * integral / mass;
                }
                total
            }
        }
    }
}

/// Parameters plus a distribution for `X*_k`, fitted or true.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub params: ModelParams,
    pub xk: XkDistribution,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn check_prob(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("probability {alpha} outside (0, 1)")));
    }
    Ok(())
}

/// Root of an increasing function by bisection; widens the bracket up to ten
/// times before giving up.
fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> Result<f64> {
    let mut tries = 0;
    while !(f(lo) <= 0.0 && f(hi) >= 0.0) {
        tries += 1;
        if tries > 10 || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Bracketing(format!("no sign change on [{lo}, {hi}]")));
        }
        let w = hi - lo;
        lo -= 2.0 * w.max(1.0);
        hi += 2.0 * w.max(1.0);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `V_t^u`: variance of `Σ_{s≥t} ω_s Y_s(d_s)` under belief `state`
/// entering period `from` (zero-based).
pub fn posterior_variance(spec: &WeightedSumSpec, state: &PosteriorState, from: usize, outcome: &OutcomeParams) -> Result<f64> {
    spec.validate(outcome)?;
    if from > spec.horizon() {
        return Err(Error::InvalidParameter(format!("period {from} beyond horizon {}", spec.horizon())));
    }
    state.validate()?;
    let p = outcome.factor_dim();
    if state.dim() != p {
        return Err(Error::DimensionMismatch("belief vs factor dimension".into()));
    }
    let mut agg = nalgebra::DVector::zeros(p);
    let mut noise = 0.0;
    for s in from..spec.horizon() {
        let w = spec.weights[s];
        let d = spec.path[s];
        agg += outcome.lambda_u_vector(s, d) * w;
        noise += w * w * outcome.sigma2[s][d];
    }
    Ok((agg.dot(&(&state.sigma * &agg)) + noise).max(0.0))
}

fn weighted_known_loading(spec: &WeightedSumSpec, outcome: &OutcomeParams, from: usize) -> f64 {
    (from..spec.horizon()).map(|s| spec.weights[s] * outcome.lambda_k[s][spec.path[s]]).sum()
}

/// Closed-form decomposition at the first period:
/// `Var = V_1^u + (Σ ω_t λ^k_{t,d_t})² Var(X*_k)`.
pub fn decompose_t1(spec: &WeightedSumSpec, outcome: &OutcomeParams, xk: &XkDistribution) -> Result<DecompositionResult> {
    outcome.validate()?;
    xk.validate()?;
    let v_unknown = posterior_variance(spec, &PosteriorState::prior(outcome), 0, outcome)?;
    let load = weighted_known_loading(spec, outcome, 0);
    let v_known = load * load * xk.variance();
    Ok(DecompositionResult {
        v_unknown,
        v_known,
        total: v_unknown + v_known,
        method: Method::ClosedForm,
        mc_se: None,
        mc_errors: None,
        draws: 0,
    })
}

/// The decompositions available after the first period.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decomposition {
    /// Conditional on `D^{t−1} = d^{t−1}`.
    Conditional,
    /// Averaged over the choice history.
    Unconditional,
    /// Choices assigned uniformly at random, evaluated on the cell `d^{t−1}`.
    Counterfactual,
}

struct PathDraw {
    /// First `from` choices.
    history: Vec<usize>,
    /// `Σ_{s≥t} ω_s Y_s(d_s)` at the drawn latent values.
    y: f64,
    /// `E(Y | I_t)`.
    m: f64,
    v: f64,
}

fn draw_path(
    spec: &WeightedSumSpec,
    from: usize,
    model: &FittedModel,
    x: &[f64],
    uniform: bool,
    seed: u64,
    index: usize,
) -> Result<PathDraw> {
    let outcome = &model.params.outcome;
    let alts = outcome.alternatives();
    let mut rng = individual_rng(seed, index as u64);
    let xk = model.xk.sample(&mut rng);
    let chol = outcome
        .sigma_u_matrix()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("Sigma_u is not positive definite".into()))?;
    let p = outcome.factor_dim();
    let xu = chol.l() * nalgebra::DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut state = PosteriorState::prior(outcome);
    let mut history = Vec::with_capacity(from);
    let mut y = 0.0;
    for t in 0..spec.horizon() {
        let eps: Vec<f64> = (0..alts).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let potential = |d: usize| {
            outcome.known_mean(x, t, d, xk) + outcome.lambda_u_vector(t, d).dot(&xu) + outcome.sigma2[t][d].sqrt() * eps[d]
        };
        if t < from {
            let u: f64 = rng.random();
            let d = if uniform {
                ((u * alts as f64) as usize).min(alts - 1)
            } else {
                let probs = choice_probs(&state, x, xk, t, outcome, &model.params.choice)?;
                let mut acc = 0.0;
                let mut pick = alts - 1;
                for (d, pr) in probs.iter().enumerate() {
                    acc += pr;
                    if u < acc {
                        pick = d;
                        break;
                    }
                }
                pick
            };
            state = posterior_update(&state, potential(d), x, d, xk, outcome, t)?;
            history.push(d);
        } else {
            y += spec.weights[t] * potential(spec.path[t]);
        }
    }
    let m: f64 = (from..spec.horizon())
        .map(|s| {
            let d = spec.path[s];
            spec.weights[s] * (outcome.known_mean(x, s, d, xk) + outcome.lambda_u_vector(s, d).dot(&state.mu))
        })
        .sum();
    let v = posterior_variance(spec, &state, from, outcome)?;
    Ok(PathDraw { history, y, m, v })
}

fn choice_probs(
    state: &PosteriorState,
    x: &[f64],
    xk: f64,
    t: usize,
    outcome: &OutcomeParams,
    choice: &ChoiceParams,
) -> Result<Vec<f64>> {
    match &choice.crra {
        None => ccp(state, x, xk, t, outcome, choice),
        Some(c) => ccp_crra(state, x, xk, t, outcome, c),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn se_of_mean(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = mean(v);
    (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0) / n).sqrt()
}

/// Decomposition at period `period` (zero-based) by simulation at fixed
/// covariates `x`. Period 0 routes to [`decompose_t1`].
pub fn decompose_t(
    spec: &WeightedSumSpec,
    period: usize,
    which: Decomposition,
    model: &FittedModel,
    x: &[f64],
    draws: usize,
    seed: u64,
) -> Result<DecompositionResult> {
    if period == 0 {
        return decompose_t1(spec, &model.params.outcome, &model.xk);
    }
    model.params.validate()?;
    model.xk.validate()?;
    spec.validate(&model.params.outcome)?;
    if period >= spec.horizon() {
        return Err(Error::InvalidParameter(format!("period {period} beyond horizon {}", spec.horizon())));
    }
    if x.len() != model.params.outcome.covariate_dim() {
        return Err(Error::DimensionMismatch("covariate vector length".into()));
    }
    if draws < 2 {
        return Err(Error::InvalidParameter("need at least two draws".into()));
    }
    let uniform = which == Decomposition::Counterfactual;
    let all: Vec<Result<PathDraw>> = (0..draws)
        .into_par_iter()
        .map(|i| draw_path(spec, period, model, x, uniform, seed, i))
        .collect();
    let mut kept = Vec::with_capacity(draws);
    for d in all {
        let d = d?;
        if which == Decomposition::Unconditional || d.history[..] == spec.path[..period] {
            kept.push(d);
        }
    }
    if kept.len() < 2 {
        return Err(Error::EmptyCell);
    }
    let n = kept.len() as f64;
    let ys: Vec<f64> = kept.iter().map(|d| d.y).collect();
    let ms: Vec<f64> = kept.iter().map(|d| d.m).collect();
    let vs: Vec<f64> = kept.iter().map(|d| d.v).collect();
    let (ybar, mbar) = (mean(&ys), mean(&ms));
    let scale = n / (n - 1.0);
    let ty: Vec<f64> = ys.iter().map(|y| scale * (y - ybar) * (y - ybar)).collect();
    let tm: Vec<f64> = ms.iter().map(|m| scale * (m - mbar) * (m - mbar)).collect();
    let total = mean(&ty);
    let v_known = mean(&tm);
    let v_unknown = mean(&vs);
    let resid: Vec<f64> = (0..kept.len()).map(|i| ty[i] - tm[i] - vs[i]).collect();
    let errors = McErrors {
        v_unknown: if which == Decomposition::Unconditional { se_of_mean(&vs) } else { 0.0 },
        v_known: se_of_mean(&tm),
        total: se_of_mean(&ty),
        identity: se_of_mean(&resid),
    };
    Ok(DecompositionResult {
        v_unknown,
        v_known,
        total,
        method: Method::MonteCarlo,
        mc_se: Some(errors.identity),
        mc_errors: Some(errors),
        draws: kept.len(),
    })
}

/// `(mean, variance)` of a grid mixture by direct summation.
pub fn mixture_moments(mix: &GridMixture) -> (f64, f64) {
    let total: f64 = mix.weights.iter().sum();
    let m = mix.support.iter().zip(&mix.weights).map(|(s, w)| s * w).sum::<f64>() / total;
    let v = mix.support.iter().zip(&mix.weights).map(|(s, w)| w * (s - m) * (s - m)).sum::<f64>() / total;
    (m, v)
}

/// Smallest support point whose CDF reaches `alpha`.
pub fn mixture_quantile(mix: &GridMixture, alpha: f64) -> Result<f64> {
    check_prob(alpha)?;
    if mix.is_empty() {
        return Err(Error::InvalidParameter("empty mixture".into()));
    }
    let mut order: Vec<usize> = (0..mix.len()).collect();
    order.sort_by(|&a, &b| mix.support[a].total_cmp(&mix.support[b]));
    let total: f64 = mix.weights.iter().sum();
    let mut acc = 0.0;
    for &s in &order {
        acc += mix.weights[s] / total;
        // Guard against the cumulative sum falling short through rounding.
        if acc >= alpha - 1e-14 {
            return Ok(mix.support[s]);
        }
    }
    Ok(mix.support[*order.last().unwrap()])
}

/// Quantile structural functions at covariates `x` for `Y_t(d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralFunctions<'a> {
    pub x_beta: f64,
    pub lambda_k: f64,
    /// Standard deviation of `C^u = λ^u'X*_u`.
    pub sd_u: f64,
    pub sd_eps: f64,
    pub xk: &'a XkDistribution,
}

pub fn structural_functions<'a>(
    x: &[f64],
    t: usize,
    d: usize,
    outcome: &OutcomeParams,
    xk: &'a XkDistribution,
) -> Result<StructuralFunctions<'a>> {
    outcome.validate()?;
    xk.validate()?;
    if t >= outcome.horizon() || d >= outcome.alternatives() || x.len() != outcome.covariate_dim() {
        return Err(Error::DimensionMismatch("cell or covariate length".into()));
    }
    let lu = outcome.lambda_u_vector(t, d);
    let su: DMatrix<f64> = outcome.sigma_u_matrix();
    Ok(StructuralFunctions {
        x_beta: crate::model::dot(x, &outcome.beta[t][d]),
        lambda_k: outcome.lambda_k[t][d],
        sd_u: lu.dot(&(&su * &lu)).max(0.0).sqrt(),
        sd_eps: outcome.sigma2[t][d].sqrt(),
        xk,
    })
}

impl StructuralFunctions<'_> {
    /// `x'β + Q_α[C^k + C^u + ε]`.
    pub fn s1(&self, alpha: f64) -> Result<f64> {
        check_prob(alpha)?;
        let sd = (self.sd_u * self.sd_u + self.sd_eps * self.sd_eps).sqrt();
        let centre = self.lambda_k * self.xk.mean();
        let spread = (self.lambda_k.abs() * self.xk.variance().sqrt() + sd).max(1e-12);
        if sd == 0.0 {
            let q = if self.lambda_k >= 0.0 { self.xk.quantile(alpha)? } else { self.xk.quantile(1.0 - alpha)? };
            return Ok(self.x_beta + self.lambda_k * q);
        }
        let c = bisect(
            |c| self.xk.convolved_cdf(self.lambda_k, sd, c) - alpha,
            centre - 8.0 * spread,
            centre + 8.0 * spread,
        )?;
        Ok(self.x_beta + c)
    }

    /// `x'β + Q_{α₁}[C^k] + Q_{α₂}[C^u] + Q_{α₃}[ε]`.
    pub fn s2(&self, a1: f64, a2: f64, a3: f64) -> Result<f64> {
        for a in [a1, a2, a3] {
            check_prob(a)?;
        }
        let z = std_normal();
        let qk = if self.lambda_k >= 0.0 {
            self.lambda_k * self.xk.quantile(a1)?
        } else {
            // Upper quantile of X maps to the lower quantile of λX, taken
            // as a limit from the right.
            self.lambda_k * self.xk.quantile((1.0 - a1).clamp(1e-15, 1.0 - 1e-15))?
        };
        Ok(self.x_beta + qk + self.sd_u * z.inverse_cdf(a2) + self.sd_eps * z.inverse_cdf(a3))
    }

    /// Average structural function `x'β + λ^k E[X*_k]`.
    pub fn s3(&self) -> f64 {
        self.x_beta + self.lambda_k * self.xk.mean()
    }
}

/// Plug-in `(V^k, V^u)` at the first period for the path in `spec`.
pub fn first_period_components(spec: &WeightedSumSpec, model: &FittedModel) -> Result<(f64, f64)> {
    let r = decompose_t1(spec, &model.params.outcome, &model.xk)?;
    Ok((r.v_known, r.v_unknown))
}
