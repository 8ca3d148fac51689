//! Data-generating processes: the logit expected-utility model and the CRRA
//! variant with biased beliefs, plus the truncated normal mixture for `X*_k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{
    conditional_outcome_moments, posterior_update, ChoiceParams, CrraParams, ModelParams,
    Observation, OutcomeParams, PanelData, PosteriorState,
};

/// Finite mixture of normals, each truncated symmetrically at
/// `truncation` standard deviations around its mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(default = "default_truncation")]
    pub truncation: f64,
}

fn default_truncation() -> f64 {
    3.0
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            means: vec![-1.2, 0.0, 1.5],
            variances: vec![0.2, 0.1, 0.3],
            weights: vec![0.4, 0.3, 0.3],
            truncation: 3.0,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.means.len();
        if c == 0 || self.variances.len() != c || self.weights.len() != c {
            return Err(Error::InvalidParameter("mixture component lengths differ".into()));
        }
        if self.variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("mixture variances must be positive".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter("mixture weights must lie on the simplex".into()));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::InvalidParameter("truncation multiple must be positive".into()));
        }
        Ok(())
    }

    /// Interval `[μ_c − kσ_c, μ_c + kσ_c]` of component `c`.
    pub fn bounds(&self, c: usize) -> (f64, f64) {
        let sd = self.variances[c].sqrt();
        (self.means[c] - self.truncation * sd, self.means[c] + self.truncation * sd)
    }

    /// Variance factor of a standard normal truncated to `[−k, k]`.
    fn shrink(&self) -> f64 {
        let k = self.truncation;
        let z = std_normal();
        1.0 - 2.0 * k * z.pdf(k) / (2.0 * z.cdf(k) - 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let f = self.shrink();
        let mean = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w * (f * v + m * m))
            .sum::<f64>()
            - mean * mean
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = std_normal();
        let k = self.truncation;
        let mass = 2.0 * z.cdf(k) - 1.0;
        (0..self.means.len())
            .map(|c| {
                let sd = self.variances[c].sqrt();
                let u = ((x - self.means[c]) / sd).clamp(-k, k);
                self.weights[c] * (z.cdf(u) - z.cdf(-k)) / mass
            })
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_xk(rng, self)
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// One draw from the truncated mixture: component by weight, then inverse CDF
/// inside the component's interval.
pub fn sample_xk<R: Rng + ?Sized>(rng: &mut R, spec: &MixtureSpec) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut comp = spec.weights.len() - 1;
    for (c, w) in spec.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            comp = c;
            break;
        }
    }
    let z = std_normal();
    let k = spec.truncation;
    let (lo, hi) = (z.cdf(-k), z.cdf(k));
    let v: f64 = rng.random();
    let q = z.inverse_cdf(lo + v * (hi - lo)).clamp(-k, k);
    spec.means[comp] + spec.variances[comp].sqrt() * q
}

/// Exogenous covariates: a constant, `normal` standard normals, then one
/// Bernoulli per listed probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub normal: usize,
    pub bernoulli: Vec<f64>,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec { normal: 1, bernoulli: vec![0.5] }
    }
}

impl CovariateSpec {
    pub fn dim(&self) -> usize {
        1 + self.normal + self.bernoulli.len()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.dim());
        x.push(1.0);
        for _ in 0..self.normal {
            x.push(rng.sample(StandardNormal));
        }
        for &p in &self.bernoulli {
            let b = Bernoulli::new(p).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            x.push(if b.sample(rng) { 1.0 } else { 0.0 });
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub outcome: OutcomeParams,
    pub choice: ChoiceParams,
    pub xk: MixtureSpec,
    pub covariates: CovariateSpec,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            outcome: OutcomeParams::mc_design(),
            choice: ChoiceParams::mc_design(),
            xk: MixtureSpec::default(),
            covariates: CovariateSpec::default(),
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn params(&self) -> ModelParams {
        ModelParams { outcome: self.outcome.clone(), choice: self.choice }
    }

    pub fn validate(&self) -> Result<()> {
        self.outcome.validate()?;
        self.choice.validate()?;
        self.xk.validate()?;
        if self.covariates.dim() != self.outcome.covariate_dim() {
            return Err(Error::DimensionMismatch(format!(
                "covariate spec has dimension {} but coefficients have {}",
                self.covariates.dim(),
                self.outcome.covariate_dim()
            )));
        }
        Ok(())
    }
}

/// How choices are generated during simulation.
#[derive(Clone, Debug, PartialEq)]
pub enum Assignment {
    /// Draw from the model's choice probabilities.
    Model,
    /// Follow the given zero-based path.
    Forced(Vec<usize>),
    /// Uniform over alternatives, independent of everything else.
    UniformRandom,
}

/// Latent draws kept for oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub xk: f64,
    pub xu: Vec<f64>,
    /// `potential[t][d]` is `Y_t(d)`.
    pub potential: Vec<Vec<f64>>,
    /// Belief entering each period.
    pub beliefs: Vec<PosteriorState>,
    /// Choice probabilities used at each period.
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SimulatedPanel {
    pub data: PanelData,
    pub latent: Vec<LatentRecord>,
}

/// Logit choice probabilities with systematic utility
/// `ρ·E(Y_t(d) | info) + ρκ·1(d = 2)·x*_k`.
pub fn ccp(
    state: &PosteriorState,
    x: &[f64],
    xk: f64,
    t: usize,
    outcome: &OutcomeParams,
    choice: &ChoiceParams,
) -> Result<Vec<f64>> {
    let alts = outcome.alternatives();
    let mut v = Vec::with_capacity(alts);
    for d in 0..alts {
        let (mean, _) = conditional_outcome_moments(state, x, d, xk, outcome, t)?;
        let taste = if d == 1 { choice.kappa * xk } else { 0.0 };
        v.push(choice.rho * (mean + taste));
    }
    Ok(softmax(&v))
}

/// `E[Y^{1−χ}/(1−χ)]` for `log Y ~ N(mu, var)`.
pub fn crra_expected_utility(mu: f64, var: f64, chi: f64) -> Result<f64> {
    if chi == 1.0 {
        return Err(Error::Unsupported("log-utility limit chi = 1".into()));
    }
    let a = 1.0 - chi;
    Ok((mu * a + 0.5 * var * a * a).exp() / a)
}

/// Choice probabilities under CRRA utility with beliefs `N(μ_t + δ·x*_k, Σ_t)`.
pub fn ccp_crra(
    state: &PosteriorState,
    x: &[f64],
    xk: f64,
    t: usize,
    outcome: &OutcomeParams,
    crra: &CrraParams,
) -> Result<Vec<f64>> {
    let biased = PosteriorState {
        mu: state.mu.add_scalar(crra.delta * xk),
        sigma: state.sigma.clone(),
    };
    let alts = outcome.alternatives();
    let mut v = Vec::with_capacity(alts);
    for d in 0..alts {
        let (mean, var) = conditional_outcome_moments(&biased, x, d, xk, outcome, t)?;
        v.push(crra_expected_utility(mean, var, crra.chi)?);
    }
    Ok(softmax(&v))
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn draw_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (d, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return d;
        }
    }
    probs.len() - 1
}

/// RNG for individual `index` under master seed `seed`.
pub fn individual_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

enum Rule<'a> {
    Logit(&'a ChoiceParams),
    Crra(&'a CrraParams),
}

fn simulate_one(
    config: &DgpConfig,
    rule: &Rule,
    assignment: &Assignment,
    index: usize,
) -> Result<(Vec<Observation>, LatentRecord)> {
    let outcome = &config.outcome;
    let horizon = outcome.horizon();
    let alts = outcome.alternatives();
    let mut rng = individual_rng(config.seed, index as u64);
    let x = config.covariates.sample(&mut rng)?;
    let xk = sample_xk(&mut rng, &config.xk);
    let chol = outcome
        .sigma_u_matrix()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("Sigma_u is not positive definite".into()))?;
    let p = outcome.factor_dim();
    let z = nalgebra::DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let xu = chol.l() * z;

    let mut state = PosteriorState::prior(outcome);
    let mut history = Vec::with_capacity(horizon);
    let mut potential = Vec::with_capacity(horizon);
    let mut beliefs = Vec::with_capacity(horizon);
    let mut probs_path = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let ys: Vec<f64> = (0..alts)
            .map(|d| {
                let eps: f64 = rng.sample(StandardNormal);
                outcome.known_mean(&x, t, d, xk)
                    + outcome.lambda_u_vector(t, d).dot(&xu)
                    + outcome.sigma2[t][d].sqrt() * eps
            })
            .collect();
        let probs = match rule {
            Rule::Logit(choice) => ccp(&state, &x, xk, t, outcome, choice)?,
            Rule::Crra(crra) => ccp_crra(&state, &x, xk, t, outcome, crra)?,
        };
        let u_draw = match assignment {
            Assignment::Model => draw_index(&mut rng, &probs),
            Assignment::Forced(path) => {
                let _: f64 = rng.random();
                *path.get(t).ok_or_else(|| {
                    Error::DimensionMismatch("forced path shorter than horizon".into())
                })?
            }
            Assignment::UniformRandom => {
                let u: f64 = rng.random();
                ((u * alts as f64) as usize).min(alts - 1)
            }
        };
        let d = u_draw;
        if d >= alts {
            return Err(Error::InvalidParameter(format!("forced alternative {d} out of range")));
        }
        let y = ys[d];
        let next = posterior_update(&state, y, &x, d, xk, outcome, t)?;
        beliefs.push(state);
        state = next;
        probs_path.push(probs);
        potential.push(ys);
        history.push(Observation { y, d, x: x.clone() });
    }
    let latent = LatentRecord {
        xk,
        xu: xu.iter().cloned().collect(),
        potential,
        beliefs,
        probs: probs_path,
    };
    Ok((history, latent))
}

fn simulate_with_rule(
    config: &DgpConfig,
    n: usize,
    rule: Rule,
    assignment: &Assignment,
) -> Result<SimulatedPanel> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be at least 1".into()));
    }
    let rows: Vec<Result<(Vec<Observation>, LatentRecord)>> = (0..n)
        .into_par_iter()
        .map(|i| simulate_one(config, &rule, assignment, i))
        .collect();
    let mut individuals = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for row in rows {
        let (h, l) = row?;
        individuals.push(h);
        latent.push(l);
    }
    Ok(SimulatedPanel { data: PanelData { individuals }, latent })
}

/// Simulates `n` individuals from the logit expected-utility model.
pub fn simulate_panel(config: &DgpConfig, n: usize) -> Result<SimulatedPanel> {
    simulate_panel_with(config, n, &Assignment::Model)
}

pub fn simulate_panel_with(
    config: &DgpConfig,
    n: usize,
    assignment: &Assignment,
) -> Result<SimulatedPanel> {
    simulate_with_rule(config, n, Rule::Logit(&config.choice), assignment)
}

/// Simulates from the CRRA model; outcomes are the log outcomes.
pub fn simulate_panel_crra(config: &DgpConfig, n: usize) -> Result<SimulatedPanel> {
    let crra = config
        .choice
        .crra
        .ok_or_else(|| Error::InvalidParameter("CRRA block missing from choice parameters".into()))?;
    if crra.chi == 1.0 {
        return Err(Error::Unsupported("log-utility limit chi = 1".into()));
    }
    simulate_with_rule(config, n, Rule::Crra(&crra), &Assignment::Model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_first_period_ccp() {
        let outcome = OutcomeParams::mc_design();
        let prior = PosteriorState::prior(&outcome);
        let p = ccp(&prior, &[1.0, 0.0, 0.0], 0.0, 0, &outcome, &ChoiceParams::mc_design()).unwrap();
        let expected = 1.0 / (1.0 + 0.2f64.exp());
        assert!((p[1] - expected).abs() < 1e-12);
        assert!((p[1] - 0.4502).abs() < 1e-4);
        assert_eq!(p[0] + p[1], 1.0);
    }

    #[test]
    fn zero_scale_is_uniform() {
        let outcome = OutcomeParams::mc_design();
        let prior = PosteriorState::prior(&outcome);
        let choice = ChoiceParams { rho: 0.0, kappa: 0.5, crra: None };
        let p = ccp(&prior, &[1.0, 0.3, 1.0], 1.7, 1, &outcome, &choice).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn draws_respect_truncation() {
        let spec = MixtureSpec::default();
        let mut rng = individual_rng(3, 0);
        for _ in 0..20_000 {
            let x = sample_xk(&mut rng, &spec);
            assert!((0..3).any(|c| {
                let (lo, hi) = spec.bounds(c);
                x >= lo && x <= hi
            }));
        }
    }

    #[test]
    fn mixture_variance_value() {
        let spec = MixtureSpec::default();
        assert!((spec.mean() + 0.03).abs() < 1e-15);
        assert!((spec.variance() - 1.44477).abs() < 1e-4);
        assert!((spec.cdf(10.0) - 1.0).abs() < 1e-14);
        assert_eq!(spec.cdf(-10.0), 0.0);
    }

    #[test]
    fn same_seed_same_panel() {
        let config = DgpConfig { seed: 11, ..DgpConfig::default() };
        let a = simulate_panel(&config, 50).unwrap();
        let b = simulate_panel(&config, 50).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate_panel(&DgpConfig { seed: 12, ..config }, 50).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn crra_rejects_log_utility() {
        let mut config = DgpConfig::default();
        config.choice.crra = Some(CrraParams { chi: 1.0, delta: 0.5 });
        assert!(matches!(simulate_panel_crra(&config, 5), Err(Error::Unsupported(_))));
        assert!(crra_expected_utility(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn crra_zero_bias_matches_unbiased_beliefs() {
        let outcome = OutcomeParams::mc_design();
        let state = PosteriorState::new(
            nalgebra::DVector::from_element(1, 0.4),
            nalgebra::DMatrix::from_element(1, 1, 0.6),
        )
        .unwrap();
        let x = [1.0, 0.2, 0.0];
        let crra = CrraParams { chi: 1.5, delta: 0.0 };
        let p = ccp_crra(&state, &x, 0.8, 1, &outcome, &crra).unwrap();
        let mut v = Vec::new();
        for d in 0..2 {
            let (m, s) = conditional_outcome_moments(&state, &x, d, 0.8, &outcome, 1).unwrap();
            v.push(crra_expected_utility(m, s, 1.5).unwrap());
        }
        let q = softmax(&v);
        assert!((p[0] - q[0]).abs() < 1e-15);
    }

    #[test]
    fn forced_paths_are_followed() {
        let config = DgpConfig::default();
        let sim = simulate_panel_with(&config, 20, &Assignment::Forced(vec![1, 0, 1])).unwrap();
        for h in &sim.data.individuals {
            assert_eq!(h.iter().map(|o| o.d).collect::<Vec<_>>(), vec![1, 0, 1]);
        }
    }
}
