//! Outcome and choice model types, and the conjugate Gaussian belief recursion.
//!
//! Potential outcomes follow
//! `Y_t(d) = x_t'β_{t,d} + x*_k λ^k_{t,d} + (x*_u)'λ^u_{t,d} + ε_t(d)`,
//! with `X*_u ~ N(0, Σ_u)` unknown to the agent and `ε_t(d) ~ N(0, σ²_{t,d})`.
//! The agent's belief about `X*_u` entering period `t` is `N(μ_t, Σ_t)`.
//!
//! Periods and alternatives are zero-based throughout the library.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible shock variance.
pub const MIN_SIGMA2: f64 = 1e-12;

/// A coefficient pinned by the location-scale normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pin {
    /// Entry `j` of `β_{t,d}` (entry 0 is the intercept).
    Beta { t: usize, d: usize, j: usize },
    LambdaK { t: usize, d: usize },
    /// Entry `j` of `λ^u_{t,d}`.
    LambdaU { t: usize, d: usize, j: usize },
}

/// Which coefficients are held fixed, and whether shock variances are shared
/// across periods (`σ²_{t,d} = σ²_d`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub pins: Vec<Pin>,
    #[serde(default)]
    pub tie_sigma2_over_time: bool,
}

impl Normalization {
    /// The entries fixed in the baseline design: `α_{1,1} = 0`, `λ^u_{1,1} = 1`
    /// and `λ^k_{1,2} = 1` (one-based labels), with `σ²` varying by alternative only.
    pub fn baseline() -> Self {
        Normalization {
            pins: vec![
                Pin::Beta { t: 0, d: 0, j: 0 },
                Pin::LambdaU { t: 0, d: 0, j: 0 },
                Pin::LambdaK { t: 0, d: 1 },
            ],
            tie_sigma2_over_time: true,
        }
    }

    pub fn is_beta_pinned(&self, t: usize, d: usize, j: usize) -> bool {
        self.pins.contains(&Pin::Beta { t, d, j })
    }

    pub fn is_lambda_k_pinned(&self, t: usize, d: usize) -> bool {
        self.pins.contains(&Pin::LambdaK { t, d })
    }

    pub fn is_lambda_u_pinned(&self, t: usize, d: usize, j: usize) -> bool {
        self.pins.contains(&Pin::LambdaU { t, d, j })
    }
}

/// Outcome-equation parameters for every `(t, d)` cell plus the prior
/// variance `Σ_u` of the unknown factor.
///
/// Indexing is `[t][d]`. Pinned entries keep whatever value is stored here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    pub beta: Vec<Vec<Vec<f64>>>,
    pub lambda_k: Vec<Vec<f64>>,
    pub lambda_u: Vec<Vec<Vec<f64>>>,
    pub sigma2: Vec<Vec<f64>>,
    /// Row-major `p × p` prior variance of `X*_u`.
    pub sigma_u: Vec<Vec<f64>>,
    pub normalization: Normalization,
}

impl OutcomeParams {
    pub fn new(
        beta: Vec<Vec<Vec<f64>>>,
        lambda_k: Vec<Vec<f64>>,
        lambda_u: Vec<Vec<Vec<f64>>>,
        sigma2: Vec<Vec<f64>>,
        sigma_u: Vec<Vec<f64>>,
        normalization: Normalization,
    ) -> Result<Self> {
        let params = OutcomeParams {
            beta,
            lambda_k,
            lambda_u,
            sigma2,
            sigma_u,
            normalization,
        };
        params.validate()?;
        Ok(params)
    }

    /// Parameter values of the baseline simulation design (`T = 3`, two
    /// alternatives, covariates `(1, X₁, X₂)`, scalar `X*_u`).
    pub fn mc_design() -> Self {
        let alpha = [[0.0, -0.1], [0.1, -0.22], [0.2, -0.33]];
        let gamma1 = [[-0.5, 0.13], [-0.8, 0.89], [0.12, 0.32]];
        let gamma2 = [[-0.58, 0.71], [-0.83, -0.36], [-0.83, -0.36]];
        let lambda_u = [[1.0, 0.4], [1.05, 0.36], [1.01, 0.44]];
        let lambda_k = [[0.3, 1.0], [0.35, 1.05], [0.33, 1.02]];
        let sigma2 = [0.5, 0.7];
        let beta = (0..3)
            .map(|t| {
                (0..2)
                    .map(|d| vec![alpha[t][d], gamma1[t][d], gamma2[t][d]])
                    .collect()
            })
            .collect();
        OutcomeParams {
            beta,
            lambda_k: lambda_k.iter().map(|r| r.to_vec()).collect(),
            lambda_u: lambda_u
                .iter()
                .map(|r| r.iter().map(|&l| vec![l]).collect())
                .collect(),
            sigma2: (0..3).map(|_| sigma2.to_vec()).collect(),
            sigma_u: vec![vec![1.5]],
            normalization: Normalization::baseline(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.beta.len()
    }

    pub fn alternatives(&self) -> usize {
        self.beta.first().map_or(0, |r| r.len())
    }

    pub fn factor_dim(&self) -> usize {
        self.sigma_u.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.beta
            .first()
            .and_then(|r| r.first())
            .map_or(0, |b| b.len())
    }

    pub fn sigma_u_matrix(&self) -> DMatrix<f64> {
        let p = self.factor_dim();
        DMatrix::from_fn(p, p, |i, j| self.sigma_u[i][j])
    }

    pub fn lambda_u_vector(&self, t: usize, d: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.lambda_u[t][d])
    }

    /// `x'β_{t,d} + xk·λ^k_{t,d}`.
    pub fn known_mean(&self, x: &[f64], t: usize, d: usize, xk: f64) -> f64 {
        dot(x, &self.beta[t][d]) + xk * self.lambda_k[t][d]
    }

    pub fn validate(&self) -> Result<()> {
        let horizon = self.horizon();
        let alts = self.alternatives();
        let p = self.factor_dim();
        let k = self.covariate_dim();
        if horizon == 0 || alts == 0 || p == 0 || k == 0 {
            return Err(Error::InvalidParameter(
                "horizon, alternatives, factor and covariate dimensions must be positive".into(),
            ));
        }
        let shape_ok = self.lambda_k.len() == horizon
            && self.lambda_u.len() == horizon
            && self.sigma2.len() == horizon
            && (0..horizon).all(|t| {
                self.beta[t].len() == alts
                    && self.lambda_k[t].len() == alts
                    && self.lambda_u[t].len() == alts
                    && self.sigma2[t].len() == alts
                    && self.beta[t].iter().all(|b| b.len() == k)
                    && self.lambda_u[t].iter().all(|l| l.len() == p)
            })
            && self.sigma_u.iter().all(|r| r.len() == p);
        if !shape_ok {
            return Err(Error::DimensionMismatch(
                "outcome parameter arrays are not rectangular".into(),
            ));
        }
        let finite = self.beta.iter().flatten().flatten().all(|v| v.is_finite())
            && self.lambda_k.iter().flatten().all(|v| v.is_finite())
            && self.lambda_u.iter().flatten().flatten().all(|v| v.is_finite())
            && self.sigma_u.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("non-finite coefficient".into()));
        }
        for (t, row) in self.sigma2.iter().enumerate() {
            for (d, &s) in row.iter().enumerate() {
                if !(s > MIN_SIGMA2) || !s.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "sigma2[{t}][{d}] = {s} must exceed {MIN_SIGMA2}"
                    )));
                }
            }
        }
        check_spd(&self.sigma_u_matrix())
            .map_err(|e| Error::InvalidParameter(format!("Sigma_u: {e}")))?;
        for pin in &self.normalization.pins {
            let in_range = match *pin {
                Pin::Beta { t, d, j } => t < horizon && d < alts && j < k,
                Pin::LambdaK { t, d } => t < horizon && d < alts,
                Pin::LambdaU { t, d, j } => t < horizon && d < alts && j < p,
            };
            if !in_range {
                return Err(Error::InvalidParameter(format!("pin {pin:?} out of range")));
            }
        }
        Ok(())
    }
}

/// Parameters of the CRRA expected-utility choice rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrraParams {
    /// Relative risk aversion; must differ from 1.
    pub chi: f64,
    /// Belief bias: the agent's subjective mean of `X*_u` is `μ_t + δ·x*_k`.
    pub delta: f64,
}

/// Choice-rule parameters. With `crra` unset the systematic utility is
/// `ρ·E(Y_t(d) | info) + ρκ·1(d = 2)·x*_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceParams {
    pub rho: f64,
    pub kappa: f64,
    #[serde(default)]
    pub crra: Option<CrraParams>,
}

impl ChoiceParams {
    pub fn mc_design() -> Self {
        ChoiceParams {
            rho: 2.0,
            kappa: 0.5,
            crra: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidParameter(format!("rho = {} must be >= 0", self.rho)));
        }
        if !self.kappa.is_finite() {
            return Err(Error::InvalidParameter("kappa must be finite".into()));
        }
        if let Some(c) = self.crra {
            if !c.chi.is_finite() || !c.delta.is_finite() {
                return Err(Error::InvalidParameter("CRRA parameters must be finite".into()));
            }
        }
        Ok(())
    }
}

/// The finite-dimensional parameter `θ^c`: outcome and choice blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub outcome: OutcomeParams,
    pub choice: ChoiceParams,
}

impl ModelParams {
    pub fn mc_design() -> Self {
        ModelParams {
            outcome: OutcomeParams::mc_design(),
            choice: ChoiceParams::mc_design(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.outcome.validate()?;
        self.choice.validate()
    }
}

/// Gaussian belief `N(μ, Σ)` over `X*_u`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorState {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl PosteriorState {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let state = PosteriorState { mu, sigma };
        state.validate()?;
        Ok(state)
    }

    /// The period-1 belief `(0, Σ_u)`.
    pub fn prior(params: &OutcomeParams) -> Self {
        let p = params.factor_dim();
        PosteriorState {
            mu: DVector::zeros(p),
            sigma: params.sigma_u_matrix(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.nrows() != self.mu.len() || self.sigma.ncols() != self.mu.len() {
            return Err(Error::InvalidState("mean and variance dimensions differ".into()));
        }
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite mean".into()));
        }
        check_spd(&self.sigma).map_err(Error::InvalidState)
    }
}

/// One period of observed data: outcome, chosen alternative and covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    /// Zero-based alternative index.
    pub d: usize,
    /// Covariates; entry 0 is the constant.
    pub x: Vec<f64>,
}

/// Balanced panel of individual histories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    pub individuals: Vec<Vec<Observation>>,
}

impl PanelData {
    pub fn new(individuals: Vec<Vec<Observation>>) -> Result<Self> {
        let data = PanelData { individuals };
        data.validate()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.individuals.first().map_or(0, |h| h.len())
    }

    pub fn covariate_dim(&self) -> usize {
        self.individuals
            .first()
            .and_then(|h| h.first())
            .map_or(0, |o| o.x.len())
    }

    pub fn validate(&self) -> Result<()> {
        let horizon = self.horizon();
        let k = self.covariate_dim();
        for (i, history) in self.individuals.iter().enumerate() {
            if history.len() != horizon {
                return Err(Error::InvalidData(format!(
                    "individual {i} has {} periods, expected {horizon}",
                    history.len()
                )));
            }
            for obs in history {
                if obs.x.len() != k {
                    return Err(Error::InvalidData(format!(
                        "individual {i} has covariate dimension {}, expected {k}",
                        obs.x.len()
                    )));
                }
                if !obs.y.is_finite() || obs.x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidData(format!("individual {i} has non-finite values")));
                }
            }
        }
        Ok(())
    }

    /// Checks the panel against a parameter shape.
    pub fn check_compatible(&self, params: &OutcomeParams) -> Result<()> {
        if self.horizon() != params.horizon() {
            return Err(Error::DimensionMismatch(format!(
                "panel horizon {} but parameters have {}",
                self.horizon(),
                params.horizon()
            )));
        }
        if self.covariate_dim() != params.covariate_dim() {
            return Err(Error::DimensionMismatch(format!(
                "panel covariate dimension {} but parameters have {}",
                self.covariate_dim(),
                params.covariate_dim()
            )));
        }
        let alts = params.alternatives();
        if let Some((i, _)) = self
            .individuals
            .iter()
            .enumerate()
            .find(|(_, h)| h.iter().any(|o| o.d >= alts))
        {
            return Err(Error::InvalidData(format!(
                "individual {i} chose an alternative outside 0..{alts}"
            )));
        }
        Ok(())
    }
}

/// One-step Bayesian update of the belief after observing `y` under
/// alternative `d` in period `t`.
///
/// Uses the gain form `Σ' = Σ - Σλλ'Σ / (λ'Σλ + σ²)`, which is algebraically
/// the precision update `Σ' = (Σ⁻¹ + λλ'/σ²)⁻¹`, and leaves the state
/// untouched when `λ = 0`.
pub fn posterior_update(
    state: &PosteriorState,
    y: f64,
    x: &[f64],
    d: usize,
    xk: f64,
    params: &OutcomeParams,
    t: usize,
) -> Result<PosteriorState> {
    state.validate()?;
    check_cell(params, t, d)?;
    let s2 = params.sigma2[t][d];
    if !(s2 > MIN_SIGMA2) {
        return Err(Error::InvalidParameter(format!("sigma2[{t}][{d}] = {s2}")));
    }
    let lambda = params.lambda_u_vector(t, d);
    if lambda.len() != state.dim() {
        return Err(Error::DimensionMismatch("factor loading vs state".into()));
    }
    let residual = y - params.known_mean(x, t, d, xk);
    let gain_dir = &state.sigma * &lambda;
    let innovation_var = lambda.dot(&gain_dir) + s2;
    let innovation = residual - lambda.dot(&state.mu);
    let mu = &state.mu + &gain_dir * (innovation / innovation_var);
    let mut sigma = &state.sigma - &gain_dir * gain_dir.transpose() / innovation_var;
    symmetrize(&mut sigma);
    Ok(PosteriorState { mu, sigma })
}

/// Beliefs entering each period along an observed history: element `t` is the
/// belief entering period `t`, element 0 is the prior.
pub fn posterior_path(
    history: &[Observation],
    xk: f64,
    params: &OutcomeParams,
) -> Result<Vec<PosteriorState>> {
    if history.len() > params.horizon() {
        return Err(Error::DimensionMismatch(format!(
            "history of length {} exceeds horizon {}",
            history.len(),
            params.horizon()
        )));
    }
    let mut path = Vec::with_capacity(history.len() + 1);
    path.push(PosteriorState::prior(params));
    for (t, obs) in history.iter().enumerate() {
        let next = posterior_update(&path[t], obs.y, &obs.x, obs.d, xk, params, t)?;
        path.push(next);
    }
    Ok(path)
}

/// Non-recursive evaluation of the belief after the whole history:
/// `Σ = (Σ_u⁻¹ + Σ_s λ_sλ_s'/σ²_s)⁻¹`, `μ = Σ·Σ_s λ_s r_s/σ²_s`.
pub fn posterior_closed_form(
    history: &[Observation],
    xk: f64,
    params: &OutcomeParams,
) -> Result<PosteriorState> {
    if history.len() > params.horizon() {
        return Err(Error::DimensionMismatch("history exceeds horizon".into()));
    }
    let mut precision = spd_inverse(&params.sigma_u_matrix())
        .ok_or_else(|| Error::InvalidParameter("Sigma_u is not positive definite".into()))?;
    let mut info = DVector::zeros(params.factor_dim());
    for (t, obs) in history.iter().enumerate() {
        check_cell(params, t, obs.d)?;
        let lambda = params.lambda_u_vector(t, obs.d);
        let s2 = params.sigma2[t][obs.d];
        let residual = obs.y - params.known_mean(&obs.x, t, obs.d, xk);
        precision += &lambda * lambda.transpose() / s2;
        info += &lambda * (residual / s2);
    }
    let sigma = spd_inverse(&precision)
        .ok_or_else(|| Error::InvalidState("posterior precision is singular".into()))?;
    let mu = &sigma * info;
    Ok(PosteriorState { mu, sigma })
}

/// Mean and variance of `Y_t(d)` given the belief entering `t` and `x*_k`:
/// mean `x'β + xk·λ^k + μ'λ^u`, variance `λ^u'Σλ^u + σ²`.
pub fn conditional_outcome_moments(
    state: &PosteriorState,
    x: &[f64],
    d: usize,
    xk: f64,
    params: &OutcomeParams,
    t: usize,
) -> Result<(f64, f64)> {
    check_cell(params, t, d)?;
    let lambda = params.lambda_u_vector(t, d);
    if lambda.len() != state.dim() {
        return Err(Error::DimensionMismatch("factor loading vs state".into()));
    }
    let mean = params.known_mean(x, t, d, xk) + lambda.dot(&state.mu);
    let var = lambda.dot(&(&state.sigma * &lambda)) + params.sigma2[t][d];
    Ok((mean, var))
}

fn check_cell(params: &OutcomeParams, t: usize, d: usize) -> Result<()> {
    if t >= params.horizon() || d >= params.alternatives() {
        return Err(Error::DimensionMismatch(format!(
            "cell (t={t}, d={d}) outside {}x{}",
            params.horizon(),
            params.alternatives()
        )));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut inv = m.clone().cholesky()?.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

pub(crate) fn check_spd(m: &DMatrix<f64>) -> std::result::Result<(), String> {
    if !m.is_square() {
        return Err("matrix is not square".into());
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err("matrix is not symmetric".into());
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err("matrix has non-finite entries".into());
    }
    match m.clone().cholesky() {
        Some(_) => Ok(()),
        None => Err("matrix is not positive definite".into()),
    }
}
