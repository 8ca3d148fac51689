//! Complete-data likelihood with `X*_u` integrated out, and the observed
//! mixture likelihood over a grid for `X*_k`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::RowKernel;
use crate::model::{posterior_path, ChoiceParams, ModelParams, Observation, OutcomeParams, PanelData};
use crate::simulate::{ccp, ccp_crra};

/// Mixture arguments below this value are floored before taking logs.
pub const MIXTURE_FLOOR: f64 = 1e-300;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Conditional mean and covariance of `(Y_1, …, Y_T)` given the choices,
/// covariates and `x*_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParts {
    pub m: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn outcome_mean_cov(w: &[Observation], xk: f64, params: &OutcomeParams) -> Result<GaussianParts> {
    let horizon = w.len();
    if horizon > params.horizon() {
        return Err(Error::DimensionMismatch("history exceeds horizon".into()));
    }
    if w.iter().any(|o| o.d >= params.alternatives()) {
        return Err(Error::InvalidData("alternative index out of range".into()));
    }
    let m = DVector::from_fn(horizon, |t, _| params.known_mean(&w[t].x, t, w[t].d, xk));
    let sigma_u = params.sigma_u_matrix();
    let mut v = DMatrix::from_fn(horizon, horizon, |a, b| {
        let la = params.lambda_u_vector(a, w[a].d);
        let lb = params.lambda_u_vector(b, w[b].d);
        la.dot(&(&sigma_u * lb))
    });
    for t in 0..horizon {
        v[(t, t)] += params.sigma2[t][w[t].d];
    }
    Ok(GaussianParts { m, v })
}

/// Log density of `N(m, v)` at `y`.
pub fn mvn_logpdf(y: &DVector<f64>, m: &DVector<f64>, v: &DMatrix<f64>) -> Result<f64> {
    let n = y.len();
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("covariance is not positive definite".into()))?;
    let r = y - m;
    let z = chol.l().solve_lower_triangular(&r).expect("triangular solve");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok(-0.5 * (n as f64 * LN_2PI + logdet + z.norm_squared()))
}

/// `log ℓ^c(w, x*_k)`: Gaussian density of the outcomes plus the log choice
/// probabilities along the posterior path.
pub fn complete_loglik(
    w: &[Observation],
    xk: f64,
    outcome: &OutcomeParams,
    choice: &ChoiceParams,
) -> Result<f64> {
    let parts = outcome_mean_cov(w, xk, outcome)?;
    let y = DVector::from_fn(w.len(), |t, _| w[t].y);
    let mut total = mvn_logpdf(&y, &parts.m, &parts.v)?;
    let path = posterior_path(w, xk, outcome)?;
    for (t, obs) in w.iter().enumerate() {
        let probs = match &choice.crra {
            None => ccp(&path[t], &obs.x, xk, t, outcome, choice)?,
            Some(c) => ccp_crra(&path[t], &obs.x, xk, t, outcome, c)?,
        };
        total += probs[obs.d].ln();
    }
    Ok(total)
}

/// Row-shifted matrix of `log ℓ^c(w_i, x̄_s)`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodMatrix {
    pub n: usize,
    pub q: usize,
    pub log_l: Vec<f64>,
    pub row_shift: Vec<f64>,
}

impl LikelihoodMatrix {
    /// Shifts each row by its maximum. Rows that are `−∞` everywhere are rejected.
    pub fn from_raw(n: usize, q: usize, mut log_l: Vec<f64>) -> Result<Self> {
        if log_l.len() != n * q || q == 0 {
            return Err(Error::DimensionMismatch("likelihood matrix shape".into()));
        }
        let mut row_shift = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mut log_l[i * q..(i + 1) * q];
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::InvalidData(format!("row {i} has invalid log-likelihood values")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            for v in row.iter_mut() {
                *v -= max;
            }
            row_shift.push(max);
        }
        Ok(LikelihoodMatrix { n, q, log_l, row_shift })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.log_l[i * self.q..(i + 1) * self.q]
    }

    /// Entries `exp(log_l)` in `[0, 1]`, row-major.
    pub fn exp(&self) -> Vec<f64> {
        self.log_l.iter().map(|v| v.exp()).collect()
    }

    /// Adds `c_i` to row `i` of the unshifted matrix.
    pub fn shift_rows(&self, c: &[f64]) -> Self {
        let mut out = self.clone();
        for (s, ci) in out.row_shift.iter_mut().zip(c) {
            *s += ci;
        }
        out
    }
}

pub(crate) fn build_kernels(data: &PanelData, params: &ModelParams) -> Result<Vec<RowKernel>> {
    data.check_compatible(&params.outcome)?;
    let rows: Vec<Result<RowKernel>> = data
        .individuals
        .par_iter()
        .map(|h| RowKernel::new(h, params))
        .collect();
    rows.into_iter().collect()
}

pub(crate) fn matrix_from_kernels(kernels: &[RowKernel], support: &[f64]) -> Result<LikelihoodMatrix> {
    let q = support.len();
    let n = kernels.len();
    let rows: Vec<Vec<f64>> = kernels
        .par_iter()
        .map(|k| support.iter().map(|&x| k.eval(x)).collect())
        .collect();
    let mut raw = Vec::with_capacity(n * q);
    for r in rows {
        raw.extend(r);
    }
    LikelihoodMatrix::from_raw(n, q, raw)
}

/// Matrix of complete log-likelihoods over the grid `support`.
pub fn loglik_matrix(
    data: &PanelData,
    support: &[f64],
    outcome: &OutcomeParams,
    choice: &ChoiceParams,
) -> Result<LikelihoodMatrix> {
    if support.is_empty() {
        return Err(Error::InvalidParameter("empty grid".into()));
    }
    let params = ModelParams { outcome: outcome.clone(), choice: *choice };
    params.validate()?;
    if choice.crra.is_some() {
        data.check_compatible(outcome)?;
        let rows: Vec<Result<Vec<f64>>> = data
            .individuals
            .par_iter()
            .map(|h| support.iter().map(|&x| complete_loglik(h, x, outcome, choice)).collect())
            .collect();
        let mut raw = Vec::with_capacity(data.len() * support.len());
        for r in rows {
            raw.extend(r?);
        }
        return LikelihoodMatrix::from_raw(data.len(), support.len(), raw);
    }
    let kernels = build_kernels(data, &params)?;
    matrix_from_kernels(&kernels, support)
}

/// `Σ_i [shift_i + log Σ_s ω_s exp(logL_is)]`.
pub fn mixture_loglik(l: &LikelihoodMatrix, weights: &[f64]) -> Result<f64> {
    if weights.len() != l.q {
        return Err(Error::DimensionMismatch("weights vs grid".into()));
    }
    let mut total = 0.0;
    for i in 0..l.n {
        let s: f64 = l.row(i).iter().zip(weights).map(|(v, w)| w * v.exp()).sum();
        total += l.row_shift[i] + s.max(MIXTURE_FLOOR).ln();
    }
    Ok(total)
}

pub fn observed_loglik(
    data: &PanelData,
    support: &[f64],
    weights: &[f64],
    outcome: &OutcomeParams,
    choice: &ChoiceParams,
) -> Result<f64> {
    let l = loglik_matrix(data, support, outcome, choice)?;
    mixture_loglik(&l, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_panel, DgpConfig};

    #[test]
    fn design_covariance_entries() {
        let params = OutcomeParams::mc_design();
        let w: Vec<Observation> = (0..3).map(|_| Observation { y: 0.0, d: 0, x: vec![1.0, 0.0, 0.0] }).collect();
        let parts = outcome_mean_cov(&w, 0.0, &params).unwrap();
        assert!((parts.v[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((parts.v[(0, 1)] - 1.575).abs() < 1e-14);
        assert!((parts.v[(1, 1)] - (1.5 * 1.05 * 1.05 + 0.5)).abs() < 1e-14);
        assert!((parts.v[(0, 2)] - 1.5 * 1.01).abs() < 1e-14);
    }

    #[test]
    fn no_factor_gives_diagonal() {
        let mut params = OutcomeParams::mc_design();
        for row in params.lambda_u.iter_mut() {
            for l in row.iter_mut() {
                l[0] = 0.0;
            }
        }
        let w: Vec<Observation> = (0..3).map(|t| Observation { y: 0.0, d: t % 2, x: vec![1.0, 0.5, 1.0] }).collect();
        let parts = outcome_mean_cov(&w, 0.3, &params).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let expected = if a == b { params.sigma2[a][w[a].d] } else { 0.0 };
                assert_eq!(parts.v[(a, b)], expected);
            }
        }
    }

    #[test]
    fn uniform_choices_add_constant() {
        let outcome = OutcomeParams::mc_design();
        let choice = ChoiceParams { rho: 0.0, kappa: 0.0, crra: None };
        let sim = simulate_panel(&DgpConfig::default(), 3).unwrap();
        for h in &sim.data.individuals {
            let parts = outcome_mean_cov(h, 0.2, &outcome).unwrap();
            let y = DVector::from_fn(3, |t, _| h[t].y);
            let gauss = mvn_logpdf(&y, &parts.m, &parts.v).unwrap();
            let full = complete_loglik(h, 0.2, &outcome, &choice).unwrap();
            assert!((full - gauss - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_shifts_and_duplicates() {
        let params = ModelParams::mc_design();
        let sim = simulate_panel(&DgpConfig::default(), 6).unwrap();
        let grid = [-1.0, 0.5, 0.5, 2.0];
        let l = loglik_matrix(&sim.data, &grid, &params.outcome, &params.choice).unwrap();
        for i in 0..l.n {
            let row = l.row(i);
            assert_eq!(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 0.0);
            assert_eq!(row[1], row[2]);
            let direct = complete_loglik(&sim.data.individuals[i], -1.0, &params.outcome, &params.choice).unwrap();
            assert!((row[0] + l.row_shift[i] - direct).abs() < 1e-10);
        }
        let vertex = mixture_loglik(&l, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        let direct: f64 = sim
            .data
            .individuals
            .iter()
            .map(|h| complete_loglik(h, 2.0, &params.outcome, &params.choice).unwrap())
            .sum();
        assert!((vertex - direct).abs() < 1e-9);
        let split = mixture_loglik(&l, &[0.0, 0.5, 0.5, 0.0]).unwrap();
        let point = mixture_loglik(&l, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((split - point).abs() < 1e-10);
    }

    #[test]
    fn all_negative_infinity_row_is_degenerate() {
        let raw = vec![0.0, -1.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!(matches!(LikelihoodMatrix::from_raw(2, 2, raw), Err(Error::DegenerateRow { row: 1 })));
    }
}
