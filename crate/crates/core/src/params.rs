//! Natural and free parameter coordinates.
//!
//! The natural vector lists every entry of `θ^c`. The free vector drops
//! pinned entries and maps constrained ones to the real line: shock variances
//! and `ρ` through logs, `Σ_u` through a log-Cholesky factor.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Offsets of each block in the natural vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NatLayout {
    pub horizon: usize,
    pub alts: usize,
    pub k: usize,
    pub p: usize,
}

impl NatLayout {
    pub fn of(params: &ModelParams) -> Self {
        let o = &params.outcome;
        NatLayout {
            horizon: o.horizon(),
            alts: o.alternatives(),
            k: o.covariate_dim(),
            p: o.factor_dim(),
        }
    }

    pub fn cells(&self) -> usize {
        self.horizon * self.alts
    }

    pub fn beta(&self, t: usize, d: usize, j: usize) -> usize {
        (t * self.alts + d) * self.k + j
    }

    pub fn lambda_k(&self, t: usize, d: usize) -> usize {
        self.cells() * self.k + t * self.alts + d
    }

    pub fn lambda_u(&self, t: usize, d: usize, j: usize) -> usize {
        self.cells() * (self.k + 1) + (t * self.alts + d) * self.p + j
    }

    pub fn sigma2(&self, t: usize, d: usize) -> usize {
        self.cells() * (self.k + 1 + self.p) + t * self.alts + d
    }

    pub fn sigma_u(&self, i: usize, j: usize) -> usize {
        self.cells() * (self.k + 2 + self.p) + i * self.p + j
    }

    pub fn rho(&self) -> usize {
        self.cells() * (self.k + 2 + self.p) + self.p * self.p
    }

    pub fn kappa(&self) -> usize {
        self.rho() + 1
    }

    pub fn len(&self) -> usize {
        self.kappa() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A free coordinate and how it maps to natural entries.
#[derive(Clone, Debug, PartialEq)]
pub enum Coord {
    Linear(usize),
    /// One log-variance shared by the listed natural `σ²` entries.
    LogSigma2(Vec<usize>),
    LogRho,
    /// Diagonal entry `j` of the Cholesky factor of `Σ_u`, as `2·log L_jj`.
    CholDiag(usize),
    CholOff(usize, usize),
}

#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub nat: NatLayout,
    pub coords: Vec<Coord>,
    pub names: Vec<String>,
    template: ModelParams,
}

impl ParamLayout {
    /// Builds the free layout around `template`, whose pinned entries (and
    /// choice block, when `fixed_choice`) are held at their stored values.
    pub fn new(template: &ModelParams, fixed_choice: bool) -> Result<Self> {
        template.validate()?;
        if template.choice.crra.is_some() {
            return Err(Error::Unsupported("estimation of the CRRA choice model".into()));
        }
        let nat = NatLayout::of(template);
        let norm = &template.outcome.normalization;
        let mut coords = Vec::new();
        let mut names = Vec::new();
        for t in 0..nat.horizon {
            for d in 0..nat.alts {
                for j in 0..nat.k {
                    if !norm.is_beta_pinned(t, d, j) {
                        coords.push(Coord::Linear(nat.beta(t, d, j)));
                        names.push(if j == 0 {
                            format!("alpha_{}_{}", t + 1, d + 1)
                        } else {
                            format!("gamma{}_{}_{}", j, t + 1, d + 1)
                        });
                    }
                }
            }
        }
        for t in 0..nat.horizon {
            for d in 0..nat.alts {
                if !norm.is_lambda_k_pinned(t, d) {
                    coords.push(Coord::Linear(nat.lambda_k(t, d)));
                    names.push(format!("lambda_k_{}_{}", t + 1, d + 1));
                }
            }
        }
        for t in 0..nat.horizon {
            for d in 0..nat.alts {
                for j in 0..nat.p {
                    if !norm.is_lambda_u_pinned(t, d, j) {
                        coords.push(Coord::Linear(nat.lambda_u(t, d, j)));
                        names.push(if nat.p == 1 {
                            format!("lambda_u_{}_{}", t + 1, d + 1)
                        } else {
                            format!("lambda_u{}_{}_{}", j + 1, t + 1, d + 1)
                        });
                    }
                }
            }
        }
        if norm.tie_sigma2_over_time {
            for d in 0..nat.alts {
                coords.push(Coord::LogSigma2((0..nat.horizon).map(|t| nat.sigma2(t, d)).collect()));
                names.push(format!("sigma2_{}", d + 1));
            }
        } else {
            for t in 0..nat.horizon {
                for d in 0..nat.alts {
                    coords.push(Coord::LogSigma2(vec![nat.sigma2(t, d)]));
                    names.push(format!("sigma2_{}_{}", t + 1, d + 1));
                }
            }
        }
        for i in 0..nat.p {
            for j in 0..=i {
                if i == j {
                    coords.push(Coord::CholDiag(i));
                    names.push(if nat.p == 1 { "sigma_u2".to_string() } else { format!("sigma_u_{}_{}", i + 1, j + 1) });
                } else {
                    coords.push(Coord::CholOff(i, j));
                    names.push(format!("sigma_u_{}_{}", i + 1, j + 1));
                }
            }
        }
        if !fixed_choice {
            if !(template.choice.rho > 0.0) {
                return Err(Error::InvalidParameter(
                    "rho must be positive when the choice block is estimated".into(),
                ));
            }
            coords.push(Coord::LogRho);
            names.push("rho".into());
            coords.push(Coord::Linear(nat.kappa()));
            names.push("kappa".into());
        }
        Ok(ParamLayout { nat, coords, names, template: template.clone() })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn template(&self) -> &ModelParams {
        &self.template
    }

    pub fn pack(&self, params: &ModelParams) -> Result<Vec<f64>> {
        params.validate()?;
        if NatLayout::of(params) != self.nat {
            return Err(Error::DimensionMismatch("parameter shape differs from layout".into()));
        }
        let nat = to_natural(params);
        let chol = cholesky_lower(&params.outcome.sigma_u_matrix())?;
        Ok(self
            .coords
            .iter()
            .map(|c| match c {
                Coord::Linear(i) => nat[*i],
                Coord::LogSigma2(ix) => nat[ix[0]].ln(),
                Coord::LogRho => params.choice.rho.ln(),
                Coord::CholDiag(j) => 2.0 * chol[(*j, *j)].ln(),
                Coord::CholOff(i, j) => chol[(*i, *j)],
            })
            .collect())
    }

    pub fn unpack(&self, free: &[f64]) -> Result<ModelParams> {
        if free.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "free vector has length {}, layout expects {}",
                free.len(),
                self.dim()
            )));
        }
        if free.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite free coordinate".into()));
        }
        let mut nat = to_natural(&self.template);
        let p = self.nat.p;
        let mut chol = cholesky_lower(&self.template.outcome.sigma_u_matrix())?;
        let mut rho = self.template.choice.rho;
        for (c, &v) in self.coords.iter().zip(free) {
            match c {
                Coord::Linear(i) => nat[*i] = v,
                Coord::LogSigma2(ix) => {
                    for &i in ix {
                        nat[i] = v.exp();
                    }
                }
                Coord::LogRho => rho = v.exp(),
                Coord::CholDiag(j) => chol[(*j, *j)] = (0.5 * v).exp(),
                Coord::CholOff(i, j) => chol[(*i, *j)] = v,
            }
        }
        let sigma_u = &chol * chol.transpose();
        for i in 0..p {
            for j in 0..p {
                nat[self.nat.sigma_u(i, j)] = 0.5 * (sigma_u[(i, j)] + sigma_u[(j, i)]);
            }
        }
        nat[self.nat.rho()] = rho;
        let params = from_natural(&self.template, &self.nat, &nat);
        params.validate()?;
        Ok(params)
    }

    /// Value on the natural scale behind each free coordinate: `σ²` rather
    /// than its log, `ρ`, and entries of `Σ_u` for its factor coordinates.
    pub fn reported(&self, params: &ModelParams) -> Vec<f64> {
        let nat = to_natural(params);
        let su = &params.outcome.sigma_u;
        self.coords
            .iter()
            .map(|c| match c {
                Coord::Linear(i) => nat[*i],
                Coord::LogSigma2(ix) => nat[ix[0]],
                Coord::LogRho => params.choice.rho,
                Coord::CholDiag(j) => su[*j][*j],
                Coord::CholOff(i, j) => su[*i][*j],
            })
            .collect()
    }

    /// Chain rule from a natural-coordinate gradient to free coordinates.
    pub fn grad_to_free(&self, params: &ModelParams, nat_grad: &[f64]) -> Result<Vec<f64>> {
        let p = self.nat.p;
        let chol = cholesky_lower(&params.outcome.sigma_u_matrix())?;
        let g = DMatrix::from_fn(p, p, |i, j| nat_grad[self.nat.sigma_u(i, j)]);
        let dl = (&g + g.transpose()) * &chol;
        Ok(self
            .coords
            .iter()
            .map(|c| match c {
                Coord::Linear(i) => nat_grad[*i],
                Coord::LogSigma2(ix) => ix
                    .iter()
                    .map(|&i| {
                        let (t, d) = sigma2_cell(&self.nat, i);
                        nat_grad[i] * params.outcome.sigma2[t][d]
                    })
                    .sum(),
                Coord::LogRho => nat_grad[self.nat.rho()] * params.choice.rho,
                Coord::CholDiag(j) => dl[(*j, *j)] * 0.5 * chol[(*j, *j)],
                Coord::CholOff(i, j) => dl[(*i, *j)],
            })
            .collect())
    }
}

fn sigma2_cell(nat: &NatLayout, i: usize) -> (usize, usize) {
    let cell = i - nat.sigma2(0, 0);
    (cell / nat.alts, cell % nat.alts)
}

fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidParameter("Sigma_u is not positive definite".into()))
}

pub fn to_natural(params: &ModelParams) -> Vec<f64> {
    let nat = NatLayout::of(params);
    let o = &params.outcome;
    let mut v = vec![0.0; nat.len()];
    for t in 0..nat.horizon {
        for d in 0..nat.alts {
            for j in 0..nat.k {
                v[nat.beta(t, d, j)] = o.beta[t][d][j];
            }
            v[nat.lambda_k(t, d)] = o.lambda_k[t][d];
            for j in 0..nat.p {
                v[nat.lambda_u(t, d, j)] = o.lambda_u[t][d][j];
            }
            v[nat.sigma2(t, d)] = o.sigma2[t][d];
        }
    }
    for i in 0..nat.p {
        for j in 0..nat.p {
            v[nat.sigma_u(i, j)] = o.sigma_u[i][j];
        }
    }
    v[nat.rho()] = params.choice.rho;
    v[nat.kappa()] = params.choice.kappa;
    v
}

fn from_natural(template: &ModelParams, nat: &NatLayout, v: &[f64]) -> ModelParams {
    let mut params = template.clone();
    let o = &mut params.outcome;
    for t in 0..nat.horizon {
        for d in 0..nat.alts {
            for j in 0..nat.k {
                o.beta[t][d][j] = v[nat.beta(t, d, j)];
            }
            o.lambda_k[t][d] = v[nat.lambda_k(t, d)];
            for j in 0..nat.p {
                o.lambda_u[t][d][j] = v[nat.lambda_u(t, d, j)];
            }
            o.sigma2[t][d] = v[nat.sigma2(t, d)];
        }
    }
    for i in 0..nat.p {
        for j in 0..nat.p {
            o.sigma_u[i][j] = v[nat.sigma_u(i, j)];
        }
    }
    params.choice.rho = v[nat.rho()];
    params.choice.kappa = v[nat.kappa()];
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn design_layout_dimension() {
        let params = ModelParams::mc_design();
        let layout = ParamLayout::new(&params, false).unwrap();
        assert_eq!(layout.dim(), 17 + 5 + 5 + 2 + 1 + 2);
        assert_eq!(layout.names[0], "gamma1_1_1");
        assert_eq!(layout.names[2], "alpha_1_2");
        let fixed = ParamLayout::new(&params, true).unwrap();
        assert_eq!(fixed.dim(), layout.dim() - 2);
    }

    #[test]
    fn round_trip_and_pins() {
        let params = ModelParams::mc_design();
        let layout = ParamLayout::new(&params, false).unwrap();
        let packed = layout.pack(&params).unwrap();
        let back = layout.unpack(&packed).unwrap();
        let again = layout.pack(&back).unwrap();
        for (a, b) in packed.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let v: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let p = layout.unpack(&v).unwrap();
            assert_eq!(p.outcome.beta[0][0][0], 0.0);
            assert_eq!(p.outcome.lambda_u[0][0][0], 1.0);
            assert_eq!(p.outcome.lambda_k[0][1], 1.0);
            let w = layout.pack(&p).unwrap();
            for (a, b) in v.iter().zip(&w) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigma2_packs_to_log() {
        let params = ModelParams::mc_design();
        let layout = ParamLayout::new(&params, false).unwrap();
        let packed = layout.pack(&params).unwrap();
        let i = layout.names.iter().position(|n| n == "sigma2_1").unwrap();
        assert!((packed[i] - 0.5f64.ln()).abs() < 1e-15);
        let j = layout.names.iter().position(|n| n == "sigma_u2").unwrap();
        assert!((packed[j] - 1.5f64.ln()).abs() < 1e-15);
        assert!(layout.unpack(&packed[1..]).is_err());
    }
}
