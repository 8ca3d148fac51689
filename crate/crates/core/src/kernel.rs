//! Per-individual closed form of the complete log-likelihood as a function
//! of `x*_k`, and its analytic derivatives.
//!
//! For fixed `θ^c` and data `w`, the Gaussian part is a quadratic
//! `G0 + G1·x + G2·x²` and every choice utility is affine, `c0 + c1·x`,
//! because the posterior mean of `X*_u` is affine in `x*_k`. Derivatives of
//! `log ℓ^c(w, x)` are therefore spanned by `3 + 2·T·D` vectors that do not
//! depend on `x`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{dot, spd_inverse, ModelParams, Observation};
use crate::params::NatLayout;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug)]
pub struct RowKernel {
    pub g: [f64; 3],
    /// Utility intercepts and slopes, indexed `t*D + d`.
    pub c0: Vec<f64>,
    pub c1: Vec<f64>,
    pub chosen: Vec<usize>,
    alts: usize,
    // Intermediates reused by the derivative basis.
    a0: DVector<f64>,
    a1: DVector<f64>,
    vinv: DMatrix<f64>,
    r0: Vec<f64>,
    pinv: Vec<DMatrix<f64>>,
    am: Vec<DVector<f64>>,
    bm: Vec<DVector<f64>>,
    e0: Vec<f64>,
    e1: Vec<f64>,
}

/// Natural-coordinate derivatives of `G0, G1, G2` and of each `c0, c1`.
#[derive(Clone, Debug)]
pub struct RowBasis {
    pub g: [Vec<f64>; 3],
    pub c0: Vec<Vec<f64>>,
    pub c1: Vec<Vec<f64>>,
}

impl RowBasis {
    /// Number of basis weights expected by [`RowBasis::contract`].
    pub fn weight_len(&self) -> usize {
        3 + 2 * self.c0.len()
    }

    /// `out += Σ_b w_b·basis_b` with weights ordered `g0, g1, g2, c0.., c1..`.
    pub fn contract(&self, w: &[f64], out: &mut [f64]) {
        let cells = self.c0.len();
        for (b, v) in self.g.iter().enumerate() {
            axpy(w[b], v, out);
        }
        for c in 0..cells {
            axpy(w[3 + c], &self.c0[c], out);
            axpy(w[3 + cells + c], &self.c1[c], out);
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    if a == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

impl RowKernel {
    pub fn new(history: &[Observation], params: &ModelParams) -> Result<Self> {
        let o = &params.outcome;
        let choice = &params.choice;
        if choice.crra.is_some() {
            return Err(Error::Unsupported("closed-form kernel for CRRA utilities".into()));
        }
        let horizon = history.len();
        let alts = o.alternatives();
        let p = o.factor_dim();
        let sigma_u = o.sigma_u_matrix();
        let sigma_u_inv = spd_inverse(&sigma_u)
            .ok_or_else(|| Error::InvalidParameter("Sigma_u is not positive definite".into()))?;

        let chosen: Vec<usize> = history.iter().map(|w| w.d).collect();
        let lam = DMatrix::from_fn(p, horizon, |j, t| o.lambda_u[t][chosen[t]][j]);
        let s: Vec<f64> = (0..horizon).map(|t| o.sigma2[t][chosen[t]]).collect();
        let kk = DVector::from_fn(horizon, |t, _| o.lambda_k[t][chosen[t]]);
        let r0: Vec<f64> = history
            .iter()
            .enumerate()
            .map(|(t, w)| w.y - dot(&w.x, &o.beta[t][w.d]))
            .collect();
        let r0v = DVector::from_column_slice(&r0);

        let mut v = lam.transpose() * &sigma_u * &lam;
        for t in 0..horizon {
            v[(t, t)] += s[t];
        }
        let chol = v
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("outcome covariance is not positive definite".into()))?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let vinv = chol.inverse();
        let a0 = &vinv * &r0v;
        let a1 = &vinv * &kk;
        let g = [
            -0.5 * (horizon as f64 * LN_2PI + logdet + r0v.dot(&a0)),
            kk.dot(&a0),
            -0.5 * kk.dot(&a1),
        ];

        let mut precision = sigma_u_inv;
        let mut h = DVector::zeros(p);
        let mut kvec = DVector::zeros(p);
        let cells = horizon * alts;
        let mut c0 = vec![0.0; cells];
        let mut c1 = vec![0.0; cells];
        let mut e0 = vec![0.0; cells];
        let mut e1 = vec![0.0; cells];
        let mut pinv = Vec::with_capacity(horizon);
        let mut am = Vec::with_capacity(horizon);
        let mut bm = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let pi = spd_inverse(&precision)
                .ok_or_else(|| Error::InvalidState("posterior precision is singular".into()))?;
            let a = &pi * &h;
            let b = -(&pi * &kvec);
            for d in 0..alts {
                let lu = o.lambda_u_vector(t, d);
                let taste = if d == 1 { choice.kappa } else { 0.0 };
                let i = t * alts + d;
                e0[i] = dot(&history[t].x, &o.beta[t][d]) + a.dot(&lu);
                e1[i] = o.lambda_k[t][d] + b.dot(&lu) + taste;
                c0[i] = choice.rho * e0[i];
                c1[i] = choice.rho * e1[i];
            }
            let l = lam.column(t);
            precision += l * l.transpose() / s[t];
            h += l * (r0[t] / s[t]);
            kvec += l * (kk[t] / s[t]);
            pinv.push(pi);
            am.push(a);
            bm.push(b);
        }
        Ok(RowKernel {
            g,
            c0,
            c1,
            chosen,
            alts,
            a0,
            a1,
            vinv,
            r0,
            pinv,
            am,
            bm,
            e0,
            e1,
        })
    }

    pub fn horizon(&self) -> usize {
        self.chosen.len()
    }

    pub fn alternatives(&self) -> usize {
        self.alts
    }

    /// Gaussian part of `log ℓ^c` at `x`.
    pub fn gaussian(&self, x: f64) -> f64 {
        self.g[0] + x * (self.g[1] + x * self.g[2])
    }

    /// `log ℓ^c(w, x)`.
    pub fn eval(&self, x: f64) -> f64 {
        let mut total = self.gaussian(x);
        let alts = self.alts;
        for (t, &dt) in self.chosen.iter().enumerate() {
            let base = t * alts;
            let chosen_v = self.c0[base + dt] + self.c1[base + dt] * x;
            if alts == 2 {
                let other = 1 - dt;
                let diff = self.c0[base + other] + self.c1[base + other] * x - chosen_v;
                total -= softplus(diff);
            } else {
                let mut max = f64::NEG_INFINITY;
                for d in 0..alts {
                    max = max.max(self.c0[base + d] + self.c1[base + d] * x);
                }
                let mut acc = 0.0;
                for d in 0..alts {
                    acc += (self.c0[base + d] + self.c1[base + d] * x - max).exp();
                }
                total += chosen_v - max - acc.ln();
            }
        }
        total
    }

    /// Writes `1(d = d_t) − P_t(d | x)` for every cell into `out`.
    pub fn choice_residuals(&self, x: f64, out: &mut [f64]) {
        let alts = self.alts;
        for (t, &dt) in self.chosen.iter().enumerate() {
            let base = t * alts;
            let mut max = f64::NEG_INFINITY;
            for d in 0..alts {
                max = max.max(self.c0[base + d] + self.c1[base + d] * x);
            }
            let mut acc = 0.0;
            for d in 0..alts {
                let e = (self.c0[base + d] + self.c1[base + d] * x - max).exp();
                out[base + d] = e;
                acc += e;
            }
            for d in 0..alts {
                out[base + d] = if d == dt { 1.0 } else { 0.0 } - out[base + d] / acc;
            }
        }
    }

    /// Basis weights of `∇ log ℓ^c(w, x)` for a single `x`.
    pub fn point_weights(&self, x: f64, out: &mut [f64]) {
        let cells = self.c0.len();
        out[0] = 1.0;
        out[1] = x;
        out[2] = x * x;
        self.choice_residuals(x, &mut out[3..3 + cells]);
        for c in 0..cells {
            out[3 + cells + c] = x * out[3 + c];
        }
    }

    /// Natural-coordinate derivative basis.
    pub fn basis(&self, history: &[Observation], params: &ModelParams, nat: &NatLayout) -> RowBasis {
        let o = &params.outcome;
        let rho = params.choice.rho;
        let horizon = self.horizon();
        let alts = self.alts;
        let p = nat.p;
        let len = nat.len();
        let cells = horizon * alts;
        let mut g = [vec![0.0; len], vec![0.0; len], vec![0.0; len]];
        let mut c0 = vec![vec![0.0; len]; cells];
        let mut c1 = vec![vec![0.0; len]; cells];

        let sigma_u = o.sigma_u_matrix();
        let sigma_u_inv = spd_inverse(&sigma_u).expect("validated Sigma_u");
        let lam = DMatrix::from_fn(p, horizon, |j, t| o.lambda_u[t][self.chosen[t]][j]);
        let s: Vec<f64> = (0..horizon).map(|t| o.sigma2[t][self.chosen[t]]).collect();
        let kk: Vec<f64> = (0..horizon).map(|t| o.lambda_k[t][self.chosen[t]]).collect();
        let su_lam = &sigma_u * &lam;

        for t in 0..horizon {
            let dt = self.chosen[t];
            let x = &history[t].x;
            let (a0t, a1t) = (self.a0[t], self.a1[t]);
            for (j, &xj) in x.iter().enumerate() {
                let i = nat.beta(t, dt, j);
                g[0][i] += a0t * xj;
                g[1][i] -= a1t * xj;
            }
            let i = nat.lambda_k(t, dt);
            g[1][i] += a0t;
            g[2][i] -= a1t;
            let i = nat.sigma2(t, dt);
            g[0][i] += 0.5 * (a0t * a0t - self.vinv[(t, t)]);
            g[1][i] -= a0t * a1t;
            g[2][i] += 0.5 * a1t * a1t;
            let vcol = self.vinv.column(t);
            let w0 = &su_lam * (&self.a0 * a0t - vcol);
            let w1 = &su_lam * (&self.a0 * a1t + &self.a1 * a0t);
            let w2 = &su_lam * (&self.a1 * a1t);
            for j in 0..p {
                let i = nat.lambda_u(t, dt, j);
                g[0][i] += w0[j];
                g[1][i] -= w1[j];
                g[2][i] += w2[j];
            }
        }
        let u0 = &lam * &self.a0;
        let u1 = &lam * &self.a1;
        let lvl = &lam * &self.vinv * lam.transpose();
        for i in 0..p {
            for j in 0..p {
                let k = nat.sigma_u(i, j);
                g[0][k] += 0.5 * (u0[i] * u0[j] - lvl[(i, j)]);
                g[1][k] -= 0.5 * (u0[i] * u1[j] + u1[i] * u0[j]);
                g[2][k] += 0.5 * u1[i] * u1[j];
            }
        }

        for t in 0..horizon {
            let x = &history[t].x;
            let am = &self.am[t];
            let bm = &self.bm[t];
            let su_am = &sigma_u_inv * am;
            let su_bm = &sigma_u_inv * bm;
            for d in 0..alts {
                let cell = t * alts + d;
                let gc0 = &mut c0[cell];
                let gc1 = &mut c1[cell];
                for (j, &xj) in x.iter().enumerate() {
                    gc0[nat.beta(t, d, j)] += rho * xj;
                }
                gc1[nat.lambda_k(t, d)] += rho;
                for j in 0..p {
                    gc0[nat.lambda_u(t, d, j)] += rho * am[j];
                    gc1[nat.lambda_u(t, d, j)] += rho * bm[j];
                }
                gc0[nat.rho()] += self.e0[cell];
                gc1[nat.rho()] += self.e1[cell];
                if d == 1 {
                    gc1[nat.kappa()] += rho;
                }

                let lu = o.lambda_u_vector(t, d);
                let z = &self.pinv[t] * &lu;
                for sp in 0..t {
                    let ds = self.chosen[sp];
                    let l = lam.column(sp);
                    let zl = z.dot(&l);
                    let ss = s[sp];
                    let res_a = self.r0[sp] - l.dot(am);
                    let res_b = kk[sp] + l.dot(bm);
                    for (j, &xj) in history[sp].x.iter().enumerate() {
                        gc0[nat.beta(sp, ds, j)] -= rho * zl * xj / ss;
                    }
                    gc1[nat.lambda_k(sp, ds)] -= rho * zl / ss;
                    let i = nat.sigma2(sp, ds);
                    gc0[i] -= rho * zl * res_a / (ss * ss);
                    gc1[i] += rho * zl * res_b / (ss * ss);
                    for j in 0..p {
                        let i = nat.lambda_u(sp, ds, j);
                        gc0[i] += rho * (z[j] * res_a - zl * am[j]) / ss;
                        gc1[i] += rho * (-z[j] * res_b - zl * bm[j]) / ss;
                    }
                }
                let su_z = &sigma_u_inv * &z;
                for i in 0..p {
                    for j in 0..p {
                        let k = nat.sigma_u(i, j);
                        gc0[k] += 0.5 * rho * (su_z[i] * su_am[j] + su_am[i] * su_z[j]);
                        gc1[k] += 0.5 * rho * (su_z[i] * su_bm[j] + su_bm[i] * su_z[j]);
                    }
                }
            }
        }
        RowBasis { g, c0, c1 }
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::complete_loglik;
    use crate::params::to_natural;
    use crate::simulate::{simulate_panel, DgpConfig};

    fn perturbed(params: &ModelParams, nat: &NatLayout, i: usize, h: f64) -> ModelParams {
        let mut v = to_natural(params);
        v[i] += h;
        let mut q = params.clone();
        let o = &mut q.outcome;
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
        for a in 0..nat.p {
            for b in 0..nat.p {
                o.sigma_u[a][b] = v[nat.sigma_u(a, b)];
            }
        }
        q.choice.rho = v[nat.rho()];
        q.choice.kappa = v[nat.kappa()];
        q
    }

    #[test]
    fn kernel_matches_direct_evaluation() {
        let params = ModelParams::mc_design();
        let sim = simulate_panel(&DgpConfig { seed: 4, ..DgpConfig::default() }, 5).unwrap();
        for h in &sim.data.individuals {
            let k = RowKernel::new(h, &params).unwrap();
            for &x in &[-2.0, -0.3, 0.0, 1.1, 2.5] {
                let direct = complete_loglik(h, x, &params.outcome, &params.choice).unwrap();
                assert!((k.eval(x) - direct).abs() < 1e-10, "{} vs {}", k.eval(x), direct);
            }
        }
    }

    #[test]
    fn basis_matches_finite_differences() {
        let params = ModelParams::mc_design();
        let nat = NatLayout::of(&params);
        let sim = simulate_panel(&DgpConfig { seed: 9, ..DgpConfig::default() }, 3).unwrap();
        for h in &sim.data.individuals {
            let k = RowKernel::new(h, &params).unwrap();
            let basis = k.basis(h, &params, &nat);
            for &x in &[-1.3, 0.4, 1.9] {
                let mut w = vec![0.0; basis.weight_len()];
                k.point_weights(x, &mut w);
                let mut grad = vec![0.0; nat.len()];
                basis.contract(&w, &mut grad);
                for i in 0..nat.len() {
                    // Sigma_u entries are perturbed symmetrically below.
                    if nat.p == 1 || i < nat.sigma_u(0, 0) || i > nat.sigma_u(nat.p - 1, nat.p - 1) {
                        let step = 1e-6;
                        let up = RowKernel::new(h, &perturbed(&params, &nat, i, step)).unwrap().eval(x);
                        let dn = RowKernel::new(h, &perturbed(&params, &nat, i, -step)).unwrap().eval(x);
                        let fd = (up - dn) / (2.0 * step);
                        assert!(
                            (fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0),
                            "coordinate {i}: fd {fd} analytic {}",
                            grad[i]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-16);
    }
}
