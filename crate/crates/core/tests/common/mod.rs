//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls the library's numerical kernels.
#![allow(dead_code)]

use learnpanel::model::{ModelParams, Observation, OutcomeParams};
use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

// Gauss–Kronrod 7/15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod quadrature on `[a, b]`. The range is cut into 64
/// panels first so a narrow peak cannot slip between the first 15 nodes.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    const PANELS: usize = 64;
    let h = (b - a) / PANELS as f64;
    (0..PANELS).map(|i| integrate_panel(f, a + i as f64 * h, a + (i + 1) as f64 * h, tol / PANELS as f64)).sum()
}

fn integrate_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth > 40 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth + 1) + rec(f, m, b, 0.5 * tol, depth + 1)
    }
    rec(f, a, b, tol, 0)
}

fn mean_known(o: &OutcomeParams, obs: &Observation, t: usize, xk: f64) -> f64 {
    obs.x.iter().zip(&o.beta[t][obs.d]).map(|(a, b)| a * b).sum::<f64>() + xk * o.lambda_k[t][obs.d]
}

/// `log ℓ^c` for `p = 1` by quadrature over `X*_u`. Beliefs entering each
/// period are also computed by quadrature, then fed to a hand-written logit.
pub fn complete_loglik_quadrature(w: &[Observation], xk: f64, params: &ModelParams) -> f64 {
    let o = &params.outcome;
    let su = o.sigma_u[0][0];
    let sd = su.sqrt();
    let (lo, hi) = (-14.0 * sd, 14.0 * sd);
    let prior = |u: f64| (-0.5 * u * u / su).exp() / (2.0 * std::f64::consts::PI * su).sqrt();
    // Log density of the first `upto` outcomes given u, up to nothing.
    let log_dens = |u: f64, upto: usize| -> f64 {
        (0..upto)
            .map(|t| {
                let obs = &w[t];
                let s2 = o.sigma2[t][obs.d];
                let r = obs.y - mean_known(o, obs, t, xk) - o.lambda_u[t][obs.d][0] * u;
                -0.5 * (r * r / s2 + (2.0 * std::f64::consts::PI * s2).ln())
            })
            .sum()
    };
    // Shift the integrand by its value at the posterior mode to avoid underflow.
    let shift_at = |upto: usize| -> f64 {
        let grid = 4001;
        (0..grid).map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64).map(|u| log_dens(u, upto) + prior(u).ln()).fold(f64::NEG_INFINITY, f64::max)
    };
    let horizon = w.len();
    let c = shift_at(horizon);
    let marginal = integrate(&|u: f64| (log_dens(u, horizon) + prior(u).ln() - c).exp(), lo, hi, 1e-14);
    let mut total = marginal.ln() + c;
    for t in 0..horizon {
        let c = shift_at(t);
        let z = integrate(&|u: f64| (log_dens(u, t) + prior(u).ln() - c).exp(), lo, hi, 1e-14);
        let m1 = integrate(&|u: f64| u * (log_dens(u, t) + prior(u).ln() - c).exp(), lo, hi, 1e-14);
        let mu = m1 / z;
        let v: Vec<f64> = (0..o.alternatives())
            .map(|d| {
                let mean = w[t].x.iter().zip(&o.beta[t][d]).map(|(a, b)| a * b).sum::<f64>()
                    + xk * o.lambda_k[t][d]
                    + mu * o.lambda_u[t][d][0];
                let taste = if d == 1 { params.choice.kappa * xk } else { 0.0 };
                params.choice.rho * (mean + taste)
            })
            .collect();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        total += v[w[t].d] - lse;
    }
    total
}

/// Posterior mean and variance of a scalar `X*_u` after observing
/// `y = a + λu + ε`, `ε ~ N(0, s2)`, under prior `N(m0, v0)`, by a dense
/// trapezoid grid.
pub fn grid_bayes(m0: f64, v0: f64, obs: &[(f64, f64, f64, f64)]) -> (f64, f64) {
    let sd = v0.sqrt();
    let (lo, hi) = (m0 - 20.0 * sd, m0 + 20.0 * sd);
    let n = 40_001;
    let h = (hi - lo) / (n - 1) as f64;
    let logpost = |u: f64| {
        -0.5 * (u - m0) * (u - m0) / v0
            + obs.iter().map(|&(y, a, l, s2)| -0.5 * (y - a - l * u).powi(2) / s2).sum::<f64>()
    };
    let peak = (0..n).map(|i| logpost(lo + i as f64 * h)).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let u = lo + i as f64 * h;
        let wgt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let f = wgt * (logpost(u) - peak).exp();
        z += f;
        m1 += f * u;
        m2 += f * u * u;
    }
    let mean = m1 / z;
    (mean, m2 / z - mean * mean)
}

/// Maximizer over `w ∈ [0, 1]` of `Σ_i log(w·a_i + (1 − w)·b_i)` by bisection
/// on the derivative.
pub fn two_point_weight(a: &[f64], b: &[f64]) -> f64 {
    let deriv = |w: f64| a.iter().zip(b).map(|(x, y)| (x - y) / (w * x + (1.0 - w) * y)).sum::<f64>();
    if deriv(0.0) <= 0.0 {
        return 0.0;
    }
    if deriv(1.0) >= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if deriv(m) > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    0.5 * (lo + hi)
}

/// Central differences of `f` at `x` with relative step `h`.
pub fn central_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let step = h * x[k].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += step;
            xm[k] -= step;
            (f(&xp) - f(&xm)) / (2.0 * step)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Quantile of a normal mixture truncated at `k` standard deviations per
/// component, from its CDF written out directly.
pub fn truncated_mixture_quantile(means: &[f64], vars: &[f64], weights: &[f64], k: f64, alpha: f64) -> f64 {
    let z = std_normal();
    let mass = z.cdf(k) - z.cdf(-k);
    let cdf = |x: f64| -> f64 {
        (0..means.len())
            .map(|c| {
                let s = vars[c].sqrt();
                let u = ((x - means[c]) / s).max(-k).min(k);
                weights[c] * (z.cdf(u) - z.cdf(-k)) / mass
            })
            .sum()
    };
    let (mut lo, mut hi) = (-100.0, 100.0);
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if cdf(m) >= alpha {
            hi = m;
        } else {
            lo = m;
        }
    }
    hi
}

/// Variance of the same truncated mixture by quadrature of its density.
pub fn truncated_mixture_variance(means: &[f64], vars: &[f64], weights: &[f64], k: f64) -> f64 {
    let z = std_normal();
    let mass = z.cdf(k) - z.cdf(-k);
    let moment = |p: i32| -> f64 {
        (0..means.len())
            .map(|c| {
                let s = vars[c].sqrt();
                let f = |x: f64| x.powi(p) * z.pdf((x - means[c]) / s) / s / mass;
                weights[c] * integrate(&f, means[c] - k * s, means[c] + k * s, 1e-14)
            })
            .sum()
    };
    let m = moment(1);
    moment(2) - m * m
}

/// Log density of `N(m, V)` via a hand-rolled Cholesky.
pub fn gaussian_logpdf(y: &[f64], m: &[f64], v: &[Vec<f64>]) -> Option<f64> {
    let n = y.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = v[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        z[i] = (y[i] - m[i] - (0..i).map(|k| l[i][k] * z[k]).sum::<f64>()) / l[i][i];
    }
    let logdet: f64 = (0..n).map(|i| 2.0 * l[i][i].ln()).sum();
    Some(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + z.iter().map(|a| a * a).sum::<f64>()))
}

/// Random Design-shaped parameters with `p = 1`.
pub fn random_params<R: Rng>(rng: &mut R) -> ModelParams {
    let mut p = ModelParams::mc_design();
    let o = &mut p.outcome;
    for t in 0..3 {
        for d in 0..2 {
            for j in 0..3 {
                o.beta[t][d][j] = rng.random_range(-1.0..1.0);
            }
            o.lambda_k[t][d] = rng.random_range(-0.8..1.2);
            o.lambda_u[t][d][0] = rng.random_range(0.2..1.5);
            o.sigma2[t][d] = rng.random_range(0.2..1.5);
        }
    }
    o.beta[0][0][0] = 0.0;
    o.lambda_k[0][1] = 1.0;
    o.lambda_u[0][0][0] = 1.0;
    o.sigma_u[0][0] = rng.random_range(0.3..2.5);
    p.choice.rho = rng.random_range(0.0..3.0);
    p.choice.kappa = rng.random_range(-1.0..1.0);
    p
}
