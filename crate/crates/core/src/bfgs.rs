//! BFGS with Armijo backtracking.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BfgsOptions {
    /// Stop once the gradient sup-norm falls below this.
    pub gtol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Cap on the sup-norm of any trial step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { gtol: 1e-6, max_iter: 500, max_backtracks: 40, c1: 1e-4, max_step: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct BfgsReport {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub message: String,
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a: f64, b| a.max(b.abs()))
}

/// Minimizes `f`, which returns the value and gradient. Errors at trial
/// points count as failed steps; an error at `x0` is returned.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::OptimizationFailure("objective is not finite at the start".into()));
    }
    let mut evaluations = 1;
    let mut trace = vec![fx];
    let mut h = identity(n);
    let mut scaled = false;
    let mut iterations = 0;
    let mut message = String::from("iteration limit reached");
    let mut converged = sup_norm(&g) <= opts.gtol;
    if converged {
        message = "gradient tolerance met".into();
    }
    let mut fresh = true;
    while !converged && iterations < opts.max_iter {
        let mut d = matvec(&h, &g);
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = identity(n);
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
            fresh = true;
        }
        let dn = sup_norm(&d);
        let mut step = if dn > opts.max_step { opts.max_step / dn } else { 1.0 };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            evaluations += 1;
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + opts.c1 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if !fresh {
                h = identity(n);
                fresh = true;
                continue;
            }
            message = "line search failed".into();
            if iterations == 0 {
                return Err(Error::OptimizationFailure(format!(
                    "line search failed at the first iteration (f = {fx}, |g| = {:e})",
                    sup_norm(&g)
                )));
            }
            break;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                let gamma = sy / dot(&y, &y);
                h = identity(n);
                h.iter_mut().for_each(|v| *v *= gamma);
                scaled = true;
            }
            update(&mut h, &s, &y, sy);
            fresh = false;
        }
        x = xn;
        fx = fnew;
        g = gn;
        trace.push(fx);
        if sup_norm(&g) <= opts.gtol {
            converged = true;
            message = "gradient tolerance met".into();
        }
    }
    Ok(BfgsReport { x, f: fx, grad: g, iterations, evaluations, converged, trace, message })
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(h: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| dot(&h[i * n..(i + 1) * n], v)).collect()
}

/// Inverse-Hessian update `H ← (I − ρsy')H(I − ρys') + ρss'`.
fn update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = matvec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
