//! Mixture weights on a fixed grid: maximize `Σ_i log (Lω)_i` over the unit
//! simplex and certify the result through its KKT conditions.
//!
//! With `g_s(ω) = (1/n) Σ_i L_is / (Lω)_i`, the optimum satisfies `g_s ≤ 1`
//! for every support point with equality wherever `ω_s > 0`. The reported
//! dual is `λ_s = g_s − 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{LikelihoodMatrix, MIXTURE_FLOOR};

pub const KKT_TOL: f64 = 1e-8;
pub const POSITIVE_WEIGHT: f64 = 1e-10;

/// Support points and simplex weights of a discrete distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMixture {
    pub support: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GridMixture {
    pub fn new(support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mix = GridMixture { support, weights };
        mix.validate()?;
        Ok(mix)
    }

    pub fn uniform(support: Vec<f64>) -> Result<Self> {
        let q = support.len();
        GridMixture::new(support, vec![1.0 / q as f64; q])
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() || self.weights.len() != self.support.len() {
            return Err(Error::InvalidParameter("support and weights must be nonempty and equal length".into()));
        }
        if self.support.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("support must be strictly increasing".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidParameter("weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!("weights sum to {total}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerSolution {
    pub weights: Vec<f64>,
    pub dual: Vec<f64>,
    /// `Σ_i log (Lω)_i` on the row-shifted matrix.
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub em_sweeps: usize,
    pub certified: bool,
}

impl InnerSolution {
    /// Indices with weight above the positivity threshold.
    pub fn active(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > POSITIVE_WEIGHT)
            .map(|(s, _)| s)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    /// EM stops handing over once the residual drops below this.
    pub em_switch: f64,
    /// Defaults to `10·q + 500` when unset.
    pub max_em: Option<usize>,
    pub max_sqp: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: KKT_TOL, em_switch: 1e-2, max_em: None, max_sqp: 200 }
    }
}

/// Dense exponentiated likelihood matrix.
struct Dense {
    n: usize,
    q: usize,
    /// Row-major `n × q`.
    l: Vec<f64>,
}

impl Dense {
    fn new(m: &LikelihoodMatrix) -> Self {
        Dense { n: m.n, q: m.q, l: m.exp() }
    }

    fn mix(&self, w: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let row = &self.l[i * self.q..(i + 1) * self.q];
                row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().max(MIXTURE_FLOOR)
            })
            .collect()
    }

    fn ratios(&self, lw: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.q];
        for (i, lwi) in lw.iter().enumerate() {
            let inv = 1.0 / lwi;
            let row = &self.l[i * self.q..(i + 1) * self.q];
            for (gs, ls) in g.iter_mut().zip(row) {
                *gs += ls * inv;
            }
        }
        let n = self.n as f64;
        g.iter_mut().for_each(|v| *v /= n);
        g
    }

    fn objective(lw: &[f64]) -> f64 {
        lw.iter().map(|v| v.ln()).sum()
    }
}

fn residual_from(g: &[f64], w: &[f64]) -> f64 {
    g.iter()
        .zip(w)
        .map(|(&gs, &ws)| (gs - 1.0).max(0.0).max(ws * (gs - 1.0).abs()))
        .fold(0.0, f64::max)
}

/// `g_s(ω)` for every support point.
pub fn column_ratios(l: &LikelihoodMatrix, weights: &[f64]) -> Vec<f64> {
    let dense = Dense::new(l);
    dense.ratios(&dense.mix(weights))
}

/// `max_s max(0, g_s − 1) ∨ ω_s·|g_s − 1|`.
pub fn kkt_residual(l: &LikelihoodMatrix, weights: &[f64]) -> f64 {
    residual_from(&column_ratios(l, weights), weights)
}

/// Runs `sweeps` EM updates `ω_s ← ω_s·g_s(ω)` and returns the iterate and
/// the objective before each sweep and after the last.
pub fn em_sweeps(l: &LikelihoodMatrix, start: &[f64], sweeps: usize) -> (Vec<f64>, Vec<f64>) {
    let dense = Dense::new(l);
    let mut w = start.to_vec();
    let mut trace = Vec::with_capacity(sweeps + 1);
    for _ in 0..sweeps {
        let lw = dense.mix(&w);
        trace.push(Dense::objective(&lw));
        let g = dense.ratios(&lw);
        for (ws, gs) in w.iter_mut().zip(&g) {
            *ws *= gs;
        }
    }
    trace.push(Dense::objective(&dense.mix(&w)));
    (w, trace)
}

pub fn solve_weights(l: &LikelihoodMatrix) -> Result<InnerSolution> {
    solve_weights_from(l, None, &SolverOptions::default())
}

/// Solves the inner problem, optionally warm-started from `start`.
pub fn solve_weights_from(
    l: &LikelihoodMatrix,
    start: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<InnerSolution> {
    let q = l.q;
    if q == 0 || l.n == 0 {
        return Err(Error::InvalidParameter("empty likelihood matrix".into()));
    }
    let dense = Dense::new(l);
    let mut w = match start {
        Some(s) if s.len() == q && s.iter().all(|v| *v >= 0.0) && s.iter().sum::<f64>() > 0.0 => {
            let total: f64 = s.iter().sum();
            // Keep every point reachable by EM.
            s.iter().map(|v| 0.99 * v / total + 0.01 / q as f64).collect()
        }
        Some(_) => return Err(Error::DimensionMismatch("warm start must be a nonnegative vector of length q".into())),
        None => vec![1.0 / q as f64; q],
    };

    let max_em = opts.max_em.unwrap_or(10 * q + 500);
    let mut em = 0;
    let mut lw = dense.mix(&w);
    let mut g = dense.ratios(&lw);
    let mut residual = residual_from(&g, &w);
    while em < max_em && residual > opts.em_switch.max(opts.tol) {
        for (ws, gs) in w.iter_mut().zip(&g) {
            *ws *= gs;
        }
        lw = dense.mix(&w);
        g = dense.ratios(&lw);
        residual = residual_from(&g, &w);
        em += 1;
    }

    let mut iterations = 0;
    while residual > opts.tol && iterations < opts.max_sqp {
        iterations += 1;
        match sqp_step(&dense, &w, &lw, &g) {
            Some(next) => w = next,
            None => break,
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        lw = dense.mix(&w);
        g = dense.ratios(&lw);
        residual = residual_from(&g, &w);
    }
    // Once certified, one more Newton step is nearly free and typically
    // takes the residual to rounding level; keep it only if it helps.
    if residual <= opts.tol && residual > 0.0 && iterations > 0 {
        if let Some(mut next) = sqp_step(&dense, &w, &lw, &g) {
            let total: f64 = next.iter().sum();
            next.iter_mut().for_each(|v| *v /= total);
            let ln = dense.mix(&next);
            let gn = dense.ratios(&ln);
            let rn = residual_from(&gn, &next);
            if rn < residual {
                w = next;
                lw = ln;
                g = gn;
                residual = rn;
                iterations += 1;
            }
        }
    }
    let dual: Vec<f64> = g.iter().map(|v| v - 1.0).collect();
    Ok(InnerSolution {
        objective: Dense::objective(&lw),
        certified: residual <= opts.tol,
        kkt_residual: residual,
        weights: w,
        dual,
        iterations,
        em_sweeps: em,
    })
}

/// One sequential-quadratic step for `φ(x) = −(1/n)Σ log(Lx)_i + Σ x_s` on
/// `x ≥ 0`, whose minimizer lies on the simplex. The QP
/// `min ½ y'By + (1 − 2g)'y, y ≥ 0` with `B = M'M/n`, `M_is = L_is/(Lx)_i`,
/// is solved by a primal active-set method warm-started on the support of `x`.
fn sqp_step(dense: &Dense, x: &[f64], lw: &[f64], g: &[f64]) -> Option<Vec<f64>> {
    let (n, q) = (dense.n, dense.q);
    // Column-major M.
    let mut m = vec![0.0; n * q];
    for i in 0..n {
        let inv = 1.0 / lw[i];
        for s in 0..q {
            m[s * n + i] = dense.l[i * q + s] * inv;
        }
    }
    let mut cols: Vec<Option<Vec<f64>>> = vec![None; q];
    let column = |s: usize, cols: &mut Vec<Option<Vec<f64>>>| {
        if cols[s].is_none() {
            let ms = &m[s * n..(s + 1) * n];
            let c: Vec<f64> = (0..q)
                .map(|r| {
                    let mr = &m[r * n..(r + 1) * n];
                    mr.iter().zip(ms).map(|(a, b)| a * b).sum::<f64>() / n as f64
                })
                .collect();
            cols[s] = Some(c);
        }
    };
    let c: Vec<f64> = g.iter().map(|v| 1.0 - 2.0 * v).collect();
    let mut y = x.to_vec();
    let mut free: Vec<usize> = (0..q).filter(|&s| x[s] > 0.0).collect();
    for &s in &free {
        column(s, &mut cols);
    }
    let scale = free.iter().map(|&s| cols[s].as_ref().unwrap()[s]).fold(0.0, f64::max).max(1.0);
    let mut converged = false;
    for _ in 0..(10 * q + 50) {
        let k = free.len();
        let bff = DMatrix::from_fn(k, k, |a, b| {
            cols[free[b]].as_ref().unwrap()[free[a]] + if a == b { 1e-13 * scale } else { 0.0 }
        });
        // Solve for the displacement from x so the error scales with the
        // step rather than with the iterate.
        let xf = DVector::from_fn(k, |a, _| x[free[a]]);
        let rhs = DVector::from_fn(k, |a, _| -c[free[a]]) - &bff * &xf;
        let z = xf + match bff.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => bff.lu().solve(&rhs)?,
        };
        if z.iter().all(|v| *v > 0.0) {
            y.iter_mut().for_each(|v| *v = 0.0);
            for (a, &s) in free.iter().enumerate() {
                y[s] = z[a];
            }
            // Dual of the nonnegativity constraints off the working set.
            let mut by = vec![0.0; q];
            for &s in &free {
                let col = cols[s].as_ref().unwrap();
                for (r, v) in by.iter_mut().enumerate() {
                    *v += col[r] * y[s];
                }
            }
            let mut best = None;
            let mut best_val = 1e-14 * scale;
            for s in 0..q {
                if y[s] == 0.0 && !free.contains(&s) {
                    let w = -(by[s] + c[s]);
                    if w > best_val {
                        best_val = w;
                        best = Some(s);
                    }
                }
            }
            match best {
                Some(s) => {
                    column(s, &mut cols);
                    free.push(s);
                }
                None => {
                    converged = true;
                    break;
                }
            }
        } else {
            let mut alpha = 1.0f64;
            for (a, &s) in free.iter().enumerate() {
                if z[a] <= 0.0 {
                    alpha = alpha.min(y[s] / (y[s] - z[a]));
                }
            }
            for (a, &s) in free.iter().enumerate() {
                y[s] += alpha * (z[a] - y[s]);
            }
            // The blocking variable lands exactly on zero.
            let mut blocking = None;
            for (a, &s) in free.iter().enumerate() {
                if z[a] <= 0.0 && y[s] / (y[s] - z[a]) <= alpha {
                    blocking = Some(s);
                }
            }
            if let Some(s) = blocking {
                y[s] = 0.0;
            }
            free.retain(|&s| y[s] > 0.0);
            for s in 0..q {
                if !free.contains(&s) {
                    y[s] = 0.0;
                }
            }
            if free.is_empty() {
                return None;
            }
        }
    }
    if !converged {
        return None;
    }

    let phi = |v: &[f64]| -> f64 {
        let lv = dense.mix(v);
        -Dense::objective(&lv) / n as f64 + v.iter().sum::<f64>()
    };
    let p: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let slope: f64 = p.iter().zip(g).map(|(pi, gi)| pi * (1.0 - gi)).sum();
    if !(slope < 0.0) {
        return None;
    }
    let f0 = phi(x);
    let full: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    if phi(&full) <= f0 + 1e-4 * slope {
        return Some(full);
    }
    // Near the optimum φ differences drown in rounding and a backtracking
    // search can accept noise-sized steps forever. Take the QP solution if
    // it clearly improves the optimality residual instead.
    let gy = dense.ratios(&dense.mix(&full));
    let (r_full, r_now) = (residual_from(&gy, &full), residual_from(g, x));
    if r_full < 0.5 * r_now {
        return Some(full);
    }
    let mut step = 0.5;
    for _ in 0..40 {
        let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| (a + step * b).max(0.0)).collect();
        if phi(&trial) <= f0 + 1e-4 * step * slope {
            return Some(trial);
        }
        step *= 0.5;
    }
    if r_full < r_now {
        return Some(full);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, q: usize, seed: u64) -> LikelihoodMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<f64> = (0..q).map(|s| -2.0 + 4.0 * s as f64 / (q as f64 - 1.0).max(1.0)).collect();
        let raw: Vec<f64> = (0..n)
            .flat_map(|_| {
                let z: f64 = rng.random_range(-2.5..2.5);
                centers.iter().map(move |c| -0.5 * (z - c) * (z - c) / 0.3).collect::<Vec<_>>()
            })
            .collect();
        LikelihoodMatrix::from_raw(n, q, raw).unwrap()
    }

    #[test]
    fn single_column() {
        let l = LikelihoodMatrix::from_raw(3, 1, vec![-1.0, -2.0, -0.5]).unwrap();
        let sol = solve_weights(&l).unwrap();
        assert_eq!(sol.weights, vec![1.0]);
        assert!(sol.dual[0].abs() < 1e-15);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn certifies_random_problems() {
        for seed in 0..5 {
            let l = random_matrix(200, 30, seed);
            let sol = solve_weights(&l).unwrap();
            assert!(sol.certified, "residual {}", sol.kkt_residual);
            assert!(kkt_residual(&l, &sol.weights) <= KKT_TOL);
            assert!(sol.weights.iter().filter(|w| **w > POSITIVE_WEIGHT).count() <= 200);
            assert!((sol.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_columns_are_flat() {
        let raw: Vec<f64> = (0..10).flat_map(|i| vec![-(i as f64) * 0.1; 3]).collect();
        let l = LikelihoodMatrix::from_raw(10, 3, raw).unwrap();
        assert!(kkt_residual(&l, &[1.0 / 3.0; 3]) <= 1e-12);
    }

    #[test]
    fn dominated_vertex_is_not_optimal() {
        let raw: Vec<f64> = (0..4).flat_map(|_| vec![0.0, -1.0]).collect();
        let l = LikelihoodMatrix::from_raw(4, 2, raw).unwrap();
        assert!(kkt_residual(&l, &[0.0, 1.0]) > 0.0);
        let sol = solve_weights(&l).unwrap();
        assert!((sol.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn em_is_monotone() {
        let l = random_matrix(100, 20, 7);
        let (_, trace) = em_sweeps(&l, &[0.05; 20], 50);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn grid_mixture_validation() {
        assert!(GridMixture::new(vec![0.0, 0.0], vec![0.5, 0.5]).is_err());
        assert!(GridMixture::new(vec![0.0, 1.0], vec![0.4, 0.5]).is_err());
        assert!(GridMixture::uniform(vec![-1.0, 0.0, 1.0]).is_ok());
    }
}
