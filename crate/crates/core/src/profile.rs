//! Profile log-likelihood `ℓ^p(θ^c) = max_ω Σ_i log Σ_s ω_s ℓ^c(w_i, x̄_s; θ^c)`
//! and its gradient, either by the envelope theorem or by the full chain
//! rule through the implicit derivative of the argmax `ω(θ^c)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{RowBasis, RowKernel};
use crate::likelihood::{build_kernels, matrix_from_kernels, LikelihoodMatrix, MIXTURE_FLOOR};
use crate::model::{ModelParams, PanelData};
use crate::npmle::{solve_weights_from, InnerSolution, SolverOptions, KKT_TOL, POSITIVE_WEIGHT};
use crate::params::ParamLayout;

/// Condition-number ceiling for the reduced KKT system.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Differentiate at fixed `ω̂`.
    #[default]
    Envelope,
    /// Chain rule through `dω/dθ`.
    Implicit,
}

#[derive(Clone, Debug)]
pub struct ProfileEval {
    pub value: f64,
    pub inner: InnerSolution,
    /// Gradient over free coordinates, when requested.
    pub gradient: Option<Vec<f64>>,
    /// False when the inner solution was not certified.
    pub gradient_exact: bool,
}

/// The profile objective for one panel and grid, in free coordinates.
pub struct ProfileObjective<'a> {
    pub data: &'a PanelData,
    pub support: Vec<f64>,
    pub layout: ParamLayout,
    pub solver: SolverOptions,
}

struct Evaluated {
    params: ModelParams,
    kernels: Vec<RowKernel>,
    matrix: LikelihoodMatrix,
    inner: InnerSolution,
}

impl<'a> ProfileObjective<'a> {
    pub fn new(data: &'a PanelData, support: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidParameter("empty grid".into()));
        }
        data.validate()?;
        data.check_compatible(&layout.template().outcome)?;
        Ok(ProfileObjective { data, support, layout, solver: SolverOptions::default() })
    }

    fn evaluate(&self, free: &[f64], warm: Option<&[f64]>) -> Result<Evaluated> {
        let params = self.layout.unpack(free)?;
        let kernels = build_kernels(self.data, &params)?;
        let matrix = matrix_from_kernels(&kernels, &self.support)?;
        let inner = solve_weights_from(&matrix, warm, &self.solver)?;
        Ok(Evaluated { params, kernels, matrix, inner })
    }

    pub fn value(&self, free: &[f64], warm: Option<&[f64]>) -> Result<ProfileEval> {
        let ev = self.evaluate(free, warm)?;
        Ok(ProfileEval {
            value: ev.matrix.row_shift.iter().sum::<f64>() + ev.inner.objective,
            gradient_exact: ev.inner.certified,
            inner: ev.inner,
            gradient: None,
        })
    }

    pub fn value_and_gradient(
        &self,
        free: &[f64],
        warm: Option<&[f64]>,
        method: GradientMethod,
    ) -> Result<ProfileEval> {
        let ev = self.evaluate(free, warm)?;
        let envelope = self.envelope_gradient(&ev)?;
        let gradient = match method {
            GradientMethod::Envelope => envelope,
            GradientMethod::Implicit => {
                let jac = self.jacobian_of(&ev)?;
                let g = crate::npmle::column_ratios(&ev.matrix, &ev.inner.weights);
                let n = self.data.len() as f64;
                let mut out = envelope;
                for (s, gs) in g.iter().enumerate() {
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += n * gs * jac[(s, k)];
                    }
                }
                out
            }
        };
        Ok(ProfileEval {
            value: ev.matrix.row_shift.iter().sum::<f64>() + ev.inner.objective,
            gradient_exact: ev.inner.certified,
            inner: ev.inner,
            gradient: Some(gradient),
        })
    }

    /// `q × dim` Jacobian of the argmax weights at `free`.
    pub fn weight_jacobian(&self, free: &[f64], warm: Option<&[f64]>) -> Result<(DMatrix<f64>, InnerSolution)> {
        let ev = self.evaluate(free, warm)?;
        let jac = self.jacobian_of(&ev)?;
        Ok((jac, ev.inner))
    }

    fn envelope_gradient(&self, ev: &Evaluated) -> Result<Vec<f64>> {
        let nat = self.layout.nat;
        let q = self.support.len();
        let w = &ev.inner.weights;
        let parts: Vec<Vec<f64>> = self
            .data
            .individuals
            .par_iter()
            .zip(ev.kernels.par_iter())
            .enumerate()
            .map(|(i, (h, k))| {
                let basis = k.basis(h, &ev.params, &nat);
                let nb = basis.weight_len();
                let row = ev.matrix.row(i);
                let lw: f64 = row.iter().zip(w).map(|(a, b)| a.exp() * b).sum::<f64>().max(MIXTURE_FLOOR);
                let mut agg = vec![0.0; nb];
                let mut tmp = vec![0.0; nb];
                for s in 0..q {
                    let pi = w[s] * row[s].exp() / lw;
                    if pi == 0.0 {
                        continue;
                    }
                    k.point_weights(self.support[s], &mut tmp);
                    for (a, t) in agg.iter_mut().zip(&tmp) {
                        *a += pi * t;
                    }
                }
                let mut g = vec![0.0; nat.len()];
                basis.contract(&agg, &mut g);
                g
            })
            .collect();
        let mut total = vec![0.0; nat.len()];
        for p in parts {
            for (t, v) in total.iter_mut().zip(&p) {
                *t += v;
            }
        }
        self.layout.grad_to_free(&ev.params, &total)
    }

    /// Free-coordinate gradients of every `log ℓ^c(w_i, x̄_s)`, laid out
    /// `[(i*q + s)*dim + k]`.
    pub fn entry_gradients(&self, free: &[f64]) -> Result<Vec<f64>> {
        let params = self.layout.unpack(free)?;
        let kernels = build_kernels(self.data, &params)?;
        self.entry_gradients_of(&params, &kernels)
    }

    fn entry_gradients_of(&self, params: &ModelParams, kernels: &[RowKernel]) -> Result<Vec<f64>> {
        let nat = self.layout.nat;
        let dim = self.layout.dim();
        let q = self.support.len();
        let rows: Vec<Result<Vec<f64>>> = self
            .data
            .individuals
            .par_iter()
            .zip(kernels.par_iter())
            .map(|(h, k)| {
                let free_basis = self.free_basis(&k.basis(h, params, &nat), params)?;
                let nb = free_basis.len();
                let mut tmp = vec![0.0; nb];
                let mut out = vec![0.0; q * dim];
                for s in 0..q {
                    k.point_weights(self.support[s], &mut tmp);
                    let dst = &mut out[s * dim..(s + 1) * dim];
                    for (b, wb) in tmp.iter().enumerate() {
                        for (d, v) in dst.iter_mut().zip(&free_basis[b]) {
                            *d += wb * v;
                        }
                    }
                }
                Ok(out)
            })
            .collect();
        let mut all = Vec::with_capacity(self.data.len() * q * dim);
        for r in rows {
            all.extend(r?);
        }
        Ok(all)
    }

    fn free_basis(&self, basis: &RowBasis, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(basis.weight_len());
        for v in basis.g.iter().chain(basis.c0.iter()).chain(basis.c1.iter()) {
            out.push(self.layout.grad_to_free(params, v)?);
        }
        Ok(out)
    }

    fn jacobian_of(&self, ev: &Evaluated) -> Result<DMatrix<f64>> {
        let grads = self.entry_gradients_of(&ev.params, &ev.kernels)?;
        argmax_jacobian(&ev.matrix, &ev.inner, &grads, self.layout.dim())
    }
}

/// Implicit derivative of the inner argmax.
///
/// On the active support `A` the stationarity conditions `g_A(ω, θ) = 1`
/// hold with inactive weights fixed at zero, so
/// `dω_A/dθ = B_AA⁻¹ ∂g_A/∂θ` with `B = M'M/n`, `M_is = L_is/(Lω)_i` and
/// `∂g_s/∂θ = (1/n) Σ_i M_is (∇log ℓ_is − Σ_r π_ir ∇log ℓ_ir)`.
/// `grads` holds `∇log ℓ_is` laid out `[(i*q + s)*dim + k]`.
pub fn argmax_jacobian(
    l: &LikelihoodMatrix,
    inner: &InnerSolution,
    grads: &[f64],
    dim: usize,
) -> Result<DMatrix<f64>> {
    let (n, q) = (l.n, l.q);
    if grads.len() != n * q * dim {
        return Err(Error::DimensionMismatch("entry gradient array".into()));
    }
    if !inner.certified {
        return Err(Error::OptimizationFailure(format!(
            "inner solution not certified (KKT residual {:e})",
            inner.kkt_residual
        )));
    }
    let w = &inner.weights;
    for s in 0..q {
        if w[s] <= POSITIVE_WEIGHT && inner.dual[s] >= -KKT_TOL {
            return Err(Error::BoundaryKink { index: s, weight: w[s], dual: inner.dual[s] });
        }
    }
    let active = inner.active();
    let k = active.len();
    let mut b = DMatrix::<f64>::zeros(k, k);
    let mut dg = DMatrix::<f64>::zeros(k, dim);
    let mut mrow = vec![0.0; k];
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        let row = l.row(i);
        let lw: f64 = row.iter().zip(w).map(|(a, b)| a.exp() * b).sum::<f64>().max(MIXTURE_FLOOR);
        mean.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..q {
            let pi = w[s] * row[s].exp() / lw;
            if pi > 0.0 {
                let gs = &grads[(i * q + s) * dim..(i * q + s + 1) * dim];
                for (m, g) in mean.iter_mut().zip(gs) {
                    *m += pi * g;
                }
            }
        }
        for (a, &s) in active.iter().enumerate() {
            mrow[a] = row[s].exp() / lw;
        }
        for a in 0..k {
            for c in 0..k {
                b[(a, c)] += mrow[a] * mrow[c];
            }
            let s = active[a];
            let gs = &grads[(i * q + s) * dim..(i * q + s + 1) * dim];
            for j in 0..dim {
                dg[(a, j)] += mrow[a] * (gs[j] - mean[j]);
            }
        }
    }
    b /= n as f64;
    dg /= n as f64;
    let sv = b.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::DegenerateKkt { condition });
    }
    let sol = b
        .lu()
        .solve(&dg)
        .ok_or(Error::DegenerateKkt { condition: f64::INFINITY })?;
    let mut jac = DMatrix::<f64>::zeros(q, dim);
    for (a, &s) in active.iter().enumerate() {
        for j in 0..dim {
            jac[(s, j)] = sol[(a, j)];
        }
    }
    Ok(jac)
}

/// Profile value at `params` on `support`, with every unpinned coordinate free.
pub fn profile_value(params: &ModelParams, data: &PanelData, support: &[f64]) -> Result<ProfileEval> {
    let layout = ParamLayout::new(params, params.choice.rho == 0.0)?;
    let free = layout.pack(params)?;
    ProfileObjective::new(data, support.to_vec(), layout)?.value(&free, None)
}

/// Profile gradient in the free coordinates of `layout`.
pub fn profile_gradient(
    params: &ModelParams,
    data: &PanelData,
    support: &[f64],
    layout: &ParamLayout,
    method: GradientMethod,
) -> Result<ProfileEval> {
    let free = layout.pack(params)?;
    ProfileObjective::new(data, support.to_vec(), layout.clone())?.value_and_gradient(&free, None, method)
}

/// Jacobian of the argmax weights in the free coordinates of `layout`.
pub fn weight_jacobian(
    params: &ModelParams,
    data: &PanelData,
    support: &[f64],
    layout: &ParamLayout,
) -> Result<(DMatrix<f64>, InnerSolution)> {
    let free = layout.pack(params)?;
    ProfileObjective::new(data, support.to_vec(), layout.clone())?.weight_jacobian(&free, None)
}
