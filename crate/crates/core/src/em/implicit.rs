//! Score, Fisher information and the implicit correction step.
//!
//! Parameters of the active components are packed component by component as
//! `[μ_c (d entries), η_c]`, where `η_c = ln π_c` are logits whose softmax
//! over the active set gives the weights. The corrected parameters are
//! `α* = α̃ + A⁻¹ s̄` with `s̄` the mean per-point score and `A` a per-point
//! Fisher estimate plus `damping · I`. Only the score depends on the votes
//! in the backward pass.

use gradgraph::{CustomFunction, Graph, NodeId, Tensor};
use nalgebra::{DMatrix, DVector, Dyn, LU};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{em_fit, responsibilities, EMConfig, MixtureParams};
use crate::error::{invalid, ApenError, Result};
use crate::geom::SoftPartition;

/// How the Fisher information is estimated from the votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    /// Negative Hessian of the mean log-likelihood, assembled from the
    /// per-point scores and responsibilities (first derivatives only).
    Observed,
    /// Mean outer product of the per-point scores.
    Empirical,
}

impl std::str::FromStr for FisherKind {
    type Err = ApenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(Self::Observed),
            "empirical" => Ok(Self::Empirical),
            other => invalid(format!("unknown fisher estimator `{other}`")),
        }
    }
}

impl std::fmt::Display for FisherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Observed => "observed",
            Self::Empirical => "empirical",
        })
    }
}

/// Responsibilities and scores of the active components at a fixed `α`.
struct Linearization {
    active: Vec<usize>,
    gamma: Array2<f64>,
    means: Array2<f64>,
    weights: Vec<f64>,
    sigma: f64,
    votes: Array2<f64>,
    /// Per-point scores, `n x P`.
    scores: Array2<f64>,
}

impl Linearization {
    fn new(votes: &ArrayView2<f64>, alpha: &MixtureParams) -> Result<Self> {
        let gamma_full = responsibilities(votes, alpha)?;
        let active = alpha.active_indices();
        let gamma = gamma_full.weights().select(Axis(1), &active);
        let means = alpha.means.select(Axis(0), &active);
        let weights: Vec<f64> = active.iter().map(|&j| alpha.weights[j]).collect();
        let (n, d) = votes.dim();
        let ka = active.len();
        let w = d + 1;
        let s2 = alpha.sigma * alpha.sigma;
        let mut scores = Array2::zeros((n, ka * w));
        for i in 0..n {
            for c in 0..ka {
                let g = gamma[[i, c]];
                for a in 0..d {
                    scores[[i, c * w + a]] = g * (votes[[i, a]] - means[[c, a]]) / s2;
                }
                scores[[i, c * w + d]] = g - weights[c];
            }
        }
        Ok(Self {
            active,
            gamma,
            means,
            weights,
            sigma: alpha.sigma,
            votes: votes.to_owned(),
            scores,
        })
    }

    fn n(&self) -> usize {
        self.gamma.nrows()
    }

    fn d(&self) -> usize {
        self.means.ncols()
    }

    fn ka(&self) -> usize {
        self.active.len()
    }

    fn mean_score(&self) -> Array1<f64> {
        self.scores.sum_axis(Axis(0)) / self.n() as f64
    }

    fn fisher(&self, kind: FisherKind) -> Array2<f64> {
        let n = self.n() as f64;
        let mut f = self.scores.t().dot(&self.scores);
        if kind == FisherKind::Observed {
            self.add_curvature(&mut f);
        }
        f / n
    }

    /// Adds `Σ_i (Σ_j γ_ij B_j − Σ_j γ_ij u_ij u_ijᵀ)`, where `u_ij` is the
    /// gradient of `ln π_j N(v_i; μ_j)` and `B_j` its negative Hessian.
    /// Together with the score outer products this is the exact negative
    /// Hessian of the log-likelihood.
    fn add_curvature(&self, f: &mut Array2<f64>) {
        let (n, d, ka) = (self.n(), self.d(), self.ka());
        let w = d + 1;
        let s2 = self.sigma * self.sigma;
        let pi = &self.weights;
        let mass = self.gamma.sum_axis(Axis(0));
        let nf = n as f64;
        for c in 0..ka {
            let mu = c * w;
            for a in 0..d {
                f[[mu + a, mu + a]] += mass[c] / s2;
            }
            // Σ_i γ_ic r_ic r_icᵀ with r = (v − μ_c) / σ².
            for i in 0..n {
                let g = self.gamma[[i, c]];
                if g == 0.0 {
                    continue;
                }
                let r: Vec<f64> = (0..d).map(|a| (self.votes[[i, a]] - self.means[[c, a]]) / s2).collect();
                for a in 0..d {
                    for b in 0..d {
                        f[[mu + a, mu + b]] -= g * r[a] * r[b];
                    }
                }
            }
            // Σ_i γ_ic r_ic (e_c − π)ᵀ, from the total μ_c score.
            let total: Vec<f64> = (0..d).map(|a| self.scores.column(mu + a).sum()).collect();
            for l in 0..ka {
                let coeff = if l == c { 1.0 - pi[l] } else { -pi[l] };
                for a in 0..d {
                    let v = total[a] * coeff;
                    f[[mu + a, l * w + d]] -= v;
                    f[[l * w + d, mu + a]] -= v;
                }
            }
        }
        // η block: n(diag π − ππᵀ) − Σ_i (diag γ_i − γ_i πᵀ − π γ_iᵀ + ππᵀ).
        for c in 0..ka {
            for l in 0..ka {
                let mut v = -2.0 * nf * pi[c] * pi[l] + mass[c] * pi[l] + pi[c] * mass[l];
                if c == l {
                    v += nf * pi[c] - mass[c];
                }
                f[[c * w + d, l * w + d]] += v;
            }
        }
    }

    fn packed(&self) -> Array2<f64> {
        let (d, ka) = (self.d(), self.ka());
        let mut p = Array2::zeros((ka, d + 1));
        for c in 0..ka {
            for a in 0..d {
                p[[c, a]] = self.means[[c, a]];
            }
            p[[c, d]] = self.weights[c].ln();
        }
        p
    }
}

fn factor(f: Array2<f64>, damping: f64) -> Result<LU<f64, Dyn, Dyn>> {
    let p = f.nrows();
    let a = DMatrix::from_fn(p, p, |i, j| f[[i, j]] + if i == j { damping } else { 0.0 });
    if a.iter().any(|v| !v.is_finite()) {
        return Err(ApenError::NumericFailure("non-finite Fisher information".into()));
    }
    Ok(a.lu())
}

fn solve(lu: &LU<f64, Dyn, Dyn>, rhs: &[f64]) -> Result<Vec<f64>> {
    let b = DVector::from_column_slice(rhs);
    let x = lu
        .solve(&b)
        .ok_or_else(|| ApenError::NumericFailure("singular Fisher information; use damping > 0".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ApenError::NumericFailure("non-finite implicit correction".into()));
    }
    Ok(x.iter().copied().collect())
}

/// Score of the mixture log-likelihood with respect to the packed active
/// parameters.
#[derive(Debug, Clone)]
pub struct Score {
    pub active: Vec<usize>,
    /// `∇ log P(Y; α)`, length `k_active · (d + 1)`.
    pub total: Array1<f64>,
    /// One row per point; rows sum to `total`.
    pub per_point: Array2<f64>,
}

pub fn score(votes: &ArrayView2<f64>, alpha: &MixtureParams) -> Result<Score> {
    let lin = Linearization::new(votes, alpha)?;
    Ok(Score {
        total: lin.scores.sum_axis(Axis(0)),
        active: lin.active,
        per_point: lin.scores,
    })
}

/// Per-point Fisher information estimate over the packed active parameters.
pub fn fisher(votes: &ArrayView2<f64>, alpha: &MixtureParams, kind: FisherKind) -> Result<Array2<f64>> {
    Ok(Linearization::new(votes, alpha)?.fisher(kind))
}

fn unpack(alpha: &MixtureParams, active: &[usize], packed: &Array2<f64>) -> MixtureParams {
    let d = alpha.d();
    let mut out = alpha.clone();
    let m = (0..active.len()).fold(f64::NEG_INFINITY, |m, c| m.max(packed[[c, d]]));
    let z: f64 = (0..active.len()).map(|c| (packed[[c, d]] - m).exp()).sum();
    for (c, &j) in active.iter().enumerate() {
        for a in 0..d {
            out.means[[j, a]] = packed[[c, a]];
        }
        out.weights[j] = (packed[[c, d]] - m).exp() / z;
    }
    out
}

struct Corrected {
    lin: Linearization,
    lu: LU<f64, Dyn, Dyn>,
    packed: Array2<f64>,
}

fn correct(votes: &ArrayView2<f64>, alpha: &MixtureParams, damping: f64, kind: FisherKind) -> Result<Corrected> {
    if !(damping >= 0.0) {
        return invalid("damping must be non-negative");
    }
    let lin = Linearization::new(votes, alpha)?;
    let lu = factor(lin.fisher(kind), damping)?;
    let step = solve(&lu, lin.mean_score().as_slice().unwrap())?;
    let mut packed = lin.packed();
    for (p, s) in packed.iter_mut().zip(step) {
        *p += s;
    }
    Ok(Corrected { lin, lu, packed })
}

/// `α̃ + A⁻¹ s̄` as mixture parameters; inactive components are unchanged.
pub fn implicit_correct(
    votes: &ArrayView2<f64>,
    alpha: &MixtureParams,
    damping: f64,
    kind: FisherKind,
) -> Result<MixtureParams> {
    let c = correct(votes, alpha, damping, kind)?;
    Ok(unpack(alpha, &c.lin.active, &c.packed))
}

/// Softmax over components of `η_c − ‖v_i − μ_c‖² / 2σ²`.
fn packed_responsibilities(votes: &ArrayView2<f64>, packed: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let (n, d) = votes.dim();
    let ka = packed.nrows();
    let s2 = sigma * sigma;
    let mut q = Array2::zeros((n, ka));
    for i in 0..n {
        for c in 0..ka {
            let d2: f64 = (0..d).map(|a| (votes[[i, a]] - packed[[c, a]]).powi(2)).sum();
            q[[i, c]] = packed[[c, d]] - d2 / (2.0 * s2);
        }
    }
    for mut row in q.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|a| (a - m).exp());
        let s = row.sum();
        row.mapv_inplace(|a| a / s);
    }
    q
}

/// Output of [`q_predict`].
#[derive(Debug, Clone)]
pub struct QPrediction {
    /// Responsibilities over the surviving components, `n x k_active`.
    pub q: SoftPartition,
    /// EM result before the implicit step.
    pub fitted: MixtureParams,
    /// After the implicit step.
    pub corrected: MixtureParams,
    /// Surviving component indices, ascending; column `c` of `q` is
    /// component `active[c]`.
    pub active: Vec<usize>,
}

/// EM fit, implicit correction and responsibilities collapsed to the active
/// components.
pub fn q_predict(votes: &ArrayView2<f64>, k: usize, sigma: f64, cfg: &EMConfig) -> Result<QPrediction> {
    let fitted = em_fit(votes, k, sigma, cfg)?;
    let c = correct(votes, &fitted, cfg.fisher_damping, cfg.fisher)?;
    let q = SoftPartition::new(packed_responsibilities(votes, &c.packed, sigma))?;
    Ok(QPrediction {
        q,
        corrected: unpack(&fitted, &c.lin.active, &c.packed),
        active: c.lin.active,
        fitted,
    })
}

struct ImplicitRule {
    lin: Linearization,
    lu: LU<f64, Dyn, Dyn>,
}

impl CustomFunction for ImplicitRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> gradgraph::Result<Vec<Tensor>> {
        let votes = inputs[0];
        let lin = &self.lin;
        let (n, d, ka) = (lin.n(), lin.d(), lin.ka());
        let g: Vec<f64> = upstream.iter().copied().collect();
        let w = solve(&self.lu, &g).map_err(|e| gradgraph::GraphError::NumericFailure(e.to_string()))?;
        let s2 = lin.sigma * lin.sigma;
        let mut grad = Array2::zeros((n, d));
        let mut a = vec![0.0; ka * d];
        for i in 0..n {
            // a_ic = ∂ ln N(v_i; μ_c) / ∂v_i and its responsibility average.
            let mut abar = vec![0.0; d];
            for c in 0..ka {
                for x in 0..d {
                    a[c * d + x] = -(votes[[i, x]] - lin.means[[c, x]]) / s2;
                    abar[x] += lin.gamma[[i, c]] * a[c * d + x];
                }
            }
            for c in 0..ka {
                let gm = lin.gamma[[i, c]];
                if gm == 0.0 {
                    continue;
                }
                let wm = &w[c * (d + 1)..c * (d + 1) + d];
                let we = w[c * (d + 1) + d];
                let coeff = we - (0..d).map(|x| a[c * d + x] * wm[x]).sum::<f64>();
                for x in 0..d {
                    grad[[i, x]] += gm * (coeff * (a[c * d + x] - abar[x]) + wm[x] / s2);
                }
            }
        }
        Ok(vec![grad / n as f64])
    }
}

struct ResponsibilityRule {
    sigma: f64,
}

impl CustomFunction for ResponsibilityRule {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> gradgraph::Result<Vec<Tensor>> {
        let (votes, packed) = (inputs[0], inputs[1]);
        let (n, d) = votes.dim();
        let ka = packed.nrows();
        let s2 = self.sigma * self.sigma;
        let mut gv = Array2::zeros((n, d));
        let mut gp = Array2::zeros((ka, d + 1));
        for i in 0..n {
            let dot: f64 = (0..ka).map(|c| output[[i, c]] * upstream[[i, c]]).sum();
            for c in 0..ka {
                let h = output[[i, c]] * (upstream[[i, c]] - dot);
                if h == 0.0 {
                    continue;
                }
                for x in 0..d {
                    let r = (votes[[i, x]] - packed[[c, x]]) / s2;
                    gv[[i, x]] -= h * r;
                    gp[[c, x]] += h * r;
                }
                gp[[c, d]] += h;
            }
        }
        Ok(vec![gv, gp])
    }
}

/// Graph handles produced by [`q_predict_node`].
#[derive(Debug, Clone)]
pub struct QPredictionNode {
    /// `n x k_active` responsibilities.
    pub q: NodeId,
    /// Packed corrected parameters, `k_active x (d + 1)`.
    pub params: NodeId,
    pub fitted: MixtureParams,
    pub active: Vec<usize>,
}

/// Differentiable [`q_predict`]: the EM fit is detached, the implicit step
/// and the responsibilities carry gradients back to `votes`.
pub fn q_predict_node(
    graph: &mut Graph,
    votes: NodeId,
    k: usize,
    sigma: f64,
    cfg: &EMConfig,
) -> Result<QPredictionNode> {
    let v = graph.value(votes).clone();
    let fitted = em_fit(&v.view(), k, sigma, cfg)?;
    let Corrected { lin, lu, packed } = correct(&v.view(), &fitted, cfg.fisher_damping, cfg.fisher)?;
    let active = lin.active.clone();
    let q_value = packed_responsibilities(&v.view(), &packed, sigma);
    let params = graph.custom(&[votes], packed, Box::new(ImplicitRule { lin, lu }))?;
    let q = graph.custom(&[votes, params], q_value, Box::new(ResponsibilityRule { sigma }))?;
    Ok(QPredictionNode {
        q,
        params,
        fitted,
        active,
    })
}
