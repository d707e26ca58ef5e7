//! Partition prediction from per-point votes.
//!
//! A Gaussian mixture with a fixed shared isotropic bandwidth is fitted by
//! EM, merging components whose means are closer than a KL threshold. The
//! fitted parameters are then corrected by one implicit step so that the
//! responsibilities carry a gradient with respect to the votes.

mod implicit;
mod simple;

use ndarray::{Array2, ArrayView2, Axis};
use std::f64::consts::PI;

use crate::error::{invalid, ApenError, Result};
use crate::geom::SoftPartition;

pub use implicit::{
    fisher, implicit_correct, q_predict, q_predict_node, score, FisherKind, QPrediction, QPredictionNode, Score,
};
pub use simple::{fps_voronoi, furthest_point_sample, q_simple_fps, q_simple_uniform};

/// Mixture parameters. `means` is `k x d` (one row per component).
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub means: Array2<f64>,
    pub weights: Vec<f64>,
    pub sigma: f64,
    pub active: Vec<bool>,
}

impl MixtureParams {
    pub fn new(means: Array2<f64>, weights: Vec<f64>, sigma: f64) -> Result<Self> {
        if means.nrows() != weights.len() || weights.is_empty() {
            return invalid("means and weights disagree on k");
        }
        if !(sigma > 0.0) {
            return invalid(format!("sigma must be positive, got {sigma}"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return invalid("weights must be non-negative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("weights sum to {total}"));
        }
        let active = weights.iter().map(|&w| w > 0.0).collect();
        Ok(Self {
            means,
            weights,
            sigma,
            active,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.means.ncols()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&j| self.active[j]).collect()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EMConfig {
    pub max_iter: usize,
    pub merge_freq: usize,
    pub tau: f64,
    pub fisher_damping: f64,
    pub fisher: FisherKind,
    pub seed: u64,
    /// After the scheduled iterations, keep stepping until no mean moves by
    /// more than `tol * sigma` and no weight by more than `tol`, for at most
    /// `max_polish` steps. Zero disables this.
    pub tol: f64,
    pub max_polish: usize,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            max_iter: 16,
            merge_freq: 4,
            tau: 4.0,
            fisher_damping: 1e-6,
            fisher: FisherKind::Observed,
            seed: 0,
            tol: 1e-11,
            max_polish: 5000,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.merge_freq == 0 {
            return Err(ApenError::InvalidConfiguration("max_iter and merge_freq must be >= 1".into()));
        }
        if !(self.tau >= 0.0) || !(self.fisher_damping >= 0.0) {
            return Err(ApenError::InvalidConfiguration("tau and damping must be non-negative".into()));
        }
        Ok(())
    }
}

/// KL divergence between two isotropic Gaussians sharing `sigma`.
pub fn kl_pair(mu_a: &[f64], mu_b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    d2 / (2.0 * sigma * sigma)
}

/// Per-point log of `π_j N(v_i; μ_j, σ)` for every component, `-inf` for
/// inactive ones.
fn log_joint(votes: &ArrayView2<f64>, alpha: &MixtureParams) -> Array2<f64> {
    let (n, d) = votes.dim();
    let k = alpha.k();
    let s2 = alpha.sigma * alpha.sigma;
    let norm = -(d as f64) * (alpha.sigma * (2.0 * PI).sqrt()).ln();
    let mut out = Array2::from_elem((n, k), f64::NEG_INFINITY);
    for j in 0..k {
        if !alpha.active[j] {
            continue;
        }
        let lw = alpha.weights[j].ln() + norm;
        let mu = alpha.means.row(j);
        for i in 0..n {
            let v = votes.row(i);
            let d2: f64 = v.iter().zip(mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            out[[i, j]] = lw - d2 / (2.0 * s2);
        }
    }
    out
}

/// Normalizes the rows of a log-joint table in place and returns the total
/// log-likelihood.
fn normalize_rows(lj: &mut Array2<f64>) -> f64 {
    let mut total = 0.0;
    for mut row in lj.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|a| (a - lse).exp());
        total += lse;
    }
    total
}

fn check_votes(votes: &ArrayView2<f64>, alpha: &MixtureParams) -> Result<()> {
    if votes.ncols() != alpha.d() {
        return invalid(format!("votes are {}-dimensional, means {}-dimensional", votes.ncols(), alpha.d()));
    }
    if alpha.num_active() == 0 {
        return invalid("mixture has no active component");
    }
    Ok(())
}

pub fn log_likelihood(votes: &ArrayView2<f64>, alpha: &MixtureParams) -> Result<f64> {
    check_votes(votes, alpha)?;
    let mut lj = log_joint(votes, alpha);
    let ll = normalize_rows(&mut lj);
    if !ll.is_finite() {
        return Err(ApenError::NumericFailure("non-finite mixture log-likelihood".into()));
    }
    Ok(ll)
}

/// Posterior responsibilities, `n x k`; inactive columns are exactly zero.
pub fn responsibilities(votes: &ArrayView2<f64>, alpha: &MixtureParams) -> Result<SoftPartition> {
    check_votes(votes, alpha)?;
    let mut lj = log_joint(votes, alpha);
    let ll = normalize_rows(&mut lj);
    if !ll.is_finite() {
        return Err(ApenError::NumericFailure("non-finite mixture log-likelihood".into()));
    }
    SoftPartition::new(lj)
}

/// One E step followed by one M step. Components whose total responsibility
/// underflows to zero are deactivated and keep their mean.
pub fn em_step(votes: &ArrayView2<f64>, alpha: &MixtureParams) -> Result<MixtureParams> {
    let gamma = responsibilities(votes, alpha)?;
    let gamma = gamma.weights();
    let n = votes.nrows() as f64;
    let mut next = alpha.clone();
    let mass = gamma.sum_axis(Axis(0));
    let weighted = gamma.t().dot(votes);
    for j in 0..alpha.k() {
        if !alpha.active[j] || mass[j] == 0.0 {
            next.weights[j] = 0.0;
            next.active[j] = false;
            continue;
        }
        next.means.row_mut(j).assign(&(&weighted.row(j) / mass[j]));
        next.weights[j] = mass[j] / n;
    }
    Ok(next)
}

/// Active pair with the smallest KL divergence; ties keep the first pair in
/// lexicographic order.
fn closest_pair(alpha: &MixtureParams) -> Option<(usize, usize, f64)> {
    let idx = alpha.active_indices();
    let mut best: Option<(usize, usize, f64)> = None;
    for (p, &a) in idx.iter().enumerate() {
        for &b in &idx[p + 1..] {
            let kl = kl_pair(
                alpha.means.row(a).as_slice().unwrap(),
                alpha.means.row(b).as_slice().unwrap(),
                alpha.sigma,
            );
            if best.is_none_or(|(_, _, m)| kl < m) {
                best = Some((a, b, kl));
            }
        }
    }
    best
}

/// Repeatedly merges the closest active pair while its KL is below `tau`.
/// The heavier component survives (ties keep the lower index) and absorbs
/// the other's weight. Returns the number of merges.
pub fn merge_pass(alpha: &mut MixtureParams, tau: f64) -> usize {
    let mut merges = 0;
    while let Some((a, b, kl)) = closest_pair(alpha) {
        if kl >= tau {
            break;
        }
        let (keep, drop) = if alpha.weights[b] > alpha.weights[a] { (b, a) } else { (a, b) };
        alpha.weights[keep] += alpha.weights[drop];
        alpha.weights[drop] = 0.0;
        alpha.active[drop] = false;
        merges += 1;
    }
    merges
}

/// Log-likelihood bookkeeping of one [`em_fit_traced`] run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    /// Log-likelihood of the initialization.
    pub initial: f64,
    /// After the E and M steps of each iteration.
    pub after_step: Vec<f64>,
    /// After the merge pass of each iteration (equal to `after_step` when no
    /// merge happened).
    pub after_merge: Vec<f64>,
    pub merges: Vec<usize>,
}

pub fn em_fit(votes: &ArrayView2<f64>, k: usize, sigma: f64, cfg: &EMConfig) -> Result<MixtureParams> {
    run_em(votes, k, sigma, cfg, None)
}

/// Runs `cfg.max_iter` EM iterations from a furthest point sample of the
/// votes, then polishes to a fixed point (see [`EMConfig::tol`]). Merge passes
/// run when `i % merge_freq == 0` and after the last step, so no active pair
/// is closer than `tau` on return.
pub fn em_fit_traced(
    votes: &ArrayView2<f64>,
    k: usize,
    sigma: f64,
    cfg: &EMConfig,
) -> Result<(MixtureParams, EmTrace)> {
    let mut trace = EmTrace::default();
    let alpha = run_em(votes, k, sigma, cfg, Some(&mut trace))?;
    Ok((alpha, trace))
}

fn run_em(
    votes: &ArrayView2<f64>,
    k: usize,
    sigma: f64,
    cfg: &EMConfig,
    mut trace: Option<&mut EmTrace>,
) -> Result<MixtureParams> {
    cfg.validate()?;
    let n = votes.nrows();
    if k == 0 || k > n {
        return invalid(format!("need 1 <= k <= n, got k = {k}, n = {n}"));
    }
    if votes.iter().any(|v| !v.is_finite()) {
        return Err(ApenError::NumericFailure("non-finite vote".into()));
    }
    let start = {
        use rand::{Rng, SeedableRng};
        rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed).random_range(0..n)
    };
    let centers = furthest_point_sample(votes, k, start);
    let means = votes.select(Axis(0), &centers);
    let mut alpha = MixtureParams::new(means, vec![1.0 / k as f64; k], sigma)?;
    if let Some(t) = trace.as_deref_mut() {
        t.initial = log_likelihood(votes, &alpha)?;
    }
    let mut record = |alpha: &mut MixtureParams, merge: bool| -> Result<usize> {
        let stepped = match trace {
            Some(_) => log_likelihood(votes, alpha)?,
            None => 0.0,
        };
        let merged = if merge { merge_pass(alpha, cfg.tau) } else { 0 };
        if let Some(t) = trace.as_deref_mut() {
            t.after_step.push(stepped);
            t.merges.push(merged);
            t.after_merge.push(if merged > 0 { log_likelihood(votes, alpha)? } else { stepped });
        }
        Ok(merged)
    };
    for i in 0..cfg.max_iter {
        alpha = em_step(votes, &alpha)?;
        let polishing = cfg.tol > 0.0 && i + 1 == cfg.max_iter;
        record(&mut alpha, i % cfg.merge_freq == 0 || (i + 1 == cfg.max_iter && !polishing))?;
    }
    if cfg.tol > 0.0 {
        let mut left = cfg.max_polish;
        loop {
            while left > 0 {
                let next = em_step(votes, &alpha)?;
                let moved = param_change(&alpha, &next);
                alpha = next;
                left -= 1;
                let last = moved <= cfg.tol || left == 0;
                if last {
                    break;
                }
                record(&mut alpha, false)?;
            }
            if record(&mut alpha, true)? == 0 || left == 0 {
                break;
            }
        }
    }
    Ok(alpha)
}

/// Largest change between two parameter sets, means in units of sigma.
fn param_change(a: &MixtureParams, b: &MixtureParams) -> f64 {
    let mut worst = 0.0f64;
    for j in a.active_indices() {
        worst = worst.max((a.weights[j] - b.weights[j]).abs());
        for (u, v) in a.means.row(j).iter().zip(b.means.row(j)) {
            worst = worst.max((u - v).abs() / a.sigma);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_pair(&[1.0, 2.0], &[1.0, 2.0], 0.3), 0.0);
        let s = 0.7;
        let kl = kl_pair(&[0.0, 0.0], &[s * 2f64.sqrt(), 0.0], s);
        assert!((kl - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_responsibility() {
        let alpha = MixtureParams::new(array![[0.0], [4.0]], vec![0.5, 0.5], 1.0).unwrap();
        let q = responsibilities(&array![[1.0]].view(), &alpha).unwrap();
        let (a, b) = ((-0.5f64).exp(), (-4.5f64).exp());
        assert!((q.weights()[[0, 0]] - a / (a + b)).abs() < 1e-15);
        assert!((q.weights()[[0, 1]] - b / (a + b)).abs() < 1e-15);
    }

    #[test]
    fn equidistant_point_splits_evenly() {
        let alpha = MixtureParams::new(array![[-1.0, 0.0], [1.0, 0.0]], vec![0.5, 0.5], 0.5).unwrap();
        let q = responsibilities(&array![[0.0, 3.0]].view(), &alpha).unwrap();
        assert!(q.weights().iter().all(|w| (w - 0.5).abs() < 1e-15));
    }

    #[test]
    fn inactive_components_get_zero() {
        let mut alpha = MixtureParams::new(array![[0.0], [1.0]], vec![1.0, 0.0], 1.0).unwrap();
        let q = responsibilities(&array![[0.9], [5.0]].view(), &alpha).unwrap();
        assert_eq!(q.weights().column(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(q.weights().column(0).to_vec(), vec![1.0, 1.0]);
        alpha.active = vec![false, false];
        assert!(responsibilities(&array![[0.0]].view(), &alpha).is_err());
    }

    #[test]
    fn hand_computed_step() {
        // d = 1, sigma = 1, means (0, 2), equal weights.
        let v = array![[0.0], [1.0], [2.0], [3.0]];
        let alpha = MixtureParams::new(array![[0.0], [2.0]], vec![0.5, 0.5], 1.0).unwrap();
        let g = |x: f64| {
            let a = (-x * x / 2.0).exp();
            let b = (-(x - 2.0) * (x - 2.0) / 2.0).exp();
            a / (a + b)
        };
        let g0: Vec<f64> = [0.0, 1.0, 2.0, 3.0].iter().map(|&x| g(x)).collect();
        let m0: f64 = g0.iter().sum();
        let m1 = 4.0 - m0;
        let mu0 = g0.iter().zip([0.0, 1.0, 2.0, 3.0]).map(|(g, x)| g * x).sum::<f64>() / m0;
        let mu1 = g0.iter().zip([0.0, 1.0, 2.0, 3.0]).map(|(g, x)| (1.0 - g) * x).sum::<f64>() / m1;
        let next = em_step(&v.view(), &alpha).unwrap();
        assert!((next.means[[0, 0]] - mu0).abs() < 1e-12);
        assert!((next.means[[1, 0]] - mu1).abs() < 1e-12);
        assert!((next.weights[0] - m0 / 4.0).abs() < 1e-12);
        assert!((next.weights[1] - m1 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn heavier_component_survives_merge() {
        let mut alpha = MixtureParams::new(array![[0.0], [0.1], [9.0]], vec![0.2, 0.3, 0.5], 1.0).unwrap();
        assert_eq!(merge_pass(&mut alpha, 1.0), 1);
        assert_eq!(alpha.active, vec![false, true, true]);
        assert!((alpha.weights[1] - 0.5).abs() < 1e-15);
        let total: f64 = alpha.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn merge_tie_keeps_lower_index() {
        let mut alpha = MixtureParams::new(array![[0.0], [0.0]], vec![0.5, 0.5], 1.0).unwrap();
        merge_pass(&mut alpha, 1.0);
        assert_eq!(alpha.active, vec![true, false]);
    }

    #[test]
    fn identical_votes_collapse() {
        let v = Array2::from_elem((10, 2), 0.25);
        let cfg = EMConfig {
            tau: 0.5,
            ..EMConfig::default()
        };
        let (alpha, trace) = em_fit_traced(&v.view(), 2, 0.1, &cfg).unwrap();
        assert_eq!(alpha.num_active(), 1);
        assert_eq!(trace.merges[0], 1);
    }

    #[test]
    fn separated_clusters_recover_centroids() {
        let sigma = 0.1;
        let mut v = Array2::zeros((40, 2));
        for i in 0..20 {
            let t = i as f64 * 0.3;
            v.row_mut(i).assign(&array![0.01 * t.cos(), 0.01 * t.sin()]);
            v.row_mut(20 + i).assign(&array![1.0 + 0.01 * t.sin(), 0.01 * t.cos()]);
        }
        let cfg = EMConfig {
            tau: 0.1,
            ..EMConfig::default()
        };
        let alpha = em_fit(&v.view(), 2, sigma, &cfg).unwrap();
        let c0 = v.slice(ndarray::s![0..20, ..]).mean_axis(Axis(0)).unwrap();
        let c1 = v.slice(ndarray::s![20..40, ..]).mean_axis(Axis(0)).unwrap();
        let (a, b) = if alpha.means[[0, 0]] < 0.5 { (0, 1) } else { (1, 0) };
        assert!((&alpha.means.row(a) - &c0).iter().all(|x| x.abs() < 1e-6));
        assert!((&alpha.means.row(b) - &c1).iter().all(|x| x.abs() < 1e-6));
        assert!((alpha.weights[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn bad_configuration_is_rejected() {
        let v = Array2::zeros((3, 2));
        let cfg = EMConfig {
            max_iter: 0,
            ..EMConfig::default()
        };
        assert!(em_fit(&v.view(), 2, 0.1, &cfg).is_err());
        assert!(em_fit(&v.view(), 4, 0.1, &EMConfig::default()).is_err());
    }
}
