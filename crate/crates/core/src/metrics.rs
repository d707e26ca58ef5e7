//! Partition quality and equivariance estimators, and task scores.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::em::{fps_voronoi, q_simple_fps, q_simple_uniform};
use crate::error::{invalid, Result};
use crate::geom::{argmax, apply_piecewise, random_motion_with, refines, HardPartition, PiecewiseMotion, PointCloud, SoftPartition};
use crate::net::FeatureField;

/// Largest `n` accepted by exact enumeration.
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaMode {
    MonteCarlo,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaEstimate {
    pub value: f64,
    /// Draws made, or outcomes enumerated in exact mode.
    pub trials: usize,
    /// Normal-approximation 95% half-width; 0 in exact mode.
    pub ci95: f64,
    pub mode: LambdaMode,
}

/// Reference partition sampler with `k` parts.
#[derive(Debug, Clone, Copy)]
pub enum Sampler<'a> {
    Uniform { n: usize, k: usize },
    Fps { cloud: &'a PointCloud, k: usize },
}

impl Sampler<'_> {
    pub fn n(&self) -> usize {
        match self {
            Sampler::Uniform { n, .. } => *n,
            Sampler::Fps { cloud, .. } => cloud.n(),
        }
    }

    pub fn sample(&self, seed: u64) -> Result<HardPartition> {
        match *self {
            Sampler::Uniform { n, k } => q_simple_uniform(n, k, seed),
            Sampler::Fps { cloud, k } => q_simple_fps(cloud, k, seed),
        }
    }
}

/// Independent per-trial seed.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    let mut z = seed ^ trial.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Probability that a draw from `sampler` fails to refine `z_gt`.
pub fn lambda_estimate(
    sampler: &Sampler,
    z_gt: &HardPartition,
    trials: usize,
    seed: u64,
    mode: LambdaMode,
) -> Result<LambdaEstimate> {
    let n = sampler.n();
    if z_gt.n() != n {
        return invalid(format!("ground truth has {} points, sampler draws {n}", z_gt.n()));
    }
    match mode {
        LambdaMode::Exact => exact_lambda(sampler, z_gt),
        LambdaMode::MonteCarlo => {
            if trials == 0 {
                return invalid("trials must be positive");
            }
            let bad = (0..trials as u64)
                .into_par_iter()
                .map(|t| sampler.sample(trial_seed(seed, t)).map(|z| usize::from(!refines(&z, z_gt))))
                .try_reduce(|| 0, |a, b| Ok(a + b))?;
            let p = bad as f64 / trials as f64;
            Ok(LambdaEstimate {
                value: p,
                trials,
                ci95: 1.96 * (p * (1.0 - p) / trials as f64).sqrt(),
                mode,
            })
        }
    }
}

fn exact_lambda(sampler: &Sampler, z_gt: &HardPartition) -> Result<LambdaEstimate> {
    let n = sampler.n();
    if n > EXACT_MAX_N {
        return invalid(format!("exact mode supports n <= {EXACT_MAX_N}, got {n}"));
    }
    let (bad, total) = match *sampler {
        Sampler::Uniform { k, .. } => {
            if k == 0 || k > n {
                return invalid(format!("need 1 <= k <= n, got k = {k}, n = {n}"));
            }
            // Every labelling of a set partition has the same mass, so
            // counting unlabelled partitions with exactly k blocks suffices.
            let mut bad = 0usize;
            let mut total = 0usize;
            for_each_partition(n, k, &mut |labels| {
                total += 1;
                let z = HardPartition::new(labels.to_vec(), k).expect("labels below k");
                if !refines(&z, z_gt) {
                    bad += 1;
                }
            });
            (bad, total)
        }
        Sampler::Fps { cloud, k } => {
            // The only randomness is the uniform start index.
            let mut bad = 0usize;
            for start in 0..n {
                let z = fps_voronoi(cloud, k, start)?;
                bad += usize::from(!refines(&z, z_gt));
            }
            (bad, n)
        }
    };
    Ok(LambdaEstimate {
        value: bad as f64 / total as f64,
        trials: total,
        ci95: 0.0,
        mode: LambdaMode::Exact,
    })
}

/// Calls `f` with every restricted-growth string of length `n` that uses
/// exactly `k` blocks.
fn for_each_partition(n: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(labels: &mut Vec<usize>, used: usize, n: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
        let i = labels.len();
        if i == n {
            if used == k {
                f(labels);
            }
            return;
        }
        if k - used > n - i {
            return;
        }
        for b in 0..=used.min(k - 1) {
            labels.push(b);
            rec(labels, used.max(b + 1), n, k, f);
            labels.pop();
        }
    }
    rec(&mut Vec::with_capacity(n), 0, n, k, f);
}

/// `Σ_i (1 − max_j q_ij)`.
pub fn delta(q: &SoftPartition) -> f64 {
    q.weights()
        .rows()
        .into_iter()
        .map(|r| 1.0 - r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
        .sum()
}

/// Row-independent draw from a soft partition.
pub fn sample_soft<R: Rng + ?Sized>(q: &SoftPartition, rng: &mut R) -> HardPartition {
    let labels = q
        .weights()
        .rows()
        .into_iter()
        .map(|r| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (j, &w) in r.iter().enumerate() {
                acc += w;
                if u < acc {
                    return j;
                }
            }
            // Rounding left `u` past the last cumulative sum.
            r.iter().rposition(|&w| w > 0.0).unwrap_or(0)
        })
        .collect();
    HardPartition::new(labels, q.k()).expect("labels below k")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivReport {
    pub trials: usize,
    /// Mean Frobenius error of the type-1 outputs.
    pub mean_error: f64,
    /// Mean Frobenius error of the type-0 outputs.
    pub mean_scalar_error: f64,
    /// Largest error among draws with `Z = Z*` that refine the ground truth.
    pub conditional_error: f64,
    pub conditional_count: usize,
    /// Draws with `Z != Z*`.
    pub count_a: usize,
    /// Draws that fail to refine the ground truth.
    pub count_b: usize,
    pub lambda: f64,
    pub delta: f64,
    /// Largest type-1 output norm seen.
    pub m_hat: f64,
    pub bound_m: f64,
    pub bound_2m: f64,
}

/// Monte Carlo estimate of `E ‖φ(g·X, Z) − g·φ(X, Z)‖` over `Z ~ q`
/// (row-independent) and piecewise motions `g` drawn per ground-truth part.
///
/// `model` evaluates the function on a cloud with a given partition. Type-1
/// outputs of point `i` are rotated by the motion of its ground-truth part.
pub fn equiv_error<F>(
    model: F,
    x: &PointCloud,
    q: &SoftPartition,
    z_gt: &HardPartition,
    translation_scale: f64,
    trials: usize,
    seed: u64,
) -> Result<EquivReport>
where
    F: Fn(&PointCloud, &HardPartition) -> Result<FeatureField> + Sync,
{
    if trials == 0 {
        return invalid("trials must be positive");
    }
    if q.n() != x.n() || z_gt.n() != x.n() {
        return invalid("partition sizes differ from the cloud");
    }
    let z_star = HardPartition::new(
        q.weights().rows().into_iter().map(|r| argmax(r.iter().copied())).collect(),
        q.k(),
    )?;
    let d = x.d();
    let outcomes: Vec<Trial> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, t));
            let z = sample_soft(q, &mut rng);
            let motions = (0..z_gt.k()).map(|_| random_motion_with(&mut rng, d, translation_scale)).collect();
            let g = PiecewiseMotion::new(motions)?;
            let moved = apply_piecewise(&g, x, z_gt)?;
            let base = model(x, &z)?;
            let out = model(&moved, &z)?;
            let err_v = frob(&(&out.vectors - &base.transform(&g, z_gt)?.vectors));
            let err_s = frob(&(&out.scalars - &base.scalars));
            Ok(Trial {
                err_v: err_v.sqrt(),
                err_s,
                norm: frob(&base.vectors).max(frob(&out.vectors)),
                in_a: z != z_star,
                in_b: !refines(&z, z_gt),
            })
        })
        .collect::<Result<_>>()?;
    let n = trials as f64;
    let mut report = EquivReport {
        trials,
        mean_error: outcomes.iter().map(|t| t.err_v).sum::<f64>() / n,
        mean_scalar_error: outcomes.iter().map(|t| t.err_s).sum::<f64>() / n,
        conditional_error: 0.0,
        conditional_count: 0,
        count_a: outcomes.iter().filter(|t| t.in_a).count(),
        count_b: outcomes.iter().filter(|t| t.in_b).count(),
        lambda: 0.0,
        delta: delta(q),
        m_hat: outcomes.iter().map(|t| t.norm).fold(0.0, f64::max),
        bound_m: 0.0,
        bound_2m: 0.0,
    };
    for t in outcomes.iter().filter(|t| !t.in_a && !t.in_b) {
        report.conditional_count += 1;
        report.conditional_error = report.conditional_error.max(t.err_v.max(t.err_s));
    }
    report.lambda = report.count_b as f64 / n;
    report.bound_m = (report.lambda + report.delta) * report.m_hat;
    report.bound_2m = 2.0 * report.bound_m;
    Ok(report)
}

struct Trial {
    err_v: f64,
    err_s: f64,
    norm: f64,
    in_a: bool,
    in_b: bool,
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Intersection over union averaged over the classes present in `gt`.
pub fn mean_iou(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if gt.is_empty() {
        return invalid("empty ground truth");
    }
    if pred.len() != gt.len() {
        return invalid(format!("{} predictions for {} labels", pred.len(), gt.len()));
    }
    let mut classes: Vec<usize> = gt.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
            let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
            inter as f64 / union as f64
        })
        .sum();
    Ok(total / classes.len() as f64)
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if gt.is_empty() {
        return invalid("empty ground truth");
    }
    if pred.len() != gt.len() {
        return invalid(format!("{} predictions for {} labels", pred.len(), gt.len()));
    }
    Ok(pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64 / gt.len() as f64)
}

/// Best mean IoU over all relabellings of the predicted parts, for unlabeled
/// partitions with at most 8 parts.
pub fn matched_iou(pred: &HardPartition, gt: &HardPartition) -> Result<f64> {
    if pred.n() != gt.n() {
        return invalid("partitions have different sizes");
    }
    let k = pred.k().max(gt.k());
    if k > 8 {
        return invalid("matched_iou supports at most 8 parts");
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0.0f64;
    permutations(&mut perm, 0, &mut |p| {
        let relabeled: Vec<usize> = pred.labels().iter().map(|&l| p[l]).collect();
        if let Ok(v) = mean_iou(&relabeled, gt.labels()) {
            best = best.max(v);
        }
    });
    Ok(best)
}

fn permutations(p: &mut Vec<usize>, i: usize, f: &mut dyn FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permutations(p, i + 1, f);
        p.swap(i, j);
    }
}
