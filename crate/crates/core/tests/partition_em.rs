use std::collections::HashMap;

use apen::em::*;
use apen::geom::{random_motion_with, HardPartition, PointCloud, SoftPartition};
use apen::metrics::delta;
use gradgraph::Graph;
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn blobs(centers: &[[f64; 2]], per: usize, spread: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((centers.len() * per, 2), |(i, a)| {
        centers[i / per][a] + spread * rng.sample::<f64, _>(StandardNormal)
    })
}

fn flat_normals(n: usize, d: usize) -> Array2<f64> {
    let mut nrm = Array2::zeros((n, d));
    nrm.column_mut(0).fill(1.0);
    nrm
}

#[test]
fn uniform_sampler_passes_chi_squared() {
    let (n, k, draws) = (6, 2, 100_000u64);
    let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for s in 0..draws {
        let z = q_simple_uniform(n, k, s).unwrap();
        *counts.entry(z.labels().to_vec()).or_default() += 1;
    }
    // Every onto assignment, and only those.
    let cells = (1usize << n) - 2;
    assert_eq!(counts.len(), cells);
    assert!(counts.keys().all(|l| l.contains(&0) && l.contains(&1)));
    let expected = draws as f64 / cells as f64;
    let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "chi2 = {stat}, critical = {critical}");
}

#[test]
fn uniform_sampler_edge_cases() {
    for s in 0..20 {
        assert_eq!(q_simple_uniform(5, 5, s).unwrap().sizes(), vec![1; 5]);
        assert_eq!(q_simple_uniform(5, 1, s).unwrap().labels(), &[0; 5]);
    }
    assert!(q_simple_uniform(3, 4, 0).is_err());
    assert_eq!(q_simple_uniform(9, 4, 11).unwrap(), q_simple_uniform(9, 4, 11).unwrap());
}

#[test]
fn fps_recovers_separated_pairs_for_every_seed() {
    let pos = array![[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.0, 0.1]];
    let x = PointCloud::new(pos, flat_normals(4, 2)).unwrap();
    for seed in 0..64 {
        let z = q_simple_fps(&x, 2, seed).unwrap();
        let l = z.labels();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[2], l[3]);
        assert_ne!(l[0], l[2]);
    }
    for start in 0..4 {
        assert_eq!(fps_voronoi(&x, 4, start).unwrap().sizes(), vec![1; 4]);
    }
    assert!(q_simple_fps(&x, 5, 0).is_err());
}

#[test]
fn kl_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sigma = 0.8;
    let a: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let b: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let log_pdf = |x: [f64; 2], m: &[f64]| {
        let r2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
        -r2 / (2.0 * sigma * sigma) - (2.0 * std::f64::consts::PI * sigma * sigma).ln()
    };
    // Midpoint rule over ±10σ around `a`.
    let (steps, half) = (800, 10.0 * sigma);
    let h = 2.0 * half / steps as f64;
    let mut kl = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            let x = [a[0] - half + (i as f64 + 0.5) * h, a[1] - half + (j as f64 + 0.5) * h];
            let la = log_pdf(x, &a);
            kl += la.exp() * (la - log_pdf(x, &b)) * h * h;
        }
    }
    assert!((kl - kl_pair(&a, &b, sigma)).abs() < 1e-3, "{kl} vs {}", kl_pair(&a, &b, sigma));
    assert_eq!(kl_pair(&a, &a, sigma), 0.0);
    assert!((kl_pair(&[0.0, 0.0], &[sigma * 2f64.sqrt(), 0.0], sigma) - 1.0).abs() < 1e-12);
}

#[test]
fn tight_blobs_leave_one_column_each() {
    let sigma = 0.05;
    let v = blobs(&[[0.0, 0.0], [20.0 * sigma, 0.0], [0.0, 20.0 * sigma]], 15, 0.2 * sigma, 1);
    let cfg = EMConfig {
        tau: 0.5,
        ..EMConfig::default()
    };
    let p = q_predict(&v.view(), 8, sigma, &cfg).unwrap();
    assert_eq!(p.q.k(), 3);
    assert!(delta(&p.q) < 1e-6);
    for row in p.q.weights().rows() {
        assert!((row.sum() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn wide_sigma_collapses_to_one_column() {
    let v = blobs(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 10, 0.1, 2);
    let cfg = EMConfig {
        tau: 2.0,
        ..EMConfig::default()
    };
    let p = q_predict(&v.view(), 6, 10.0, &cfg).unwrap();
    assert_eq!(p.q.k(), 1);
    assert!(p.q.weights().iter().all(|&w| w == 1.0));
}

#[test]
fn delta_falls_as_blobs_separate() {
    let sigma = 0.2;
    let mut seen = Vec::new();
    for sep in [2.0, 5.0, 10.0, 20.0] {
        let v = blobs(&[[0.0, 0.0], [sep * sigma, 0.0]], 20, 0.5 * sigma, 4);
        let cfg = EMConfig {
            tau: 0.5,
            ..EMConfig::default()
        };
        let p = q_predict(&v.view(), 2, sigma, &cfg).unwrap();
        seen.push(delta(&p.q));
    }
    assert!(seen.windows(2).all(|w| w[1] <= w[0]), "{seen:?}");
    assert!(seen[0] > 1e-3 && seen[3] < 1e-6, "{seen:?}");
}

#[test]
fn row_permutation_keeps_column_multiset() {
    let v = blobs(&[[0.0, 0.0], [2.0, 0.0], [1.0, 2.0]], 8, 0.2, 6);
    let cfg = EMConfig {
        tau: 1.0,
        ..EMConfig::default()
    };
    let base = q_predict(&v.view(), 3, 0.3, &cfg).unwrap();
    let n = v.nrows();
    let perm: Vec<usize> = (0..n).rev().collect();
    let moved = q_predict(&v.select(Axis(0), &perm).view(), 3, 0.3, &cfg).unwrap();
    assert_eq!(base.q.k(), moved.q.k());
    // Sort each column (after undoing the permutation) by its first entry.
    let columns = |q: &SoftPartition, back: &dyn Fn(usize) -> usize| {
        let mut cols: Vec<Vec<f64>> = (0..q.k()).map(|c| (0..n).map(|i| q.weights()[[back(i), c]]).collect()).collect();
        cols.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cols
    };
    let a = columns(&base.q, &|i| i);
    let b = columns(&moved.q, &|i| n - 1 - i);
    for (ca, cb) in a.iter().zip(&b) {
        for (x, y) in ca.iter().zip(cb) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
}

/// Central differences of the whole EM + correction + responsibilities
/// pipeline against the graph Jacobian, on three blobs in the plane.
#[test]
fn implicit_jacobian_matches_pipeline_differences() {
    let v = blobs(&[[0.0, 0.0], [1.2, 0.0], [0.6, 1.0]], 10, 0.15, 9);
    let (k, sigma) = (3, 0.25);
    let cfg = EMConfig {
        tau: 0.5,
        ..EMConfig::default()
    };
    let base = q_predict(&v.view(), k, sigma, &cfg).unwrap();
    let (n, ka) = base.q.weights().dim();
    let mut g = Graph::new();
    let vn = g.variable(v.clone());
    let node = q_predict_node(&mut g, vn, k, sigma, &cfg).unwrap();
    let mut jac = Array2::<f64>::zeros((n * ka, v.len()));
    for i in 0..n {
        for c in 0..ka {
            let mut pick = Array2::zeros((n, ka));
            pick[[i, c]] = 1.0;
            let w = g.constant(pick);
            let prod = g.mul(node.q, w).unwrap();
            let loss = g.sum(prod);
            let grads = g.backward(loss).unwrap();
            let row = grads.get(vn).unwrap();
            jac.row_mut(i * ka + c).assign(&Array2::from_shape_vec((1, v.len()), row.iter().copied().collect()).unwrap().row(0));
        }
    }
    let h = 1e-6;
    let mut fd = Array2::<f64>::zeros((n * ka, v.len()));
    for p in 0..v.len() {
        let (r, a) = (p / 2, p % 2);
        let eval = |s: f64| {
            let mut w = v.clone();
            w[[r, a]] += s;
            let out = q_predict(&w.view(), k, sigma, &cfg).unwrap();
            assert_eq!(out.active, base.active, "active set changed under perturbation");
            out.q.weights().clone()
        };
        let col = (eval(h) - eval(-h)) / (2.0 * h);
        fd.column_mut(p).assign(&Array2::from_shape_vec((n * ka, 1), col.iter().copied().collect()).unwrap().column(0));
    }
    let scale = jac.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let worst = jac
        .iter()
        .zip(fd.iter())
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6 * scale))
        .fold(0.0, f64::max);
    assert!(worst <= 1e-3, "relative error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn likelihood_never_drops_between_merges(seed in 0u64..100_000, k in 1usize..6, sigma in 0.1f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_fn((24, 2), |_| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let cfg = EMConfig { tau: 1.0, seed, ..EMConfig::default() };
        let (alpha, trace) = em_fit_traced(&v.view(), k, sigma, &cfg).unwrap();
        let mut prev = trace.initial;
        for (step, merged) in trace.after_step.iter().zip(&trace.after_merge) {
            prop_assert!(*step >= prev - 1e-9, "{step} < {prev}");
            prev = *merged;
        }
        let act = alpha.active_indices();
        for (i, &a) in act.iter().enumerate() {
            for &b in &act[i + 1..] {
                let kl = kl_pair(&alpha.means.row(a).to_vec(), &alpha.means.row(b).to_vec(), sigma);
                prop_assert!(kl >= cfg.tau);
            }
        }
        prop_assert!((alpha.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for j in 0..alpha.k() {
            prop_assert_eq!(alpha.active[j], alpha.weights[j] > 0.0);
        }
    }

    #[test]
    fn responsibilities_follow_rigid_motions(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_fn((12, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let means = Array2::from_shape_fn((3, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let alpha = MixtureParams::new(means.clone(), vec![0.2, 0.5, 0.3], 0.7).unwrap();
        let g = random_motion_with(&mut rng, 3, 5.0);
        let moved = MixtureParams::new(g.apply_points(&means.view()), vec![0.2, 0.5, 0.3], 0.7).unwrap();
        let a = responsibilities(&v.view(), &alpha).unwrap();
        let b = responsibilities(&g.apply_points(&v.view()).view(), &moved).unwrap();
        let err = (a.weights() - b.weights()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn fps_cells_cover_every_center(seed in 0u64..100_000, k in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = Array2::from_shape_fn((10, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let x = PointCloud::new(pos, flat_normals(10, 3)).unwrap();
        let z: HardPartition = q_simple_fps(&x, k, seed).unwrap();
        prop_assert_eq!(z.num_nonempty(), k);
    }
}
