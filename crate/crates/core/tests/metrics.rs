use apen::geom::*;
use apen::metrics::*;
use apen::net::{piecewise_layer, FeatureField, ModelConfig, ModelParams};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn halves(n: usize) -> HardPartition {
    HardPartition::new((0..n).map(|i| usize::from(i >= n / 2)).collect(), 2).unwrap()
}

#[test]
fn lambda_endpoints() {
    let gt = halves(8);
    for mode in [LambdaMode::Exact, LambdaMode::MonteCarlo] {
        let all = lambda_estimate(&Sampler::Uniform { n: 8, k: 8 }, &gt, 500, 1, mode).unwrap();
        let one = lambda_estimate(&Sampler::Uniform { n: 8, k: 1 }, &gt, 500, 1, mode).unwrap();
        assert_eq!(all.value, 0.0);
        assert_eq!(one.value, 1.0);
    }
}

#[test]
fn exact_lambda_matches_brute_force_assignments() {
    let n = 6;
    let gt = halves(n);
    // Every labelled onto assignment, counted directly.
    let (mut bad, mut total) = (0, 0);
    for code in 0..1u32 << n {
        let labels: Vec<usize> = (0..n).map(|i| (code >> i & 1) as usize).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        total += 1;
        bad += usize::from(!refines(&HardPartition::new(labels, 2).unwrap(), &gt));
    }
    assert_eq!(total, 62);
    let want = bad as f64 / total as f64;
    let sampler = Sampler::Uniform { n, k: 2 };
    let exact = lambda_estimate(&sampler, &gt, 1, 0, LambdaMode::Exact).unwrap();
    assert!((exact.value - want).abs() < 1e-15);
    let mc = lambda_estimate(&sampler, &gt, 100_000, 7, LambdaMode::MonteCarlo).unwrap();
    assert!((mc.value - want).abs() <= 3.0 * mc.ci95, "{} vs {want} (ci {})", mc.value, mc.ci95);
}

#[test]
fn exact_fps_lambda_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pos = Array2::from_shape_fn((10, 2), |(i, a)| {
        let c = if i >= 5 && a == 0 { 1.0 } else { 0.0 };
        c + 0.4 * rng.sample::<f64, _>(StandardNormal)
    });
    let x = PointCloud::new(pos, Array2::from_shape_fn((10, 2), |(_, a)| (a == 0) as u8 as f64)).unwrap();
    let gt = halves(10);
    let sampler = Sampler::Fps { cloud: &x, k: 3 };
    let exact = lambda_estimate(&sampler, &gt, 1, 0, LambdaMode::Exact).unwrap();
    let mc = lambda_estimate(&sampler, &gt, 20_000, 3, LambdaMode::MonteCarlo).unwrap();
    assert!((mc.value - exact.value).abs() <= 3.0 * mc.ci95.max(1e-3));
}

#[test]
fn exact_mode_is_capped() {
    let gt = halves(EXACT_MAX_N + 1);
    let r = lambda_estimate(&Sampler::Uniform { n: EXACT_MAX_N + 1, k: 2 }, &gt, 1, 0, LambdaMode::Exact);
    assert!(matches!(r, Err(apen::ApenError::InvalidArgument(_))));
}

#[test]
fn monte_carlo_is_reproducible() {
    let gt = halves(10);
    let s = Sampler::Uniform { n: 10, k: 4 };
    let a = lambda_estimate(&s, &gt, 2000, 9, LambdaMode::MonteCarlo).unwrap();
    let b = lambda_estimate(&s, &gt, 2000, 9, LambdaMode::MonteCarlo).unwrap();
    assert_eq!(a, b);
}

#[test]
fn delta_examples() {
    let q = SoftPartition::new(array![[0.9, 0.1], [0.6, 0.4]]).unwrap();
    assert!((delta(&q) - 0.5).abs() < 1e-15);
    assert_eq!(delta(&SoftPartition::from_hard(&halves(6))), 0.0);
    assert!((delta(&SoftPartition::uniform(6, 3)) - 6.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn task_scores() {
    assert_eq!(mean_iou(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
    assert_eq!(mean_iou(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
    let m = mean_iou(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
    assert!((m - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap(), 2.0 / 3.0);
    assert!(mean_iou(&[], &[]).is_err());
}

/// Two elongated parts, well apart, with a layer model that takes only
/// invariant inputs besides the geometry.
fn setup() -> (PointCloud, HardPartition, impl Fn(&PointCloud, &HardPartition) -> apen::Result<FeatureField> + Sync) {
    let mut cfg = ModelConfig::desk(3, 2);
    cfg.hidden = vec![8, 8];
    cfg.post = vec![8];
    let params = ModelParams::init(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 40;
    let pos = Array2::from_shape_fn((n, 3), |(i, a)| {
        let scale = [1.0, 0.5, 0.2][a];
        let shift = if i >= n / 2 && a == 0 { 5.0 } else { 0.0 };
        shift + scale * rng.sample::<f64, _>(StandardNormal)
    });
    let mut nrm = Array2::from_shape_fn((n, 3), |_| rng.sample::<f64, _>(StandardNormal));
    for mut r in nrm.rows_mut() {
        let len = r.dot(&r).sqrt();
        r /= len;
    }
    let x = PointCloud::new(pos, nrm).unwrap();
    let spec = cfg.layers[0].clone();
    let model = move |x: &PointCloud, z: &HardPartition| {
        let feats = FeatureField {
            scalars: Array2::ones((x.n(), 2)),
            vectors: Array2::zeros((x.n(), 0)),
            d: 3,
        };
        Ok(piecewise_layer(&params.store, "enc0", x, &feats, z, spec.a_out, spec.b_out)?.0)
    };
    (x, halves(n), model)
}

#[test]
fn refining_one_hot_partition_has_no_error() {
    let (x, gt, model) = setup();
    let r = equiv_error(&model, &x, &SoftPartition::from_hard(&gt), &gt, 2.0, 20, 1).unwrap();
    assert!(r.mean_error <= 1e-6);
    assert_eq!(r.conditional_count, 20);
    assert_eq!((r.count_a, r.count_b), (0, 0));
    let one = HardPartition::new(vec![0; x.n()], 1).unwrap();
    let r = equiv_error(&model, &x, &SoftPartition::from_hard(&one), &one, 2.0, 20, 1).unwrap();
    assert!(r.mean_error <= 1e-6);
}

#[test]
fn mixed_part_breaks_equivariance() {
    let (x, gt, model) = setup();
    let good = equiv_error(&model, &x, &SoftPartition::from_hard(&gt), &gt, 2.0, 20, 3).unwrap();
    // Part 1 takes the last quarter of the first ground-truth part.
    let n = x.n();
    let mixed = HardPartition::new((0..n).map(|i| usize::from(i >= 3 * n / 8)).collect(), 2).unwrap();
    let bad = equiv_error(&model, &x, &SoftPartition::from_hard(&mixed), &gt, 2.0, 20, 3).unwrap();
    assert_eq!(bad.count_b, 20);
    assert!(bad.mean_error > 10.0 * good.mean_error.max(1e-12), "{} vs {}", bad.mean_error, good.mean_error);
}

#[test]
fn soft_partition_error_respects_the_bound() {
    let (x, gt, model) = setup();
    let n = x.n();
    let w = Array2::from_shape_fn((n, 2), |(i, j)| {
        let own = usize::from(i >= n / 2);
        let p = if i % 7 == 0 { 0.8 } else { 0.98 };
        if j == own {
            p
        } else {
            1.0 - p
        }
    });
    let q = SoftPartition::new(w).unwrap();
    let r = equiv_error(&model, &x, &q, &gt, 2.0, 60, 5).unwrap();
    assert!(r.conditional_error <= 1e-6);
    assert!(r.mean_error <= r.bound_2m, "{} > {}", r.mean_error, r.bound_2m);
    assert_eq!(r.bound_2m, 2.0 * r.bound_m);
}
