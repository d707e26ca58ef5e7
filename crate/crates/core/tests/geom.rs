use apen::geom::*;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointCloud {
    let pos = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng));
    let mut nrm: Array2<f64> = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng));
    for mut r in nrm.rows_mut() {
        let len = r.dot(&r).sqrt();
        r /= len;
    }
    PointCloud::new(pos, nrm).unwrap()
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn quarter_turn_moves_position_and_normal() {
    let x = PointCloud::new(array![[1.0, 0.0]], array![[0.0, 1.0]]).unwrap();
    let g = RigidMotion::new(array![[0.0, -1.0], [1.0, 0.0]], array![0.0, 0.0]).unwrap();
    let y = apply_rigid(&g, &x).unwrap();
    assert!(max_abs(&(y.positions() - &array![[0.0, 1.0]])) < 1e-15);
    assert!(max_abs(&(y.normals() - &array![[-1.0, 0.0]])) < 1e-15);
}

#[test]
fn translation_leaves_normals_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_cloud(&mut rng, 5, 3);
    let g = RigidMotion::new(Array2::eye(3), array![1.0, -2.0, 3.0]).unwrap();
    let y = apply_rigid(&g, &x).unwrap();
    assert_eq!(y.normals(), x.normals());
}

#[test]
fn dimension_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_cloud(&mut rng, 5, 3);
    assert!(apply_rigid(&RigidMotion::identity(2), &x).is_err());
    let g = PiecewiseMotion::new(vec![RigidMotion::identity(3)]).unwrap();
    let z = HardPartition::new(vec![0, 1, 0, 1, 0], 2).unwrap();
    assert!(apply_piecewise(&g, &x, &z).is_err());
}

#[test]
fn masked_sum_matches_per_point_loop() {
    let x = PointCloud::new(
        array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 1.0]],
        array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
    )
    .unwrap();
    let z = HardPartition::new(vec![0, 1, 1, 0], 2).unwrap();
    let g0 = RigidMotion::new(array![[0.0, -1.0], [1.0, 0.0]], array![1.0, 1.0]).unwrap();
    let g1 = RigidMotion::new(array![[-1.0, 0.0], [0.0, 1.0]], array![0.0, -2.0]).unwrap();
    let g = PiecewiseMotion::new(vec![g0.clone(), g1.clone()]).unwrap();
    let y = apply_piecewise(&g, &x, &z).unwrap();
    // Σ_j (g_j·X) ⊙ (Z e_j 1ᵀ)
    let a = z.assignment();
    let mut want = Array2::<f64>::zeros((4, 2));
    for (j, gj) in [&g0, &g1].iter().enumerate() {
        let moved = gj.apply_points(&x.positions().view());
        for i in 0..4 {
            for c in 0..2 {
                want[[i, c]] += moved[[i, c]] * a[[i, j]];
            }
        }
    }
    assert!(max_abs(&(y.positions() - &want)) < 1e-15);
}

#[test]
fn hard_from_soft_examples() {
    let q = SoftPartition::new(array![[0.2, 0.5, 0.3], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(hard_from_soft(&q).labels(), &[1, 0, 2]);
}

#[test]
fn refinement_examples() {
    let gt = HardPartition::new(vec![0, 0, 1, 1], 2).unwrap();
    assert!(refines(&gt, &gt));
    assert!(refines(&HardPartition::new(vec![0, 1, 2, 3], 4).unwrap(), &gt));
    assert!(!refines(&HardPartition::new(vec![0, 1, 1, 2], 3).unwrap(), &gt));
    assert!(!refines(&HardPartition::new(vec![0; 4], 1).unwrap(), &gt));
    assert!(refines(&HardPartition::new(vec![0; 4], 1).unwrap(), &HardPartition::new(vec![0; 4], 1).unwrap()));
}

#[test]
fn permute_parts_rejects_non_bijections() {
    let z = HardPartition::new(vec![0, 1, 2], 3).unwrap();
    assert!(permute_parts(&z, &[0, 0, 1]).is_err());
    assert!(permute_parts(&z, &[0, 1]).is_err());
    let swap = [1, 0, 2];
    assert_eq!(permute_parts(&permute_parts(&z, &swap).unwrap(), &swap).unwrap(), z);
}

#[test]
fn motion_sampler_covers_both_components() {
    let mut reflections = 0;
    for seed in 0..1000 {
        let g = random_motion(seed, 3, 1.0).unwrap();
        assert!(orthogonality_error(&g.rotation) <= 1e-12);
        assert!((g.determinant().abs() - 1.0).abs() < 1e-12);
        reflections += usize::from(g.determinant() < 0.0);
    }
    assert!((reflections as f64 / 1000.0 - 0.5).abs() <= 0.05, "{reflections}");
    assert_eq!(random_motion(7, 2, 0.5).unwrap(), random_motion(7, 2, 0.5).unwrap());
}

fn labels_strategy(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(0..k, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_matches_sequential_application(seed in 0u64..10_000, d in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_cloud(&mut rng, 7, d);
        let g1 = random_motion_with(&mut rng, d, 2.0);
        let g2 = random_motion_with(&mut rng, d, 2.0);
        let a = apply_rigid(&g2, &apply_rigid(&g1, &x).unwrap()).unwrap();
        let b = apply_rigid(&compose(&g2, &g1), &x).unwrap();
        prop_assert!(max_abs(&(a.positions() - b.positions())) <= 1e-9);
        prop_assert!(max_abs(&(a.normals() - b.normals())) <= 1e-9);
    }

    #[test]
    fn rigid_motions_preserve_distances(seed in 0u64..10_000, d in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_cloud(&mut rng, 6, d);
        let y = apply_rigid(&random_motion_with(&mut rng, d, 3.0), &x).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let dx = (&x.positions().row(i) - &x.positions().row(j)).mapv(|v| v * v).sum().sqrt();
                let dy = (&y.positions().row(i) - &y.positions().row(j)).mapv(|v| v * v).sum().sqrt();
                prop_assert!((dx - dy).abs() <= 1e-9);
            }
            let len = y.normals().row(i).dot(&y.normals().row(i)).sqrt();
            prop_assert!((len - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_part_reduces_to_rigid(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_cloud(&mut rng, 5, 3);
        let g = random_motion_with(&mut rng, 3, 1.0);
        let z = HardPartition::new(vec![0; 5], 1).unwrap();
        let a = apply_piecewise(&PiecewiseMotion::new(vec![g.clone()]).unwrap(), &x, &z).unwrap();
        prop_assert_eq!(a, apply_rigid(&g, &x).unwrap());
    }

    #[test]
    fn motions_lift_along_refinement(seed in 0u64..10_000, fine in labels_strategy(8, 4)) {
        // Ẑ groups fine parts {0, 1} and {2, 3}; a motion per Ẑ part lifts to
        // one per fine part.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_cloud(&mut rng, 8, 3);
        let z = HardPartition::new(fine.clone(), 4).unwrap();
        let coarse = HardPartition::new(fine.iter().map(|&l| l / 2).collect(), 2).unwrap();
        prop_assert!(refines(&z, &coarse));
        let ga = random_motion_with(&mut rng, 3, 1.0);
        let gb = random_motion_with(&mut rng, 3, 1.0);
        let a = apply_piecewise(&PiecewiseMotion::new(vec![ga.clone(), gb.clone()]).unwrap(), &x, &coarse).unwrap();
        let lifted = PiecewiseMotion::new(vec![ga.clone(), ga, gb.clone(), gb]).unwrap();
        prop_assert_eq!(a, apply_piecewise(&lifted, &x, &z).unwrap());
    }

    #[test]
    fn refinement_is_a_preorder(a in labels_strategy(7, 4), b in labels_strategy(7, 3), c in labels_strategy(7, 2)) {
        let za = HardPartition::new(a, 4).unwrap();
        let zb = HardPartition::new(b, 3).unwrap();
        let zc = HardPartition::new(c, 2).unwrap();
        prop_assert!(refines(&za, &za));
        if refines(&za, &zb) && refines(&zb, &zc) {
            prop_assert!(refines(&za, &zc));
        }
        let singletons = HardPartition::new((0..7).collect(), 7).unwrap();
        prop_assert!(refines(&singletons, &za));
    }

    #[test]
    fn permuting_parts_keeps_refinement(z in labels_strategy(6, 3), gt in labels_strategy(6, 2), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let z = HardPartition::new(z, 3).unwrap();
        let gt = HardPartition::new(gt, 2).unwrap();
        let p = permute_parts(&z, &perm).unwrap();
        prop_assert_eq!(refines(&p, &gt), refines(&z, &gt));
        prop_assert_eq!(p.sizes().iter().sum::<usize>(), 6);
    }

    #[test]
    fn argmax_ignores_monotone_row_rescaling(w in proptest::collection::vec(0.01f64..1.0, 12), s in 0.1f64..10.0) {
        let raw = Array2::from_shape_vec((4, 3), w).unwrap();
        let norm = |m: &Array2<f64>| {
            let mut m = m.clone();
            for mut r in m.rows_mut() {
                let t = r.sum();
                r /= t;
            }
            SoftPartition::new(m).unwrap()
        };
        let a = hard_from_soft(&norm(&raw));
        let b = hard_from_soft(&norm(&raw.mapv(|v| (s * v).powi(3))));
        prop_assert_eq!(a, b);
    }
}
