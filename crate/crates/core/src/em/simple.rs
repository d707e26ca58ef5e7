use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geom::{HardPartition, PointCloud};

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return invalid(format!("need 1 <= k <= n, got k = {k}, n = {n}"));
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Uniform draw over labelled assignments of `n` points onto `k` parts with
/// no part empty.
///
/// An unlabelled set partition with exactly `k` blocks is drawn sequentially
/// from completion counts, then blocks get a uniformly random labelling.
/// Every surjection has probability `1 / (k! S(n, k))`.
pub fn q_simple_uniform(n: usize, k: usize, seed: u64) -> Result<HardPartition> {
    check_k(n, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = completion_table(n, k);
    let mut blocks = Vec::with_capacity(n);
    let mut open = 0usize;
    for i in 0..n {
        let remaining = n - i;
        let here = table[remaining][open];
        let p_new = if open < k {
            (table[remaining - 1][open + 1] - here).exp()
        } else {
            0.0
        };
        if open == 0 || rng.random::<f64>() < p_new {
            blocks.push(open);
            open += 1;
        } else {
            blocks.push(rng.random_range(0..open));
        }
    }
    let mut names: Vec<usize> = (0..k).collect();
    names.shuffle(&mut rng);
    HardPartition::new(blocks.into_iter().map(|b| names[b]).collect(), k)
}

/// `t[m][j]`: log of the number of ways to place `m` more points when `j`
/// blocks are open so that exactly `k` blocks end up used.
fn completion_table(n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut t = vec![vec![f64::NEG_INFINITY; k + 2]; n + 1];
    t[0][k] = 0.0;
    for m in 1..=n {
        for j in 0..=k {
            let join = if j > 0 { (j as f64).ln() + t[m - 1][j] } else { f64::NEG_INFINITY };
            let new = if j < k { t[m - 1][j + 1] } else { f64::NEG_INFINITY };
            t[m][j] = log_add(join, new);
        }
    }
    t
}

/// Greedy furthest point sampling starting at `start`. Ties pick the lowest
/// row index; a row is never picked twice.
pub fn furthest_point_sample(points: &ArrayView2<f64>, k: usize, start: usize) -> Vec<usize> {
    let n = points.nrows();
    let mut chosen = Vec::with_capacity(k);
    let mut dist = vec![f64::INFINITY; n];
    let mut next = start;
    for _ in 0..k {
        chosen.push(next);
        let c = points.row(next);
        dist[next] = f64::NEG_INFINITY;
        for (i, row) in points.rows().into_iter().enumerate() {
            let d2 = row.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            if dist[i] != f64::NEG_INFINITY && d2 < dist[i] {
                dist[i] = d2;
            }
        }
        let mut best = 0;
        for i in 1..n {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        next = best;
    }
    chosen
}

/// Voronoi cells of `k` furthest point samples, started from a seeded
/// uniformly random point. Centers claim their own row first so no cell is
/// empty, even with duplicate points.
pub fn q_simple_fps(x: &PointCloud, k: usize, seed: u64) -> Result<HardPartition> {
    check_k(x.n(), k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fps_voronoi(x, k, rng.random_range(0..x.n()))
}

/// Voronoi cells of `k` furthest point samples started at row `start`.
pub fn fps_voronoi(x: &PointCloud, k: usize, start: usize) -> Result<HardPartition> {
    let n = x.n();
    check_k(n, k)?;
    if start >= n {
        return invalid(format!("start index {start} out of {n} points"));
    }
    let pos = x.positions().view();
    let centers = furthest_point_sample(&pos, k, start);
    let mut labels = vec![usize::MAX; n];
    for (c, &i) in centers.iter().enumerate() {
        if labels[i] == usize::MAX {
            labels[i] = c;
        }
    }
    for i in 0..n {
        if labels[i] != usize::MAX {
            continue;
        }
        let p = pos.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &ci) in centers.iter().enumerate() {
            let q = pos.row(ci);
            let d2: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best_d {
                best = c;
                best_d = d2;
            }
        }
        labels[i] = best;
    }
    HardPartition::new(labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn extreme_k_values() {
        let all = q_simple_uniform(9, 9, 3).unwrap();
        assert_eq!(all.sizes(), vec![1; 9]);
        let one = q_simple_uniform(9, 1, 3).unwrap();
        assert_eq!(one.labels(), &[0; 9]);
        assert!(q_simple_uniform(3, 4, 0).is_err());
        assert!(q_simple_uniform(3, 0, 0).is_err());
    }

    #[test]
    fn completion_counts_match_stirling_numbers() {
        // k! S(n, k) for n = 6: S(6, 2) = 31, S(6, 3) = 90.
        let t = completion_table(6, 2);
        assert!((t[6][0].exp() - 31.0).abs() < 1e-9);
        let t = completion_table(6, 3);
        assert!((t[6][0].exp() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn large_n_does_not_overflow() {
        let z = q_simple_uniform(256, 64, 1).unwrap();
        assert_eq!(z.num_nonempty(), 64);
    }

    #[test]
    fn fps_picks_far_points() {
        let p = array![[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [5.0, 0.0]];
        assert_eq!(furthest_point_sample(&p.view(), 3, 0), vec![0, 2, 3]);
    }

    #[test]
    fn fps_cells_are_nonempty_with_duplicates() {
        let x = PointCloud::new(array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]], array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
            .unwrap();
        let z = q_simple_fps(&x, 3, 5).unwrap();
        assert_eq!(z.num_nonempty(), 3);
    }
}
