//! Rigid and piecewise-rigid motions, point clouds and partitions.
//!
//! Positions transform as `x R^T + t`; normals and other direction vectors
//! only rotate. A piecewise motion carries one rigid motion per part and
//! moves every point with the motion of the part it is assigned to.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

const NORMAL_TOL: f64 = 1e-6;
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Array2<f64>,
    normals: Array2<f64>,
}

impl PointCloud {
    pub fn new(positions: Array2<f64>, normals: Array2<f64>) -> Result<Self> {
        if positions.dim() != normals.dim() {
            return invalid(format!(
                "positions {:?} and normals {:?} differ in shape",
                positions.dim(),
                normals.dim()
            ));
        }
        if !matches!(positions.ncols(), 2 | 3) {
            return invalid(format!("dimension must be 2 or 3, got {}", positions.ncols()));
        }
        for (i, row) in normals.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > NORMAL_TOL {
                return invalid(format!("normal {i} has norm {norm}"));
            }
        }
        Ok(Self { positions, normals })
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    pub fn normals(&self) -> &Array2<f64> {
        &self.normals
    }

    pub fn n(&self) -> usize {
        self.positions.nrows()
    }

    pub fn d(&self) -> usize {
        self.positions.ncols()
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            positions: self.positions.select(Axis(0), idx),
            normals: self.normals.select(Axis(0), idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidMotion {
    pub rotation: Array2<f64>,
    pub translation: Array1<f64>,
}

impl RigidMotion {
    pub fn new(rotation: Array2<f64>, translation: Array1<f64>) -> Result<Self> {
        let d = translation.len();
        if rotation.dim() != (d, d) {
            return invalid(format!("rotation {:?} does not match translation length {d}", rotation.dim()));
        }
        let err = orthogonality_error(&rotation);
        if err > 1e-9 {
            return invalid(format!("rotation is not orthogonal (error {err:e})"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            rotation: Array2::eye(d),
            translation: Array1::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.translation.len()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.t().to_owned();
        let t = -rt.dot(&self.translation);
        Self {
            rotation: rt,
            translation: t,
        }
    }

    pub fn determinant(&self) -> f64 {
        determinant(&self.rotation)
    }

    /// `x R^T + 1 t^T` for row points.
    pub fn apply_points(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.rotation.t()) + &self.translation
    }

    /// `v R^T` for row vectors.
    pub fn apply_vectors(&self, v: &ArrayView2<f64>) -> Array2<f64> {
        v.dot(&self.rotation.t())
    }
}

/// `‖R^T R − I‖∞`.
pub fn orthogonality_error(r: &Array2<f64>) -> f64 {
    let g = r.t().dot(r) - Array2::<f64>::eye(r.nrows());
    g.iter().fold(0.0, |m, a| m.max(a.abs()))
}

fn determinant(r: &Array2<f64>) -> f64 {
    match r.nrows() {
        1 => r[[0, 0]],
        2 => r[[0, 0]] * r[[1, 1]] - r[[0, 1]] * r[[1, 0]],
        3 => {
            r[[0, 0]] * (r[[1, 1]] * r[[2, 2]] - r[[1, 2]] * r[[2, 1]])
                - r[[0, 1]] * (r[[1, 0]] * r[[2, 2]] - r[[1, 2]] * r[[2, 0]])
                + r[[0, 2]] * (r[[1, 0]] * r[[2, 1]] - r[[1, 1]] * r[[2, 0]])
        }
        _ => {
            let m = nalgebra::DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| r[[i, j]]);
            m.determinant()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseMotion {
    motions: Vec<RigidMotion>,
}

impl PiecewiseMotion {
    pub fn new(motions: Vec<RigidMotion>) -> Result<Self> {
        let Some(first) = motions.first() else {
            return invalid("piecewise motion needs at least one part");
        };
        let d = first.d();
        if motions.iter().any(|m| m.d() != d) {
            return invalid("piecewise motion parts differ in dimension");
        }
        Ok(Self { motions })
    }

    pub fn motions(&self) -> &[RigidMotion] {
        &self.motions
    }

    pub fn k(&self) -> usize {
        self.motions.len()
    }
}

/// Hard assignment of `n` points to `k` parts, stored as one label per row.
///
/// This is the one-hot matrix `Z` in compressed form; [`Self::assignment`]
/// expands it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HardPartition {
    labels: Vec<usize>,
    k: usize,
}

impl HardPartition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return invalid(format!("label {bad} out of range for k = {k}"));
        }
        Ok(Self { labels, k })
    }

    /// Parses a binary `n x k` matrix whose rows are one-hot.
    pub fn from_assignment(z: &Array2<f64>) -> Result<Self> {
        let mut labels = Vec::with_capacity(z.nrows());
        for (i, row) in z.rows().into_iter().enumerate() {
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(j, _)| j).collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() != 1 || zeros + 1 != row.len() {
                return invalid(format!("row {i} is not one-hot"));
            }
            labels.push(ones[0]);
        }
        Ok(Self { labels, k: z.ncols() })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> Array2<f64> {
        let mut z = Array2::zeros((self.n(), self.k));
        for (i, &l) in self.labels.iter().enumerate() {
            z[[i, l]] = 1.0;
        }
        z
    }

    /// Row indices of every part, ascending, including empty parts.
    pub fn parts(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            parts[l].push(i);
        }
        parts
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn num_nonempty(&self) -> usize {
        self.sizes().iter().filter(|&&s| s > 0).count()
    }
}

/// Row-stochastic `n x k` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPartition {
    weights: Array2<f64>,
}

impl SoftPartition {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.ncols() == 0 {
            return invalid("soft partition needs at least one column");
        }
        for (i, row) in weights.rows().into_iter().enumerate() {
            if row.iter().any(|&w| !(w >= 0.0)) {
                return invalid(format!("row {i} has a negative or NaN entry"));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return invalid(format!("row {i} sums to {s}"));
            }
        }
        Ok(Self { weights })
    }

    pub fn from_hard(z: &HardPartition) -> Self {
        Self { weights: z.assignment() }
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            weights: Array2::from_elem((n, k), 1.0 / k as f64),
        }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn k(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub gt_parts: HardPartition,
    pub class_label: Option<usize>,
}

impl LabeledCloud {
    pub fn new(cloud: PointCloud, gt_parts: HardPartition, class_label: Option<usize>) -> Result<Self> {
        if gt_parts.n() != cloud.n() {
            return invalid(format!("{} labels for {} points", gt_parts.n(), cloud.n()));
        }
        if let Some(j) = gt_parts.sizes().iter().position(|&s| s == 0) {
            return invalid(format!("ground-truth part {j} is empty"));
        }
        Ok(Self {
            cloud,
            gt_parts,
            class_label,
        })
    }
}

pub fn apply_rigid(g: &RigidMotion, x: &PointCloud) -> Result<PointCloud> {
    if g.d() != x.d() {
        return invalid(format!("motion is {}-dimensional, cloud is {}-dimensional", g.d(), x.d()));
    }
    Ok(PointCloud {
        positions: g.apply_points(&x.positions.view()),
        normals: g.apply_vectors(&x.normals.view()),
    })
}

/// `a ∘ b`: apply `b` first, then `a`.
pub fn compose(a: &RigidMotion, b: &RigidMotion) -> RigidMotion {
    RigidMotion {
        rotation: a.rotation.dot(&b.rotation),
        translation: a.rotation.dot(&b.translation) + &a.translation,
    }
}

pub fn apply_piecewise(g: &PiecewiseMotion, x: &PointCloud, z: &HardPartition) -> Result<PointCloud> {
    if z.n() != x.n() || z.k() != g.k() {
        return invalid(format!(
            "partition is {}x{}, cloud has {} points and motion has {} parts",
            z.n(),
            z.k(),
            x.n(),
            g.k()
        ));
    }
    if g.motions()[0].d() != x.d() {
        return invalid("motion and cloud dimensions differ");
    }
    let mut positions = x.positions.clone();
    let mut normals = x.normals.clone();
    for (j, idx) in z.parts().iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let m = &g.motions()[j];
        let moved = m.apply_points(&x.positions.select(Axis(0), idx).view());
        let turned = m.apply_vectors(&x.normals.select(Axis(0), idx).view());
        for (r, &i) in idx.iter().enumerate() {
            positions.row_mut(i).assign(&moved.row(r));
            normals.row_mut(i).assign(&turned.row(r));
        }
    }
    Ok(PointCloud { positions, normals })
}

/// One-hot at the row argmax; ties go to the lowest column.
pub fn hard_from_soft(q: &SoftPartition) -> HardPartition {
    let labels = q.weights.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    HardPartition { labels, k: q.k() }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, v) in values.enumerate() {
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

/// True iff every pair co-assigned by `z` is co-assigned by `z_gt`.
pub fn refines(z: &HardPartition, z_gt: &HardPartition) -> bool {
    if z.n() != z_gt.n() {
        return false;
    }
    let mut owner: Vec<Option<usize>> = vec![None; z.k()];
    for (&l, &g) in z.labels.iter().zip(&z_gt.labels) {
        match owner[l] {
            None => owner[l] = Some(g),
            Some(o) if o != g => return false,
            _ => {}
        }
    }
    true
}

/// Column `i` of the result is column `perm[i]` of `z`.
pub fn permute_parts(z: &HardPartition, perm: &[usize]) -> Result<HardPartition> {
    if perm.len() != z.k() {
        return invalid(format!("permutation of length {} for k = {}", perm.len(), z.k()));
    }
    let mut inverse = vec![usize::MAX; z.k()];
    for (i, &p) in perm.iter().enumerate() {
        if p >= z.k() || inverse[p] != usize::MAX {
            return invalid("permutation is not a bijection");
        }
        inverse[p] = i;
    }
    Ok(HardPartition {
        labels: z.labels.iter().map(|&l| inverse[l]).collect(),
        k: z.k(),
    })
}

/// Haar-distributed element of O(d): Gram-Schmidt on a Gaussian matrix,
/// which is QR with the signs of `R`'s diagonal fixed positive.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Array2<f64> {
    loop {
        let a = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
        if let Some(q) = gram_schmidt(&a) {
            return q;
        }
    }
}

fn gram_schmidt(a: &Array2<f64>) -> Option<Array2<f64>> {
    let d = a.ncols();
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = a.column(j).to_owned();
        // Two passes keep the columns orthogonal to roundoff.
        for _ in 0..2 {
            for p in 0..j {
                let c = q.column(p).dot(&v);
                v.scaled_add(-c, &q.column(p));
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-10 {
            return None;
        }
        q.column_mut(j).assign(&(v / norm));
    }
    Some(q)
}

pub fn random_motion_with<R: Rng + ?Sized>(rng: &mut R, d: usize, translation_scale: f64) -> RigidMotion {
    let rotation = random_orthogonal(rng, d);
    let translation = Array1::from_shape_fn(d, |_| {
        if translation_scale > 0.0 {
            rng.random_range(-translation_scale..=translation_scale)
        } else {
            0.0
        }
    });
    RigidMotion { rotation, translation }
}

pub fn random_motion(seed: u64, d: usize, translation_scale: f64) -> Result<RigidMotion> {
    if !matches!(d, 2 | 3) {
        return invalid(format!("dimension must be 2 or 3, got {d}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(random_motion_with(&mut rng, d, translation_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cloud() -> PointCloud {
        PointCloud::new(
            array![[1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [-1.0, -1.0]],
            array![[0.0, 1.0], [1.0, 0.0], [0.6, 0.8], [-0.8, 0.6]],
        )
        .unwrap()
    }

    #[test]
    fn quarter_turn_moves_point_and_normal() {
        let g = RigidMotion::new(array![[0.0, -1.0], [1.0, 0.0]], array![0.0, 0.0]).unwrap();
        let x = PointCloud::new(array![[1.0, 0.0]], array![[0.0, 1.0]]).unwrap();
        let y = apply_rigid(&g, &x).unwrap();
        assert_eq!(y.positions(), &array![[0.0, 1.0]]);
        assert_eq!(y.normals(), &array![[-1.0, 0.0]]);
    }

    #[test]
    fn identity_motion_is_a_no_op() {
        let x = cloud();
        assert_eq!(apply_rigid(&RigidMotion::identity(2), &x).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(apply_rigid(&RigidMotion::identity(3), &cloud()).is_err());
        assert!(PointCloud::new(array![[1.0, 0.0]], array![[2.0, 0.0]]).is_err());
    }

    #[test]
    fn argmax_tie_goes_low() {
        let q = SoftPartition::new(array![[0.5, 0.5], [0.2, 0.8]]).unwrap();
        assert_eq!(hard_from_soft(&q).labels(), &[0, 1]);
        let q = SoftPartition::new(array![[0.2, 0.5, 0.3]]).unwrap();
        assert_eq!(hard_from_soft(&q).labels(), &[1]);
    }

    #[test]
    fn refinement_cases() {
        let gt = HardPartition::new(vec![0, 0, 1, 1], 2).unwrap();
        assert!(refines(&gt, &gt));
        assert!(refines(&HardPartition::new(vec![0, 1, 2, 3], 4).unwrap(), &gt));
        assert!(!refines(&HardPartition::new(vec![0, 1, 1, 0], 2).unwrap(), &gt));
        assert!(!refines(&HardPartition::new(vec![0; 4], 1).unwrap(), &gt));
    }

    #[test]
    fn permutation_must_be_bijective() {
        let z = HardPartition::new(vec![0, 1, 2], 3).unwrap();
        assert!(permute_parts(&z, &[0, 0, 1]).is_err());
        let swapped = permute_parts(&z, &[1, 0, 2]).unwrap();
        assert_eq!(swapped.labels(), &[1, 0, 2]);
        assert_eq!(permute_parts(&swapped, &[1, 0, 2]).unwrap(), z);
    }

    #[test]
    fn assignment_round_trip() {
        let z = HardPartition::new(vec![2, 0, 1, 2], 3).unwrap();
        assert_eq!(HardPartition::from_assignment(&z.assignment()).unwrap(), z);
        assert!(HardPartition::from_assignment(&array![[1.0, 1.0]]).is_err());
    }

    #[test]
    fn sampled_motion_is_orthogonal_and_repeatable() {
        let a = random_motion(7, 3, 2.0).unwrap();
        assert_eq!(a, random_motion(7, 3, 2.0).unwrap());
        assert!(orthogonality_error(&a.rotation) <= 1e-12);
        assert!(a.translation.iter().all(|t| t.abs() <= 2.0));
    }

    #[test]
    fn inverse_undoes_motion() {
        let g = random_motion(3, 3, 1.0).unwrap();
        let id = compose(&g, &g.inverse());
        assert!((&id.rotation - &Array2::<f64>::eye(3)).iter().all(|a| a.abs() < 1e-12));
        assert!(id.translation.iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn labeled_cloud_rejects_empty_parts() {
        let z = HardPartition::new(vec![0, 0, 0, 0], 2).unwrap();
        assert!(LabeledCloud::new(cloud(), z, None).is_err());
    }
}
