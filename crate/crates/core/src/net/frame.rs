use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::FeatureField;
use crate::error::{invalid, Result};
use crate::geom::{PointCloud, RigidMotion};

/// Eigenvalue gap below which a frame is flagged degenerate.
pub const DEGENERATE_GAP: f64 = 1e-8;

/// PCA frame: every sign choice of the principal axes, at the centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub elements: Vec<RigidMotion>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Two eigenvalues are closer than [`DEGENERATE_GAP`]; the frame is then
    /// not equivariant. A single zero eigenvalue is not degenerate: its axis
    /// is fixed up to sign, which the frame already averages over.
    pub degenerate: bool,
}

pub fn pca_frame(points: &ArrayView2<f64>) -> Result<Frame> {
    let (m, d) = points.dim();
    if m == 0 {
        return invalid("pca_frame needs at least one point");
    }
    let t = points.mean_axis(Axis(0)).unwrap();
    let c = points - &t;
    let cov = c.t().dot(&c) / m as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    // Descending eigenvalue; equal values fall back to lexicographic order
    // of the eigenvectors.
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then_with(|| {
            let va: Vec<f64> = eig.eigenvectors.column(a).iter().copied().collect();
            let vb: Vec<f64> = eig.eigenvectors.column(b).iter().copied().collect();
            va.partial_cmp(&vb).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let scale = values[0].abs().max(1.0);
    let rank = values.iter().filter(|&&v| v > 1e-12 * scale).count();
    let mut basis = Array2::<f64>::zeros((d, d));
    for (col, &i) in order.iter().take(rank).enumerate() {
        for r in 0..d {
            basis[[r, col]] = eig.eigenvectors[(r, i)];
        }
    }
    complete_basis(&mut basis, rank);
    let degenerate = values.windows(2).any(|w| w[0] - w[1] < DEGENERATE_GAP);
    let elements = (0..1usize << d)
        .map(|bits| {
            let mut r = basis.clone();
            for col in 0..d {
                if bits >> col & 1 == 1 {
                    r.column_mut(col).mapv_inplace(|v| -v);
                }
            }
            RigidMotion {
                rotation: r,
                translation: t.clone(),
            }
        })
        .collect();
    Ok(Frame {
        elements,
        eigenvalues: values,
        degenerate,
    })
}

/// Fills columns `rank..d` by orthogonalizing the standard basis vectors, in
/// order, against the columns already present.
fn complete_basis(basis: &mut Array2<f64>, rank: usize) {
    let d = basis.nrows();
    let mut filled = rank;
    for e in 0..d {
        if filled == d {
            break;
        }
        let mut v = Array1::<f64>::zeros(d);
        v[e] = 1.0;
        for _ in 0..2 {
            for c in 0..filled {
                let p = basis.column(c).dot(&v);
                v.scaled_add(-p, &basis.column(c));
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.column_mut(filled).assign(&(v / norm));
            filled += 1;
        }
    }
}

/// Applies `R` (or `R^T` when `transpose`) to every `d`-wide block of each
/// row: `v -> v R`.
pub(crate) fn rotate_blocks(v: &Array2<f64>, r: &Array2<f64>, transpose: bool) -> Array2<f64> {
    let d = r.nrows();
    let mut out = Array2::zeros(v.dim());
    let m = if transpose { r.t().to_owned() } else { r.clone() };
    for b in 0..v.ncols() / d {
        let block = v.slice(s![.., b * d..(b + 1) * d]).dot(&m);
        out.slice_mut(s![.., b * d..(b + 1) * d]).assign(&block);
    }
    out
}

/// Frame-averaged evaluation of `backbone`.
///
/// For each frame element `(R, t)` the backbone sees local positions
/// `(x − t) R`, local normals `n R`, the type-0 features unchanged and the
/// type-1 features as `v R`. Its type-1 outputs are mapped back with `R^T`;
/// the first `affine_vectors` of them also get `t` added. Outputs are
/// averaged over the frame.
pub fn frame_average<F>(
    backbone: F,
    frame: &Frame,
    x: &PointCloud,
    feats: &FeatureField,
    affine_vectors: usize,
) -> Result<FeatureField>
where
    F: Fn(&Array2<f64>, &Array2<f64>, &FeatureField) -> Result<FeatureField>,
{
    let d = x.d();
    let mut acc: Option<FeatureField> = None;
    for g in &frame.elements {
        let local_pos = (x.positions() - &g.translation).dot(&g.rotation);
        let local_nrm = x.normals().dot(&g.rotation);
        let local = FeatureField {
            scalars: feats.scalars.clone(),
            vectors: rotate_blocks(&feats.vectors, &g.rotation, false),
            d,
        };
        let out = backbone(&local_pos, &local_nrm, &local)?;
        let mut vectors = rotate_blocks(&out.vectors, &g.rotation, true);
        for c in 0..affine_vectors.min(out.num_vectors()) {
            let mut block = vectors.slice_mut(s![.., c * d..(c + 1) * d]);
            block += &g.translation;
        }
        let mapped = FeatureField {
            scalars: out.scalars,
            vectors,
            d,
        };
        acc = Some(match acc {
            None => mapped,
            Some(a) => FeatureField {
                scalars: a.scalars + &mapped.scalars,
                vectors: a.vectors + &mapped.vectors,
                d,
            },
        });
    }
    let mut out = acc.expect("frames are nonempty");
    let count = frame.elements.len() as f64;
    out.scalars /= count;
    out.vectors /= count;
    Ok(out)
}
