//! Synthetic piecewise-rigid datasets, vote targets and the APC1 text format.
//!
//! APC1 stores one cloud per block: a header line
//! `APC1 <d> <n> <num_parts> <class_label|-1>` followed by `n` lines of
//! position, normal and part label. A file may hold any number of blocks.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, parse_err, Result};
use crate::geom::{random_orthogonal, HardPartition, LabeledCloud, PointCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledCloud>,
    pub d: usize,
    /// Size of the part-label vocabulary.
    pub parts: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledCloud>, d: usize, parts: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.cloud.d() != d || s.gt_parts.k() != parts {
                return invalid(format!("sample {i} does not match dimension {d} with {parts} parts"));
            }
        }
        Ok(Self { samples, d, parts })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(mut self, train: usize) -> (Dataset, Dataset) {
        let test = self.samples.split_off(train.min(self.samples.len()));
        (
            Dataset { samples: self.samples, d: self.d, parts: self.parts },
            Dataset { samples: test, d: self.d, parts: self.parts },
        )
    }
}

/// The 14-point planar toy: three elliptical blobs of 5, 5 and 4 points.
pub fn gen_toy2d() -> LabeledCloud {
    let centers = [[0.0, 0.0], [3.0, 0.0], [1.5, 2.6]];
    let sizes = [5usize, 5, 4];
    let (rx, ry) = (0.2, 0.1);
    let mut pos = Vec::new();
    let mut nrm = Vec::new();
    let mut labels = Vec::new();
    for (p, (c, &m)) in centers.iter().zip(&sizes).enumerate() {
        for j in 0..m {
            let a = 2.0 * PI * j as f64 / m as f64 + 0.3 * p as f64;
            let (dx, dy) = (rx * a.cos(), ry * a.sin());
            let r = (dx * dx + dy * dy).sqrt();
            pos.extend([c[0] + dx, c[1] + dy]);
            nrm.extend([dx / r, dy / r]);
            labels.push(p);
        }
    }
    let n = labels.len();
    let cloud = PointCloud::new(
        Array2::from_shape_vec((n, 2), pos).expect("n x 2"),
        Array2::from_shape_vec((n, 2), nrm).expect("n x 2"),
    )
    .expect("unit normals");
    LabeledCloud::new(cloud, HardPartition::new(labels, 3).expect("labels below 3"), None).expect("parts nonempty")
}

/// Half-extents of box `j` of a `d`-dimensional chain; every part has a
/// distinct shape.
fn half_extents(j: usize, d: usize) -> Vec<f64> {
    let s = 1.0 + 0.35 * j as f64;
    let base = [0.22, 0.12, 0.07];
    (0..d).map(|a| base[a] * s * if a == (j % d) { 1.0 } else { 0.85 }).collect()
}

/// Uniform point on the surface of an axis-aligned box, with its outward
/// normal.
fn box_surface_point<R: Rng + ?Sized>(rng: &mut R, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = h.len();
    // Face pair `a` (normal along axis a) has measure ∝ Π_{b≠a} h_b.
    let areas: Vec<f64> = (0..d).map(|a| (0..d).filter(|&b| b != a).map(|b| h[b]).product()).collect();
    let total: f64 = areas.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut axis = d - 1;
    for (a, &w) in areas.iter().enumerate() {
        if u < w {
            axis = a;
            break;
        }
        u -= w;
    }
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut p: Vec<f64> = h.iter().map(|&e| rng.random_range(-e..e)).collect();
    p[axis] = sign * h[axis];
    let mut n = vec![0.0; d];
    n[axis] = sign;
    (p, n)
}

/// Base shape: `parts` boxes side by side along the first axis, each sampled
/// with `m` surface points. Returns the cloud and the box centers.
pub fn articulated_base(parts: usize, m: usize, d: usize, seed: u64, motion_scale: f64) -> Result<LabeledCloud> {
    if parts < 2 || !matches!(d, 2 | 3) || m < d + 2 {
        return invalid(format!("need parts >= 2, d in {{2, 3}} and m >= d + 2; got {parts}, {d}, {m}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extents: Vec<Vec<f64>> = (0..parts).map(|j| half_extents(j, d)).collect();
    let radius = |h: &[f64]| h.iter().map(|e| e * e).sum::<f64>().sqrt();
    // Neighbours are spaced so their bounding spheres stay 10% of a part
    // apart even after independent rotations and translations.
    let mut centers = vec![0.0];
    for j in 1..parts {
        let (ra, rb) = (radius(&extents[j - 1]), radius(&extents[j]));
        centers.push(centers[j - 1] + 1.1 * (ra + rb) + 2.0 * motion_scale);
    }
    let shift = centers[parts - 1] / 2.0;
    let n = parts * m;
    let mut pos = Array2::zeros((n, d));
    let mut nrm = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for j in 0..parts {
        for i in 0..m {
            let (p, q) = box_surface_point(&mut rng, &extents[j]);
            let row = j * m + i;
            for a in 0..d {
                pos[[row, a]] = p[a] + if a == 0 { centers[j] - shift } else { 0.0 };
                nrm[[row, a]] = q[a];
            }
            labels.push(j);
        }
    }
    LabeledCloud::new(PointCloud::new(pos, nrm)?, HardPartition::new(labels, parts)?, None)
}

/// Moves every part of `base` about its own centroid by an independent
/// orthogonal map and a translation in `[-motion_scale, motion_scale]^d`,
/// then shuffles the points.
pub fn repose<R: Rng + ?Sized>(base: &LabeledCloud, rng: &mut R, motion_scale: f64, rotate: bool) -> Result<LabeledCloud> {
    let x = &base.cloud;
    let d = x.d();
    let mut pos = x.positions().clone();
    let mut nrm = x.normals().clone();
    for part in base.gt_parts.parts() {
        if part.is_empty() {
            continue;
        }
        let r = if rotate { random_orthogonal(rng, d) } else { Array2::eye(d) };
        let t: Array1<f64> = (0..d)
            .map(|_| if motion_scale > 0.0 { rng.random_range(-motion_scale..=motion_scale) } else { 0.0 })
            .collect();
        let sub = x.positions().select(Axis(0), &part);
        let c = sub.mean_axis(Axis(0)).expect("nonempty part");
        let moved = (&sub - &c).dot(&r.t()) + &c + &t;
        let turned = x.normals().select(Axis(0), &part).dot(&r.t());
        for (k, &i) in part.iter().enumerate() {
            pos.row_mut(i).assign(&moved.row(k));
            nrm.row_mut(i).assign(&turned.row(k));
        }
    }
    let mut order: Vec<usize> = (0..x.n()).collect();
    order.shuffle(rng);
    let labels: Vec<usize> = order.iter().map(|&i| base.gt_parts.labels()[i]).collect();
    LabeledCloud::new(
        PointCloud::new(pos.select(Axis(0), &order), nrm.select(Axis(0), &order))?,
        HardPartition::new(labels, base.gt_parts.k())?,
        base.class_label,
    )
}

/// `samples` independently re-posed copies of one articulated base shape.
pub fn gen_articulated(parts: usize, m: usize, samples: usize, d: usize, seed: u64, motion_scale: f64) -> Result<Dataset> {
    if !(motion_scale >= 0.0) {
        return invalid("motion scale must be non-negative");
    }
    let base = articulated_base(parts, m, d, seed, motion_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let out = (0..samples)
        .map(|_| repose(&base, &mut rng, motion_scale, true))
        .collect::<Result<_>>()?;
    Dataset::new(out, d, parts)
}

/// Offsets from each point to the center of its part's axis-aligned bounding
/// box.
pub fn y_gt(x: &PointCloud, z: &HardPartition) -> Result<Array2<f64>> {
    if z.n() != x.n() {
        return invalid("partition size differs from the cloud");
    }
    let d = x.d();
    let mut centers = Array2::<f64>::zeros((z.k(), d));
    for (j, part) in z.parts().iter().enumerate() {
        if part.is_empty() {
            return invalid(format!("part {j} is empty"));
        }
        for a in 0..d {
            let (lo, hi) = part.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = x.positions()[[i, a]];
                (lo.min(v), hi.max(v))
            });
            centers[[j, a]] = 0.5 * (lo + hi);
        }
    }
    let mut y = Array2::zeros((x.n(), d));
    for (i, &j) in z.labels().iter().enumerate() {
        for a in 0..d {
            y[[i, a]] = centers[[j, a]] - x.positions()[[i, a]];
        }
    }
    Ok(y)
}

pub fn write_dataset(ds: &Dataset) -> String {
    let mut s = String::new();
    for sample in &ds.samples {
        let x = &sample.cloud;
        let class = sample.class_label.map_or(-1, |c| c as i64);
        let _ = writeln!(s, "APC1 {} {} {} {class}", x.d(), x.n(), sample.gt_parts.k());
        for i in 0..x.n() {
            let nums: Vec<String> = x
                .positions()
                .row(i)
                .iter()
                .chain(x.normals().row(i).iter())
                .map(|v| format!("{v:.16e}"))
                .collect();
            let _ = writeln!(s, "{} {}", nums.join(" "), sample.gt_parts.labels()[i]);
        }
    }
    s
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, write_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let lines: Vec<&str> = text.lines().collect();
    let mut at = 0;
    let mut samples = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    while at < lines.len() {
        if lines[at].trim().is_empty() {
            at += 1;
            continue;
        }
        let no = at + 1;
        let head: Vec<&str> = lines[at].split_whitespace().collect();
        if head.len() != 5 || head[0] != "APC1" {
            return parse_err(no, "expected `APC1 <d> <n> <num_parts> <class_label|-1>`");
        }
        let field = |i: usize| -> Result<i64> {
            head[i].parse().or_else(|_| parse_err(no, format!("bad header field `{}`", head[i])))
        };
        let (d, n, k, class) = (field(1)?, field(2)?, field(3)?, field(4)?);
        if !(d == 2 || d == 3) || n < 1 || k < 1 || class < -1 {
            return parse_err(no, "header values out of range");
        }
        let (d, n, k) = (d as usize, n as usize, k as usize);
        if let Some((d0, k0)) = shape {
            if (d0, k0) != (d, k) {
                return parse_err(no, format!("block is {d}-D with {k} parts, earlier blocks are {d0}-D with {k0}"));
            }
        }
        shape = Some((d, k));
        let mut pos = Array2::zeros((n, d));
        let mut nrm = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let row_no = at + 2 + i;
            let Some(line) = lines.get(row_no - 1) else {
                return parse_err(row_no, format!("truncated: expected {n} rows after the header on line {no}"));
            };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 2 * d + 1 {
                return parse_err(row_no, format!("expected {} fields, found {}", 2 * d + 1, toks.len()));
            }
            for a in 0..2 * d {
                let v: f64 = toks[a].parse().or_else(|_| parse_err(row_no, format!("bad number `{}`", toks[a])))?;
                if a < d {
                    pos[[i, a]] = v;
                } else {
                    nrm[[i, a - d]] = v;
                }
            }
            let l: usize = toks[2 * d].parse().or_else(|_| parse_err(row_no, format!("bad label `{}`", toks[2 * d])))?;
            if l >= k {
                return parse_err(row_no, format!("label {l} not below {k}"));
            }
            labels.push(l);
        }
        let cloud = PointCloud::new(pos, nrm).or_else(|e| parse_err(no, e.to_string()))?;
        let z = HardPartition::new(labels, k).or_else(|e| parse_err(no, e.to_string()))?;
        let class = (class >= 0).then_some(class as usize);
        samples.push(LabeledCloud::new(cloud, z, class).or_else(|e| parse_err(no, e.to_string()))?);
        at += 1 + n;
    }
    let Some((d, k)) = shape else {
        return parse_err(1, "no samples");
    };
    Dataset::new(samples, d, k)
}
