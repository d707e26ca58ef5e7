use std::sync::Arc;

use gradgraph::{Graph, NodeId, ParamStore, Tensor};
use ndarray::{Array2, Axis};

use super::backbone::backbone_graph;
use super::frame::pca_frame;
use super::{ones, Bound, FeatureField, ModelParams};
use crate::em::q_predict_node;
use crate::error::{invalid, Result};
use crate::geom::{argmax, HardPartition, PointCloud, SoftPartition};

/// One row per (point, frame element of its part). Each frame element is its
/// own pooling segment.
pub(crate) struct FrameRows {
    idx: Arc<[usize]>,
    segment: Arc<[usize]>,
    mats: Arc<[Tensor]>,
    weights: Arc<[f64]>,
    local_pos: Array2<f64>,
    local_nrm: Array2<f64>,
    n: usize,
    pub(crate) degenerate: bool,
}

impl FrameRows {
    pub(crate) fn new(x: &PointCloud, z: &HardPartition) -> Result<Self> {
        if z.n() != x.n() {
            return invalid(format!("partition has {} points, cloud has {}", z.n(), x.n()));
        }
        let d = x.d();
        let (mut idx, mut segment, mut mats, mut weights) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut pos_rows = Vec::new();
        let mut nrm_rows = Vec::new();
        let mut degenerate = false;
        for part in z.parts().into_iter().filter(|p| !p.is_empty()) {
            let pts = x.positions().select(Axis(0), &part);
            let nrm = x.normals().select(Axis(0), &part);
            let frame = pca_frame(&pts.view())?;
            degenerate |= frame.degenerate;
            let w = 1.0 / frame.elements.len() as f64;
            for g in &frame.elements {
                let seg = mats.len();
                pos_rows.push((&pts - &g.translation).dot(&g.rotation));
                nrm_rows.push(nrm.dot(&g.rotation));
                mats.push(g.rotation.clone());
                for &i in &part {
                    idx.push(i);
                    segment.push(seg);
                    weights.push(w);
                }
            }
        }
        let stack = |rows: &[Array2<f64>]| {
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            ndarray::concatenate(Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, d)))
        };
        Ok(Self {
            idx: idx.into(),
            segment: segment.into(),
            mats: mats.into(),
            weights: weights.into(),
            local_pos: stack(&pos_rows),
            local_nrm: stack(&nrm_rows),
            n: x.n(),
            degenerate,
        })
    }

    fn num_segments(&self) -> usize {
        self.mats.len()
    }
}

/// Graph form of one frame-averaged piecewise layer. Returns the type-0 and
/// type-1 outputs (either may be `None` when its width is zero).
pub(crate) fn piecewise_graph(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    rows: &FrameRows,
    scalars: Option<NodeId>,
    vectors: Option<NodeId>,
    a_out: usize,
    b_out: usize,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    let pos = g.constant(rows.local_pos.clone());
    let nrm = g.constant(rows.local_nrm.clone());
    let mut inputs = vec![pos, nrm];
    if let Some(v) = vectors {
        let spread = g.gather_rows(v, rows.idx.clone())?;
        inputs.push(g.row_block_linear(spread, rows.mats.clone(), rows.segment.clone(), false)?);
    }
    if let Some(s) = scalars {
        inputs.push(g.gather_rows(s, rows.idx.clone())?);
    }
    let input = g.concat_cols(&inputs)?;
    let out = backbone_graph(g, bound, prefix, input, &rows.segment, rows.num_segments())?;
    let d = rows.local_pos.ncols();
    let (_, width) = g.shape(out);
    if width != a_out + b_out * d {
        return invalid(format!("backbone `{prefix}` gives {width} outputs, expected {}", a_out + b_out * d));
    }
    let scatter = |g: &mut Graph, node: NodeId| g.scatter_rows(node, rows.idx.clone(), rows.n, Some(rows.weights.clone()));
    let s_out = if a_out > 0 {
        let s = g.slice_cols(out, 0, a_out)?;
        Some(scatter(g, s)?)
    } else {
        None
    };
    let v_out = if b_out > 0 {
        let v = g.slice_cols(out, a_out, b_out * d)?;
        let back = g.row_block_linear(v, rows.mats.clone(), rows.segment.clone(), true)?;
        Some(scatter(g, back)?)
    } else {
        None
    };
    Ok((s_out, v_out))
}

fn optional(g: &mut Graph, t: &Array2<f64>) -> Option<NodeId> {
    (t.ncols() > 0).then(|| g.constant(t.clone()))
}

fn value_or_empty(g: &Graph, node: Option<NodeId>, n: usize) -> Array2<f64> {
    node.map_or_else(|| Array2::zeros((n, 0)), |id| g.value(id).clone())
}

/// Frame-averaged piecewise layer over the parts of `z`, with the backbone
/// stored under `prefix`. The backbone sees local position, local normal, the
/// type-1 features rotated into the frame and the type-0 features. Also
/// returns whether any part had a degenerate frame.
pub fn piecewise_layer(
    store: &ParamStore,
    prefix: &str,
    x: &PointCloud,
    feats: &FeatureField,
    z: &HardPartition,
    a_out: usize,
    b_out: usize,
) -> Result<(FeatureField, bool)> {
    let rows = FrameRows::new(x, z)?;
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, store, false);
    let s = optional(&mut g, &feats.scalars);
    let v = optional(&mut g, &feats.vectors);
    let (s_out, v_out) = piecewise_graph(&mut g, &bound, prefix, &rows, s, v, a_out, b_out)?;
    let n = x.n();
    Ok((
        FeatureField {
            scalars: value_or_empty(&g, s_out, n),
            vectors: value_or_empty(&g, v_out, n),
            d: x.d(),
        },
        rows.degenerate,
    ))
}

/// Hard partition from row argmaxes of soft weights, without re-validating
/// the rows.
pub(crate) fn hard_from_weights(q: &Array2<f64>) -> Result<HardPartition> {
    let labels = q.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    HardPartition::new(labels, q.ncols())
}

/// Row maximum and row sum of squares of a soft partition.
pub(crate) fn q_channels(g: &mut Graph, q: NodeId) -> Result<NodeId> {
    let (_, k) = g.shape(q);
    let peak = g.row_max(q)?;
    let sq = g.mul(q, q)?;
    let col = g.constant(ones(k, 1));
    let purity = g.matmul(sq, col)?;
    Ok(g.concat_cols(&[peak, purity])?)
}

/// Graph handles of one encoder layer.
pub(crate) struct LayerNodes {
    pub(crate) scalars: Option<NodeId>,
    pub(crate) vectors: NodeId,
    pub(crate) votes: NodeId,
    pub(crate) q: NodeId,
    pub(crate) z_in: HardPartition,
    pub(crate) active: Vec<usize>,
    pub(crate) degenerate: bool,
}

/// One encoder layer: piecewise features over `hard(q_in)`, votes
/// `x + first type-1 output`, then EM with implicit correction for the next
/// partition.
pub(crate) fn layer_graph(
    g: &mut Graph,
    bound: &Bound,
    params: &ModelParams,
    layer: usize,
    x: &PointCloud,
    scalars: Option<NodeId>,
    vectors: Option<NodeId>,
    q_in: NodeId,
) -> Result<LayerNodes> {
    let cfg = &params.config;
    let spec = &cfg.layers[layer];
    let z_in = hard_from_weights(g.value(q_in))?;
    let rows = FrameRows::new(x, &z_in)?;
    let qc = q_channels(g, q_in)?;
    let s_in = match scalars {
        Some(s) => g.concat_cols(&[s, qc])?,
        None => qc,
    };
    let (s_out, v_out) = piecewise_graph(
        g,
        bound,
        &format!("enc{layer}"),
        &rows,
        Some(s_in),
        vectors,
        spec.a_out,
        spec.b_out,
    )?;
    let vectors = v_out.expect("validated b_out > 0");
    let offset = g.slice_cols(vectors, 0, x.d())?;
    let pos = g.constant(x.positions().clone());
    let votes = g.add(pos, offset)?;
    let k = g.shape(q_in).1;
    let pred = q_predict_node(g, votes, k, spec.sigma, &cfg.em_config(layer))?;
    Ok(LayerNodes {
        scalars: s_out,
        vectors,
        votes,
        q: pred.q,
        z_in,
        active: pred.active,
        degenerate: rows.degenerate,
    })
}

/// Numeric result of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub features: FeatureField,
    /// Absolute votes, one point per row.
    pub votes: Array2<f64>,
    /// Next partition; one column per surviving mixture component.
    pub q: SoftPartition,
    pub degenerate: bool,
}

/// Runs encoder layer `layer` of `params` on `x` with carried features
/// `feats` and input partition `q_in`.
pub fn apen_layer(
    params: &ModelParams,
    layer: usize,
    x: &PointCloud,
    feats: &FeatureField,
    q_in: &SoftPartition,
) -> Result<LayerOutput> {
    if layer >= params.config.layers.len() {
        return invalid(format!("layer {layer} does not exist"));
    }
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &params.store, false);
    let s = optional(&mut g, &feats.scalars);
    let v = optional(&mut g, &feats.vectors);
    let q = g.constant(q_in.weights().clone());
    let nodes = layer_graph(&mut g, &bound, params, layer, x, s, v, q)?;
    let n = x.n();
    Ok(LayerOutput {
        features: FeatureField {
            scalars: value_or_empty(&g, nodes.scalars, n),
            vectors: g.value(nodes.vectors).clone(),
            d: x.d(),
        },
        votes: g.value(nodes.votes).clone(),
        q: SoftPartition::new(g.value(nodes.q).clone())?,
        degenerate: nodes.degenerate,
    })
}
