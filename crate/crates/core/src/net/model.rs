use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use gradgraph::{Graph, NodeId, ParamStore};
use ndarray::Array2;

use super::layer::{hard_from_weights, layer_graph, piecewise_graph, q_channels, FrameRows};
use super::{ones, Bound, FeatureField, ModelParams, Task};
use crate::em::q_simple_fps;
use crate::error::{invalid, Result};
use crate::geom::{HardPartition, PointCloud, SoftPartition};

/// A recorded forward pass, ready for `backward`.
pub struct ForwardGraph {
    pub graph: Graph,
    /// Absolute votes of each encoder layer.
    pub votes: Vec<NodeId>,
    /// Soft partition produced by each encoder layer.
    pub partitions: Vec<NodeId>,
    pub latent_scalars: Option<NodeId>,
    pub latent_vectors: NodeId,
    /// `n x classes` for segmentation, `1 x classes` for classification.
    pub logits: NodeId,
    pub q0: HardPartition,
    /// Hard partition each encoder layer and then the decoder pooled over.
    pub hard: Vec<HardPartition>,
    /// Surviving mixture components per encoder layer.
    pub active: Vec<Vec<usize>>,
    pub degenerate: bool,
}

impl ForwardGraph {
    /// Hash of every discrete choice in the pass: ReLU and max-pool branches,
    /// hard partitions and surviving components. Two passes with equal
    /// signatures run through the same smooth piece.
    pub fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.graph.kink_signature().hash(&mut h);
        self.q0.labels().hash(&mut h);
        for z in &self.hard {
            z.labels().hash(&mut h);
        }
        self.active.hash(&mut h);
        h.finish()
    }
}

/// Numeric result of a full forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Array2<f64>,
    pub votes: Vec<Array2<f64>>,
    pub partitions: Vec<SoftPartition>,
    pub latent: FeatureField,
    pub degenerate: bool,
}

impl Prediction {
    /// Predicted part label per point (segmentation) or the class (one row).
    pub fn labels(&self) -> Vec<usize> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| crate::geom::argmax(r.iter().copied()))
            .collect()
    }
}

/// Numeric result of the encoder alone.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub features: FeatureField,
    pub votes: Vec<Array2<f64>>,
    pub partitions: Vec<SoftPartition>,
    pub degenerate: bool,
}

struct EncoderNodes {
    votes: Vec<NodeId>,
    partitions: Vec<NodeId>,
    scalars: Option<NodeId>,
    vectors: NodeId,
    hard: Vec<HardPartition>,
    active: Vec<Vec<usize>>,
    degenerate: bool,
}

fn encoder_graph(
    g: &mut Graph,
    bound: &Bound,
    params: &ModelParams,
    x: &PointCloud,
    q0: &SoftPartition,
) -> Result<EncoderNodes> {
    params.config.validate()?;
    if x.d() != params.config.d {
        return invalid(format!("model is {}-D, cloud is {}-D", params.config.d, x.d()));
    }
    if q0.n() != x.n() {
        return invalid(format!("initial partition has {} rows, cloud has {}", q0.n(), x.n()));
    }
    let mut q = g.constant(q0.weights().clone());
    let (mut scalars, mut vectors) = (None, None);
    let mut out = EncoderNodes {
        votes: Vec::new(),
        partitions: Vec::new(),
        scalars: None,
        vectors: q,
        hard: Vec::new(),
        active: Vec::new(),
        degenerate: false,
    };
    for l in 0..params.config.layers.len() {
        let nodes = layer_graph(g, bound, params, l, x, scalars, vectors, q)?;
        scalars = nodes.scalars;
        vectors = Some(nodes.vectors);
        q = nodes.q;
        out.votes.push(nodes.votes);
        out.partitions.push(nodes.q);
        out.hard.push(nodes.z_in);
        out.active.push(nodes.active);
        out.degenerate |= nodes.degenerate;
    }
    out.scalars = scalars;
    out.vectors = vectors.expect("at least one layer");
    Ok(out)
}

/// Invariant head: squared norms of the type-1 channels next to the type-0
/// channels, one ReLU layer and a linear output. Classification mean-pools
/// the invariants over points first.
pub(crate) fn head_graph(
    g: &mut Graph,
    bound: &Bound,
    task: Task,
    scalars: Option<NodeId>,
    vectors: Option<NodeId>,
    d: usize,
) -> Result<NodeId> {
    let mut parts = Vec::new();
    if let Some(s) = scalars {
        parts.push(s);
    }
    if let Some(v) = vectors {
        let (_, w) = g.shape(v);
        let sq = g.mul(v, v)?;
        let blocks = Array2::from_shape_fn((w, w / d), |(i, j)| if i / d == j { 1.0 } else { 0.0 });
        let blocks = g.constant(blocks);
        parts.push(g.matmul(sq, blocks)?);
    }
    if parts.is_empty() {
        return invalid("head has no inputs");
    }
    let mut h = g.concat_cols(&parts)?;
    if task == Task::Classification {
        let (n, _) = g.shape(h);
        let avg = g.constant(ones(1, n) / n as f64);
        h = g.matmul(avg, h)?;
    }
    let (w, b) = (bound.get("head.h.w")?, bound.get("head.h.b")?);
    let z = g.matmul(h, w)?;
    let z = g.add_row(z, b)?;
    let z = g.relu(z);
    let (w, b) = (bound.get("head.out.w")?, bound.get("head.out.b")?);
    let z = g.matmul(z, w)?;
    Ok(g.add_row(z, b)?)
}

impl ModelParams {
    /// The initial partition: furthest-point Voronoi cells.
    pub fn initial_partition(&self, x: &PointCloud) -> Result<HardPartition> {
        q_simple_fps(x, self.config.k0.min(x.n()), self.config.seed)
    }

    /// Records the full forward pass. With `trainable`, parameters are graph
    /// parameters that receive gradients.
    pub fn forward_graph(&self, x: &PointCloud, trainable: bool) -> Result<ForwardGraph> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.store, trainable);
        let q0 = self.initial_partition(x)?;
        let enc = encoder_graph(&mut g, &bound, self, x, &SoftPartition::from_hard(&q0))?;
        let q_last = *enc.partitions.last().expect("at least one layer");
        let z_last = hard_from_weights(g.value(q_last))?;
        let rows = FrameRows::new(x, &z_last)?;
        let qc = q_channels(&mut g, q_last)?;
        let s_in = match enc.scalars {
            Some(s) => g.concat_cols(&[s, qc])?,
            None => qc,
        };
        let (dec, _) = piecewise_graph(
            &mut g,
            &bound,
            "dec",
            &rows,
            Some(s_in),
            Some(enc.vectors),
            self.config.decoder_width,
            0,
        )?;
        let logits = head_graph(&mut g, &bound, self.config.task, dec, None, x.d())?;
        let mut hard = enc.hard;
        hard.push(z_last);
        Ok(ForwardGraph {
            graph: g,
            votes: enc.votes,
            partitions: enc.partitions,
            latent_scalars: enc.scalars,
            latent_vectors: enc.vectors,
            logits,
            q0,
            hard,
            active: enc.active,
            degenerate: enc.degenerate || rows.degenerate,
        })
    }

    pub fn predict(&self, x: &PointCloud) -> Result<Prediction> {
        let fg = self.forward_graph(x, false)?;
        let g = &fg.graph;
        let n = x.n();
        Ok(Prediction {
            logits: g.value(fg.logits).clone(),
            votes: fg.votes.iter().map(|&v| g.value(v).clone()).collect(),
            partitions: fg
                .partitions
                .iter()
                .map(|&q| SoftPartition::new(g.value(q).clone()))
                .collect::<Result<_>>()?,
            latent: FeatureField {
                scalars: fg.latent_scalars.map_or_else(|| Array2::zeros((n, 0)), |s| g.value(s).clone()),
                vectors: g.value(fg.latent_vectors).clone(),
                d: x.d(),
            },
            degenerate: fg.degenerate,
        })
    }
}

/// Runs every encoder layer from the initial partition `q0`.
pub fn encoder_forward(params: &ModelParams, x: &PointCloud, q0: &SoftPartition) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &params.store, false);
    let enc = encoder_graph(&mut g, &bound, params, x, q0)?;
    let n = x.n();
    Ok(EncoderOutput {
        features: FeatureField {
            scalars: enc.scalars.map_or_else(|| Array2::zeros((n, 0)), |s| g.value(s).clone()),
            vectors: g.value(enc.vectors).clone(),
            d: x.d(),
        },
        votes: enc.votes.iter().map(|&v| g.value(v).clone()).collect(),
        partitions: enc
            .partitions
            .iter()
            .map(|&q| SoftPartition::new(g.value(q).clone()))
            .collect::<Result<_>>()?,
        degenerate: enc.degenerate,
    })
}

/// Applies the invariant head stored under `head.*` to per-point features.
pub fn decode_head(store: &ParamStore, feats: &FeatureField, task: Task) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, store, false);
    let s = (feats.num_scalars() > 0).then(|| g.constant(feats.scalars.clone()));
    let v = (feats.vectors.ncols() > 0).then(|| g.constant(feats.vectors.clone()));
    let out = head_graph(&mut g, &bound, task, s, v, feats.d)?;
    Ok(g.value(out).clone())
}
