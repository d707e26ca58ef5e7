//! Frame-averaged piecewise equivariant layers and the encoder built from
//! them.
//!
//! Parameters live in one [`ParamStore`] under block prefixes: `enc{l}` for
//! the shared backbone of encoder layer `l`, `dec` for the decoder block and
//! `head` for the invariant output head.

mod backbone;
mod frame;
mod io;
mod layer;
mod model;

use std::collections::BTreeMap;

use gradgraph::{Graph, NodeId, ParamStore, Tensor};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::em::{EMConfig, FisherKind};
use crate::error::{invalid, ApenError, Result};
use crate::geom::{HardPartition, PiecewiseMotion};

pub use backbone::backbone_forward;
pub use frame::{frame_average, pca_frame, Frame, DEGENERATE_GAP};
pub use io::{load_model, parse_model, save_model, write_model};
pub use layer::{apen_layer, piecewise_layer, LayerOutput};
pub use model::{decode_head, encoder_forward, EncoderOutput, ForwardGraph, Prediction};

/// Per-point features: `scalars` is `n x a` (type 0), `vectors` is
/// `n x (b·d)` holding `b` type-1 channels as consecutive `d`-wide blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub scalars: Array2<f64>,
    pub vectors: Array2<f64>,
    pub d: usize,
}

impl FeatureField {
    pub fn empty(n: usize, d: usize) -> Self {
        Self {
            scalars: Array2::zeros((n, 0)),
            vectors: Array2::zeros((n, 0)),
            d,
        }
    }

    pub fn n(&self) -> usize {
        self.scalars.nrows()
    }

    pub fn num_scalars(&self) -> usize {
        self.scalars.ncols()
    }

    pub fn num_vectors(&self) -> usize {
        self.vectors.ncols() / self.d
    }

    /// Action of a piecewise motion: every type-1 channel of point `i` is
    /// rotated by the motion of its part, type-0 channels are left alone.
    pub fn transform(&self, g: &PiecewiseMotion, z: &HardPartition) -> Result<Self> {
        if z.n() != self.n() || g.k() != z.k() || g.motions()[0].d() != self.d {
            return invalid("motion, partition and features disagree");
        }
        let d = self.d;
        let mut vectors = self.vectors.clone();
        for (i, &part) in z.labels().iter().enumerate() {
            let r = &g.motions()[part].rotation;
            for c in 0..self.num_vectors() {
                let v = self.vectors.slice(s![i, c * d..(c + 1) * d]);
                vectors.slice_mut(s![i, c * d..(c + 1) * d]).assign(&r.dot(&v));
            }
        }
        Ok(Self {
            scalars: self.scalars.clone(),
            vectors,
            d,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = ApenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" | "segmentation" => Ok(Self::Segmentation),
            "cls" | "classification" => Ok(Self::Classification),
            other => Err(ApenError::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Segmentation => "seg",
            Task::Classification => "cls",
        })
    }
}

/// One encoder layer. `a_in`/`b_in` count the type-0/type-1 channels carried
/// over from the previous layer; the backbone additionally always sees the
/// local position and normal and two partition channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub a_in: usize,
    pub b_in: usize,
    pub a_out: usize,
    pub b_out: usize,
    pub sigma: f64,
    pub tau: f64,
    pub em_iters: usize,
    pub merge_freq: usize,
}

/// Network shape and partition settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: Vec<LayerSpec>,
    /// Number of parts of the initial furthest-point Voronoi partition.
    pub k0: usize,
    /// Per-point widths before the max-pool.
    pub hidden: Vec<usize>,
    /// Widths after the concatenation, before the output layer.
    pub post: Vec<usize>,
    pub decoder_width: usize,
    pub head_hidden: usize,
    pub classes: usize,
    pub task: Task,
    pub fisher: FisherKind,
    pub damping: f64,
    pub seed: u64,
}

/// Number of type-0 channels derived from a soft partition.
pub const Q_CHANNELS: usize = 2;

impl ModelConfig {
    /// Desk-scale default: four layers with the bandwidth schedule
    /// `(0.002, 0.005, 0.008, 0.1)` and 16 EM iterations.
    pub fn desk(d: usize, classes: usize) -> Self {
        let sigmas = [0.002, 0.005, 0.008, 0.1];
        let outs = [(8, 2), (8, 2), (8, 2), (16, 4)];
        let mut layers = Vec::new();
        let (mut a_in, mut b_in) = (0, 0);
        for (&sigma, &(a_out, b_out)) in sigmas.iter().zip(&outs) {
            layers.push(LayerSpec {
                a_in,
                b_in,
                a_out,
                b_out,
                sigma,
                tau: 4.0,
                em_iters: 16,
                merge_freq: 4,
            });
            (a_in, b_in) = (a_out, b_out);
        }
        Self {
            d,
            layers,
            k0: 16,
            hidden: vec![24, 32, 40, 48, 56],
            post: vec![64, 32],
            decoder_width: 16,
            head_hidden: 32,
            classes,
            task: Task::Segmentation,
            fisher: FisherKind::Observed,
            damping: 1e-6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ApenError::InvalidConfiguration(m));
        if !matches!(self.d, 2 | 3) {
            return bad(format!("dimension must be 2 or 3, got {}", self.d));
        }
        if self.layers.is_empty() {
            return bad("at least one layer is required".into());
        }
        if self.k0 == 0 || self.classes == 0 {
            return bad("k0 and classes must be positive".into());
        }
        let (mut a, mut b) = (0, 0);
        let mut last_sigma = 0.0;
        for (l, s) in self.layers.iter().enumerate() {
            if s.a_in != a || s.b_in != b {
                return bad(format!("layer {l} expects ({}, {}) inputs, previous layer gives ({a}, {b})", s.a_in, s.b_in));
            }
            if s.b_out == 0 {
                return bad(format!("layer {l} needs at least one type-1 output for its votes"));
            }
            if !(s.sigma > 0.0) || s.em_iters == 0 || s.merge_freq == 0 || !(s.tau >= 0.0) {
                return bad(format!("layer {l} has invalid EM settings"));
            }
            if s.sigma < last_sigma {
                return bad(format!("sigma decreases at layer {l} ({} < {last_sigma})", s.sigma));
            }
            last_sigma = s.sigma;
            (a, b) = (s.a_out, s.b_out);
        }
        Ok(())
    }

    pub(crate) fn em_config(&self, layer: usize) -> EMConfig {
        let s = &self.layers[layer];
        EMConfig {
            max_iter: s.em_iters,
            merge_freq: s.merge_freq,
            tau: s.tau,
            fisher_damping: self.damping,
            fisher: self.fisher,
            seed: self.seed.wrapping_add(layer as u64 + 1),
            ..EMConfig::default()
        }
    }

    fn backbone_in(&self, a_in: usize, b_in: usize) -> usize {
        self.d * (2 + b_in) + a_in + Q_CHANNELS
    }
}

/// Trainable parameters together with the configuration they were built
/// for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
    let b = Array2::from_shape_fn((1, fan_out), |_| rng.random_range(-bound..bound));
    store.insert(format!("{name}.w"), w)?;
    store.insert(format!("{name}.b"), b)?;
    Ok(())
}

fn init_backbone(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: &[usize],
    post: &[usize],
    output: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut width = input;
    for (i, &h) in hidden.iter().enumerate() {
        init_linear(store, &format!("{prefix}.h{i}"), width, h, rng)?;
        width = h;
    }
    if !hidden.is_empty() {
        width = hidden.iter().sum::<usize>() + hidden[hidden.len() - 1];
    }
    for (i, &p) in post.iter().enumerate() {
        init_linear(store, &format!("{prefix}.p{i}"), width, p, rng)?;
        width = p;
    }
    init_linear(store, &format!("{prefix}.out"), width, output, rng)
}

impl ModelParams {
    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d;
        for (l, s) in config.layers.iter().enumerate() {
            init_backbone(
                &mut store,
                &format!("enc{l}"),
                config.backbone_in(s.a_in, s.b_in),
                &config.hidden,
                &config.post,
                s.a_out + d * s.b_out,
                &mut rng,
            )?;
        }
        let last = config.layers.last().unwrap();
        init_backbone(
            &mut store,
            "dec",
            config.backbone_in(last.a_out, last.b_out),
            &config.hidden,
            &config.post,
            config.decoder_width,
            &mut rng,
        )?;
        init_linear(&mut store, "head.h", config.decoder_width, config.head_hidden, &mut rng)?;
        init_linear(&mut store, "head.out", config.head_hidden, config.classes, &mut rng)?;
        Ok(Self { config, store })
    }

    /// Same shapes, every entry zero.
    pub fn zeroed(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.zeros_like(),
        }
    }
}

/// Graph nodes for every parameter of a store.
pub(crate) struct Bound {
    nodes: BTreeMap<String, NodeId>,
}

impl Bound {
    pub(crate) fn new(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let nodes = store
            .iter()
            .map(|(name, v)| {
                let id = if trainable {
                    g.param(name, v.clone())
                } else {
                    g.constant(v.clone())
                };
                (name.to_string(), id)
            })
            .collect();
        Self { nodes }
    }

    pub(crate) fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| ApenError::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub(crate) fn has(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }
}

pub(crate) fn ones(rows: usize, cols: usize) -> Tensor {
    Array2::from_elem((rows, cols), 1.0)
}
