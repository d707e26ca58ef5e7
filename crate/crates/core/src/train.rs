//! Training configuration, loss, Adam and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use gradgraph::{Graph, NodeId, ParamStore};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{y_gt, Dataset};
use crate::em::FisherKind;
use crate::error::{ApenError, Result};
use crate::geom::{LabeledCloud, PointCloud};
use crate::metrics::{accuracy, mean_iou};
use crate::net::{LayerSpec, ModelConfig, ModelParams, Task};

/// Flat key-value training configuration; every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Mixture bandwidth per encoder layer; its length sets the depth.
    pub sigmas: Vec<f64>,
    pub scalar_widths: Vec<usize>,
    pub vector_widths: Vec<usize>,
    pub tau: f64,
    pub em_iters: usize,
    pub merge_freq: usize,
    pub k0: usize,
    pub hidden: Vec<usize>,
    pub post: Vec<usize>,
    pub decoder_width: usize,
    pub head_hidden: usize,
    pub task: String,
    pub fisher: String,
    pub damping: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_vote: f64,
    pub weight_task: f64,
    pub seed: u64,
    /// Worker threads for per-sample gradients; results are reduced in
    /// sample order either way.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.002, 0.005, 0.008, 0.1],
            scalar_widths: vec![8, 8, 8, 16],
            vector_widths: vec![2, 2, 2, 4],
            tau: 4.0,
            em_iters: 16,
            merge_freq: 4,
            k0: 16,
            hidden: vec![24, 32, 40, 48, 56],
            post: vec![64, 32],
            decoder_width: 16,
            head_hidden: 32,
            task: "seg".into(),
            fisher: "observed".into(),
            damping: 1e-6,
            learning_rate: 3e-3,
            batch_size: 2,
            epochs: 20,
            weight_vote: 1.0,
            weight_task: 1.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            ApenError::Parse {
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ApenError::InvalidConfiguration(m.into()));
        if self.sigmas.is_empty() {
            return bad("at least one layer is required");
        }
        if self.scalar_widths.len() != self.sigmas.len() || self.vector_widths.len() != self.sigmas.len() {
            return bad("sigmas, scalar_widths and vector_widths must have equal lengths");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.threads == 0 {
            return bad("batch_size and threads must be positive");
        }
        if !(self.weight_vote >= 0.0 && self.weight_task >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    /// Network configuration for `d`-dimensional data with `classes`
    /// output classes.
    pub fn model_config(&self, d: usize, classes: usize) -> Result<ModelConfig> {
        self.validate()?;
        let mut layers = Vec::with_capacity(self.sigmas.len());
        let (mut a_in, mut b_in) = (0, 0);
        for l in 0..self.sigmas.len() {
            layers.push(LayerSpec {
                a_in,
                b_in,
                a_out: self.scalar_widths[l],
                b_out: self.vector_widths[l],
                sigma: self.sigmas[l],
                tau: self.tau,
                em_iters: self.em_iters,
                merge_freq: self.merge_freq,
            });
            (a_in, b_in) = (self.scalar_widths[l], self.vector_widths[l]);
        }
        let task: Task = self.task.parse().map_err(|e: ApenError| ApenError::InvalidConfiguration(e.to_string()))?;
        let fisher: FisherKind = self
            .fisher
            .parse()
            .map_err(|e: ApenError| ApenError::InvalidConfiguration(e.to_string()))?;
        let c = ModelConfig {
            d,
            layers,
            k0: self.k0,
            hidden: self.hidden.clone(),
            post: self.post.clone(),
            decoder_width: self.decoder_width,
            head_hidden: self.head_hidden,
            classes,
            task,
            fisher,
            damping: self.damping,
            seed: self.seed,
        };
        c.validate()?;
        Ok(c)
    }

    /// Fresh parameters for a dataset: part classes for segmentation, one
    /// more than the largest class label for classification.
    pub fn init_model(&self, ds: &Dataset) -> Result<ModelParams> {
        let task: Task = self.task.parse()?;
        let classes = match task {
            Task::Segmentation => ds.parts,
            Task::Classification => ds.samples.iter().filter_map(|s| s.class_label).max().map_or(1, |c| c + 1),
        };
        ModelParams::init(self.model_config(ds.d, classes)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub vote: f64,
    pub task: f64,
}

/// `vote · Σ_l mean_i ‖pred_l,i − target_i‖₁ + task · mean cross-entropy`.
pub fn loss_node(
    g: &mut Graph,
    preds: &[NodeId],
    target: &Array2<f64>,
    logits: NodeId,
    labels: &[usize],
    w: LossWeights,
) -> Result<NodeId> {
    let (rows, _) = g.shape(logits);
    if labels.len() != rows {
        return Err(ApenError::InvalidArgument(format!("{} labels for {rows} logit rows", labels.len())));
    }
    let t = g.constant(target.clone());
    let mut terms = Vec::with_capacity(preds.len() + 1);
    for &p in preds {
        if g.shape(p) != target.dim() {
            return Err(ApenError::InvalidArgument(format!(
                "vote shape {:?} differs from target {:?}",
                g.shape(p),
                target.dim()
            )));
        }
        let diff = g.sub(p, t)?;
        let l1 = g.abs_sum(diff);
        terms.push(g.scale(l1, w.vote / target.nrows() as f64));
    }
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick(logp, labels.to_vec().into())?;
    let nll = g.sum(picked);
    terms.push(g.scale(nll, -w.task / rows as f64));
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Loss value from per-layer offsets `Y_l`, the target offsets, logits and
/// labels.
pub fn compute_loss(
    offsets: &[Array2<f64>],
    y_target: &Array2<f64>,
    logits: &Array2<f64>,
    labels: &[usize],
    w: LossWeights,
) -> Result<f64> {
    let mut g = Graph::new();
    let preds: Vec<NodeId> = offsets.iter().map(|y| g.constant(y.clone())).collect();
    let l = g.constant(logits.clone());
    let out = loss_node(&mut g, &preds, y_target, l, labels, w)?;
    Ok(g.scalar(out))
}

fn targets(sample: &LabeledCloud, task: Task) -> Result<(Array2<f64>, Vec<usize>)> {
    let x = &sample.cloud;
    let abs = x.positions() + &y_gt(x, &sample.gt_parts)?;
    let labels = match task {
        Task::Segmentation => sample.gt_parts.labels().to_vec(),
        Task::Classification => vec![sample
            .class_label
            .ok_or_else(|| ApenError::InvalidArgument("classification sample without a class label".into()))?],
    };
    Ok((abs, labels))
}

/// Per-sample diagnostics of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PassStats {
    pub loss: f64,
    pub delta: Vec<f64>,
    pub active: Vec<usize>,
}

/// Loss, parameter gradients and diagnostics for one sample.
pub fn sample_gradient(params: &ModelParams, sample: &LabeledCloud, w: LossWeights) -> Result<(PassStats, ParamStore)> {
    let mut fg = params.forward_graph(&sample.cloud, true)?;
    let (target, labels) = targets(sample, params.config.task)?;
    let loss = loss_node(&mut fg.graph, &fg.votes, &target, fg.logits, &labels, w)?;
    let value = fg.graph.scalar(loss);
    if !value.is_finite() {
        return Err(ApenError::NumericFailure("non-finite loss".into()));
    }
    let grads = fg.graph.backward(loss)?;
    let mut out = params.store.zeros_like();
    for (name, g) in grads.named() {
        if let Some(slot) = out.get_mut(name) {
            slot.assign(g);
        }
    }
    if out.iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
        return Err(ApenError::NumericFailure("non-finite gradient".into()));
    }
    let stats = PassStats {
        loss: value,
        delta: fg
            .partitions
            .iter()
            .map(|&q| {
                let w = fg.graph.value(q);
                w.rows().into_iter().map(|r| 1.0 - r.fold(0.0f64, |m, &v| m.max(v))).sum()
            })
            .collect(),
        active: fg.active.iter().map(Vec::len).collect(),
    };
    Ok((stats, out))
}

/// Loss of `params` on one sample without gradients.
pub fn sample_loss(params: &ModelParams, sample: &LabeledCloud, w: LossWeights) -> Result<f64> {
    let mut fg = params.forward_graph(&sample.cloud, false)?;
    let (target, labels) = targets(sample, params.config.task)?;
    let loss = loss_node(&mut fg.graph, &fg.votes, &target, fg.logits, &labels, w)?;
    Ok(fg.graph.scalar(loss))
}

/// Adam with fixed step size.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.zeros_like(),
            v: store.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in store.iter_mut() {
            let (Some(g), Some(m), Some(v)) = (grads.get(name), self.m.get_mut(name), self.v.get_mut(name)) else {
                continue;
            };
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch, before each batch's update.
    pub loss: f64,
    /// Mean `δ(Q_l)` per layer.
    pub delta: Vec<f64>,
    /// Mean number of surviving components per layer.
    pub active: Vec<f64>,
}

pub fn format_log(records: &[EpochRecord]) -> String {
    let layers = records.first().map_or(0, |r| r.delta.len());
    let mut s = String::from("epoch,loss");
    for l in 0..layers {
        let _ = write!(s, ",delta_{l}");
    }
    for l in 0..layers {
        let _ = write!(s, ",active_{l}");
    }
    s.push('\n');
    for r in records {
        let _ = write!(s, "{},{}", r.epoch, r.loss);
        for v in r.delta.iter().chain(&r.active) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// Set when training stopped on a numeric failure; `params` are then
    /// those from before the failing batch.
    pub aborted: Option<String>,
}

/// Trains a model from `init` for `cfg.epochs` epochs.
pub fn train_from(cfg: &TrainConfig, init: ModelParams, ds: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutput> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(ApenError::InvalidArgument("empty dataset".into()));
    }
    let w = LossWeights {
        vote: cfg.weight_vote,
        task: cfg.weight_task,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| ApenError::InvalidConfiguration(e.to_string()))?;
    let mut params = init;
    let mut adam = Adam::new(&params.store, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let layers = params.config.layers.len();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut dsum = vec![0.0; layers];
        let mut ksum = vec![0.0; layers];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(PassStats, ParamStore)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| sample_gradient(&params, &ds.samples[i], w))
                    .collect()
            });
            let mut total = params.store.zeros_like();
            for r in results {
                let (stats, g) = match r {
                    Ok(v) => v,
                    Err(e) => {
                        return Ok(TrainOutput {
                            params,
                            log,
                            aborted: Some(format!("epoch {epoch}: {e}")),
                        })
                    }
                };
                loss += stats.loss;
                for l in 0..layers {
                    dsum[l] += stats.delta[l];
                    ksum[l] += stats.active[l] as f64;
                }
                for (name, t) in total.iter_mut() {
                    *t += g.get(name).expect("same names");
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (_, t) in total.iter_mut() {
                *t *= scale;
            }
            adam.step(&mut params.store, &total);
        }
        let n = ds.len() as f64;
        let rec = EpochRecord {
            epoch,
            loss: loss / n,
            delta: dsum.iter().map(|v| v / n).collect(),
            active: ksum.iter().map(|v| v / n).collect(),
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(TrainOutput {
        params,
        log,
        aborted: None,
    })
}

pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutput> {
    let init = cfg.init_model(ds)?;
    train_from(cfg, init, ds, |_| {})
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// mIoU (segmentation) or correctness (classification) per sample.
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// Predicted labels for one cloud.
pub fn predict_labels(params: &ModelParams, x: &PointCloud) -> Result<Vec<usize>> {
    Ok(params.predict(x)?.labels())
}

pub fn evaluate(params: &ModelParams, ds: &Dataset) -> Result<EvalReport> {
    if ds.d != params.config.d {
        return Err(ApenError::InvalidArgument(format!(
            "model is {}-D, data is {}-D",
            params.config.d, ds.d
        )));
    }
    if ds.is_empty() {
        return Err(ApenError::InvalidArgument("empty dataset".into()));
    }
    let per_sample = ds
        .samples
        .par_iter()
        .map(|s| {
            let pred = predict_labels(params, &s.cloud)?;
            match params.config.task {
                Task::Segmentation => mean_iou(&pred, s.gt_parts.labels()),
                Task::Classification => {
                    let c = s
                        .class_label
                        .ok_or_else(|| ApenError::InvalidArgument("sample without a class label".into()))?;
                    accuracy(&pred, &[c])
                }
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(EvalReport { per_sample, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest `|a − f| / max(|a| + |f|, floor)` over checked coordinates.
    pub max_rel_error: f64,
    /// The larger of `1e-6 · max |analytic gradient|` and `1e4 · ε · |loss| / step`,
    /// the gradient size at which central-difference round-off alone reaches
    /// a relative error of `1e-4`.
    pub floor: f64,
    pub checked: usize,
    /// Coordinates whose ±step perturbation changed a discrete choice.
    pub excluded: usize,
}

/// Central differences of the full loss with respect to every parameter
/// coordinate, against the reverse-mode gradient. Coordinates whose
/// perturbation crosses a ReLU, max, argmax or merge boundary are skipped
/// and counted.
pub fn gradcheck_model(params: &ModelParams, sample: &LabeledCloud, w: LossWeights, step: f64) -> Result<GradcheckReport> {
    let (stats, analytic) = sample_gradient(params, sample, w)?;
    let base_sig = params.forward_graph(&sample.cloud, false)?.signature();
    let (target, labels) = targets(sample, params.config.task)?;
    let eval = |p: &ModelParams| -> Result<(f64, u64)> {
        let mut fg = p.forward_graph(&sample.cloud, false)?;
        let sig = fg.signature();
        let loss = loss_node(&mut fg.graph, &fg.votes, &target, fg.logits, &labels, w)?;
        Ok((fg.graph.scalar(loss), sig))
    };
    let scale = analytic
        .iter()
        .flat_map(|(_, t)| t.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let roundoff = 1e4 * f64::EPSILON * stats.loss.abs() / step;
    let floor = (1e-6 * scale).max(roundoff).max(1e-12);
    let coords: Vec<(String, (usize, usize))> = params
        .store
        .iter()
        .flat_map(|(name, t)| t.indexed_iter().map(move |(ix, _)| (name.to_string(), ix)).collect::<Vec<_>>())
        .collect();
    let results: Vec<Option<f64>> = coords
        .par_iter()
        .map(|(name, ix)| {
            let mut probe = params.clone();
            let x0 = params.store.get(name).expect("known name")[*ix];
            probe.store.get_mut(name).expect("known name")[*ix] = x0 + step;
            let (hi, s_hi) = eval(&probe)?;
            probe.store.get_mut(name).expect("known name")[*ix] = x0 - step;
            let (lo, s_lo) = eval(&probe)?;
            if s_hi != base_sig || s_lo != base_sig {
                return Ok(None);
            }
            let fd = (hi - lo) / (2.0 * step);
            let a = analytic.get(name).expect("known name")[*ix];
            Ok(Some((a - fd).abs() / (a.abs() + fd.abs()).max(floor)))
        })
        .collect::<Result<_>>()?;
    let checked: Vec<f64> = results.iter().flatten().copied().collect();
    Ok(GradcheckReport {
        max_rel_error: checked.iter().copied().fold(0.0, f64::max),
        floor,
        checked: checked.len(),
        excluded: results.len() - checked.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn vote_term_closed_form() {
        let y = Array2::from_elem((5, 2), 1.0);
        let zero = Array2::zeros((5, 2));
        let logits = Array2::zeros((5, 2));
        let l = compute_loss(&[y], &zero, &logits, &[0; 5], LossWeights { vote: 1.0, task: 0.0 }).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let l = compute_loss(&[], &Array2::zeros((3, 2)), &Array2::zeros((3, 4)), &[0, 1, 3], LossWeights { vote: 1.0, task: 1.0 })
            .unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(compute_loss(&[], &Array2::zeros((3, 2)), &Array2::zeros((3, 4)), &[0], LossWeights { vote: 1.0, task: 1.0 }).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("p", array![[1.0, -2.0]]).unwrap();
        let mut g = ParamStore::new();
        g.insert("p", array![[3.0, -0.5]]).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &g);
        let p = store.get("p").unwrap();
        assert!((p[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn config_round_trips_and_reports_lines() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let err = TrainConfig::from_toml("epochs = 3\nlearning_rat = 0.1\n").unwrap_err();
        assert!(matches!(err, ApenError::Parse { line: 2, .. }), "{err:?}");
    }
}
