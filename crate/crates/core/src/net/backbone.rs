use std::sync::Arc;

use gradgraph::{Graph, NodeId, ParamStore};
use ndarray::Array2;

use super::Bound;
use crate::error::Result;

fn linear(g: &mut Graph, bound: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    let w = bound.get(&format!("{name}.w"))?;
    let b = bound.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

fn depth(bound: &Bound, prefix: &str, tag: &str) -> usize {
    (0..).take_while(|i| bound.has(&format!("{prefix}.{tag}{i}.w"))).count()
}

/// Per-point ReLU layers, a max-pool over each segment broadcast back to its
/// rows, the concatenation of every hidden layer with the pooled code, more
/// ReLU layers and a final linear map.
pub(crate) fn backbone_graph(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    input: NodeId,
    segments: &Arc<[usize]>,
    num_segments: usize,
) -> Result<NodeId> {
    let hidden = depth(bound, prefix, "h");
    let mut h = input;
    let mut skips = Vec::with_capacity(hidden + 1);
    for i in 0..hidden {
        let z = linear(g, bound, &format!("{prefix}.h{i}"), h)?;
        h = g.relu(z);
        skips.push(h);
    }
    if hidden > 0 {
        let pooled = g.segment_max(h, segments, num_segments)?;
        let spread = g.gather_rows(pooled, segments.clone())?;
        skips.push(spread);
        h = g.concat_cols(&skips)?;
    }
    for i in 0..depth(bound, prefix, "p") {
        let z = linear(g, bound, &format!("{prefix}.p{i}"), h)?;
        h = g.relu(z);
    }
    linear(g, bound, &format!("{prefix}.out"), h)
}

/// Evaluates the backbone stored under `prefix` on `input`, pooling over all
/// rows.
pub fn backbone_forward(store: &ParamStore, prefix: &str, input: &Array2<f64>) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, store, false);
    let x = g.constant(input.clone());
    let segments: Arc<[usize]> = vec![0; input.nrows()].into();
    let out = backbone_graph(&mut g, &bound, prefix, x, &segments, 1)?;
    Ok(g.value(out).clone())
}
