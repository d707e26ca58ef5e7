use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{invalid, GraphError, Result};
use crate::Tensor;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation whose forward pass ran outside the graph.
///
/// Implementations may carry whatever state the forward computation left
/// behind (a fitted mixture, a factorized matrix, ...).
pub trait CustomFunction {
    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor)
        -> Result<Vec<Tensor>>;
}

type ForwardFn = dyn Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync;
type BackwardFn = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync;

/// A reusable primitive made of a forward closure and a backward closure.
///
/// The forward closure runs opaquely; during [`Graph::backward`] the backward
/// closure receives the input values, the output value and the upstream
/// gradient and must return one gradient per input.
#[derive(Clone)]
pub struct CustomPrimitive {
    forward: Arc<ForwardFn>,
    backward: Arc<BackwardFn>,
}

impl CustomPrimitive {
    pub fn new<F, B>(forward: F, backward: B) -> Self
    where
        F: Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync + 'static,
        B: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync + 'static,
    {
        Self {
            forward: Arc::new(forward),
            backward: Arc::new(backward),
        }
    }

    pub fn apply(&self, graph: &mut Graph, inputs: &[NodeId]) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| graph.value(i)).collect();
            (self.forward)(&vals)?
        };
        graph.custom(
            inputs,
            value,
            Box::new(ClosureRule {
                backward: Arc::clone(&self.backward),
            }),
        )
    }
}

struct ClosureRule {
    backward: Arc<BackwardFn>,
}

impl CustomFunction for ClosureRule {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok((self.backward)(inputs, output, upstream))
    }
}

/// Order in which [`Graph::backward_with`] visits nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Traversal {
    /// Reverse creation order.
    Reverse,
    /// Reverse post-order of a depth-first search from the loss.
    DepthFirst,
}

enum Leaf {
    Computed,
    Constant,
    Variable(Option<String>),
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SegmentMax { x: NodeId, argmax: Vec<usize> },
    RowMax { x: NodeId, argmax: Vec<usize> },
    Concat(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    Gather { x: NodeId, idx: Arc<[usize]> },
    Scatter { x: NodeId, idx: Arc<[usize]>, weights: Option<Arc<[f64]>> },
    Mean(Vec<NodeId>),
    RowNormalize(NodeId),
    RowBlockLinear { x: NodeId, mats: Arc<[Tensor]>, row_mat: Arc<[usize]>, transpose: bool },
    Sum(NodeId),
    AbsSum(NodeId),
    SqSum(NodeId),
    LogSoftmax(NodeId),
    Pick { x: NodeId, cols: Arc<[usize]> },
    Custom { inputs: Vec<NodeId>, rule: Box<dyn CustomFunction> },
}

struct Node {
    value: Tensor,
    op: Op,
    leaf: Leaf,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_node: BTreeMap<usize, Tensor>,
    by_name: BTreeMap<String, usize>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` if the loss does not depend on it
    /// or the node is not trainable.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).and_then(|i| self.by_node.get(i))
    }

    /// Named gradients in name order. Parameters the loss does not reach are
    /// absent.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name
            .iter()
            .filter_map(|(k, i)| self.by_node.get(i).map(|g| (k.as_str(), g)))
    }
}

fn shape_err<T>(op: &str, a: (usize, usize), b: (usize, usize)) -> Result<T> {
    invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            leaf: Leaf::Computed,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, false);
        self.nodes[id.0].leaf = Leaf::Constant;
        id
    }

    /// An anonymous trainable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].leaf = Leaf::Variable(None);
        id
    }

    /// A named trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].leaf = Leaf::Variable(Some(name.into()));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return shape_err("matmul", sa, sb);
        }
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(op, sa, sb);
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `x + 1 b^T` for a `1 x c` row `b`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.0 != 1 || sb.1 != sx.1 {
            return shape_err("add_row", sx, sb);
        }
        let v = self.value(x) + self.value(b);
        let rg = self.rg(&[x, b]);
        Ok(self.push(v, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|a| if a > 0.0 { a } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::exp);
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).iter().any(|&a| a <= 0.0 || !a.is_finite()) {
            return Err(GraphError::NumericFailure(
                "log of a non-positive or non-finite value".into(),
            ));
        }
        let v = self.value(x).mapv(f64::ln);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Log(x), rg))
    }

    /// Column-wise maximum over groups of rows. `segments[r]` names the group
    /// of row `r`; the result has one row per group. Ties go to the lowest row
    /// index, and the backward pass routes each gradient entry to that row only.
    pub fn segment_max(&mut self, x: NodeId, segments: &[usize], num_segments: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if segments.len() != rows {
            return invalid(format!(
                "segment_max: {} segment ids for {rows} rows",
                segments.len()
            ));
        }
        let mut out = Array2::from_elem((num_segments, cols), f64::NEG_INFINITY);
        let mut argmax = vec![usize::MAX; num_segments * cols];
        let xv = self.value(x);
        for (r, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return invalid(format!("segment_max: segment id {s} >= {num_segments}"));
            }
            for c in 0..cols {
                let a = xv[[r, c]];
                let slot = &mut argmax[s * cols + c];
                if *slot == usize::MAX || a > out[[s, c]] {
                    out[[s, c]] = a;
                    *slot = r;
                }
            }
        }
        if cols > 0 && argmax.iter().any(|&a| a == usize::MAX) {
            return invalid("segment_max: empty segment");
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SegmentMax { x, argmax }, rg))
    }

    /// Maximum over the columns of each row, as an `n x 1` column. Ties go to
    /// the lowest column index.
    pub fn row_max(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if cols == 0 {
            return invalid("row_max: no columns");
        }
        let xv = self.value(x);
        let mut out = Array2::zeros((rows, 1));
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut best = 0;
            for c in 1..cols {
                if xv[[r, c]] > xv[[r, best]] {
                    best = c;
                }
            }
            out[[r, 0]] = xv[[r, best]];
            argmax.push(best);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RowMax { x, argmax }, rg))
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return invalid("concat_cols: nothing to concatenate");
        }
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return shape_err("concat_cols", self.shape(parts[0]), self.shape(p));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| GraphError::InvalidArgument(format!("concat_cols: {e}")))?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (_, cols) = self.shape(x);
        if start + len > cols {
            return invalid(format!("slice_cols: {start}+{len} exceeds {cols} columns"));
        }
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceCols { x, start }, rg))
    }

    /// `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<[usize]>) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return invalid(format!("gather_rows: index {bad} out of {rows} rows"));
        }
        let xv = self.value(x);
        let mut v = Array2::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&xv.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Gather { x, idx }, rg))
    }

    /// `out[idx[r]] += w[r] * x[r]` into `rows_out` zero rows.
    pub fn scatter_rows(
        &mut self,
        x: NodeId,
        idx: Arc<[usize]>,
        rows_out: usize,
        weights: Option<Arc<[f64]>>,
    ) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if idx.len() != rows {
            return invalid(format!("scatter_rows: {} indices for {rows} rows", idx.len()));
        }
        if let Some(w) = &weights {
            if w.len() != rows {
                return invalid("scatter_rows: weight count differs from row count");
            }
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows_out) {
            return invalid(format!("scatter_rows: index {bad} out of {rows_out} rows"));
        }
        let xv = self.value(x);
        let mut v = Array2::zeros((rows_out, cols));
        for (r, &i) in idx.iter().enumerate() {
            let w = weights.as_ref().map_or(1.0, |w| w[r]);
            v.row_mut(i).scaled_add(w, &xv.row(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Scatter { x, idx, weights }, rg))
    }

    /// Elementwise mean of same-shaped nodes.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return invalid("mean_of: empty list");
        }
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            if self.shape(p) != v.dim() {
                return shape_err("mean_of", v.dim(), self.shape(p));
            }
            v += self.value(p);
        }
        v /= parts.len() as f64;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::Mean(parts.to_vec()), rg))
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let sums = xv.sum_axis(Axis(1));
        if sums.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(GraphError::NumericFailure("row_normalize: zero row sum".into()));
        }
        let v = xv / &sums.insert_axis(Axis(1));
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::RowNormalize(x), rg))
    }

    /// Right-multiplies every `d`-wide column block of row `r` by
    /// `mats[row_mat[r]]` (or its transpose). The matrices are constants.
    pub fn row_block_linear(
        &mut self,
        x: NodeId,
        mats: Arc<[Tensor]>,
        row_mat: Arc<[usize]>,
        transpose: bool,
    ) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if mats.is_empty() {
            return invalid("row_block_linear: no matrices");
        }
        let d = mats[0].nrows();
        if mats.iter().any(|m| m.dim() != (d, d)) {
            return invalid("row_block_linear: matrices must be square and equal-sized");
        }
        if row_mat.len() != rows || cols % d != 0 {
            return invalid(format!(
                "row_block_linear: {rows}x{cols} input with block {d} and {} row indices",
                row_mat.len()
            ));
        }
        if row_mat.iter().any(|&m| m >= mats.len()) {
            return invalid("row_block_linear: matrix index out of range");
        }
        let v = block_apply(self.value(x), &mats, &row_mat, transpose);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::RowBlockLinear { x, mats, row_mat, transpose }, rg))
    }

    /// Sum of all entries, as `1 x 1`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    /// Sum of absolute values (the L1 reduction), as `1 x 1`.
    pub fn abs_sum(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(x).iter().map(|a| a.abs()).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::AbsSum(x), rg)
    }

    /// Sum of squares, as `1 x 1`.
    pub fn sq_sum(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(x).iter().map(|a| a * a).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::SqSum(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|a| a - lse);
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::LogSoftmax(x), rg)
    }

    /// `out[r] = x[r, cols[r]]` as an `n x 1` column.
    pub fn pick(&mut self, x: NodeId, cols: Arc<[usize]>) -> Result<NodeId> {
        let (rows, ncols) = self.shape(x);
        if cols.len() != rows || cols.iter().any(|&c| c >= ncols) {
            return invalid("pick: column index list does not match input");
        }
        let xv = self.value(x);
        let v = Array2::from_shape_fn((rows, 1), |(r, _)| xv[[r, cols[r]]]);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Pick { x, cols }, rg))
    }

    /// Records an opaque operation whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, rule: Box<dyn CustomFunction>) -> Result<NodeId> {
        if let Some(&bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return invalid(format!("custom: unknown input node {}", bad.0));
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        ))
    }

    /// Fingerprint of every discrete choice made in the forward pass: ReLU
    /// activity masks and max-reduction winners. Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(_) => {
                    i.hash(&mut h);
                    for a in node.value.iter() {
                        (*a > 0.0).hash(&mut h);
                    }
                }
                Op::SegmentMax { argmax, .. } | Op::RowMax { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn parents(&self, i: usize) -> Vec<NodeId> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::RowNormalize(x)
            | Op::Sum(x)
            | Op::AbsSum(x)
            | Op::SqSum(x)
            | Op::LogSoftmax(x) => vec![*x],
            Op::SegmentMax { x, .. }
            | Op::RowMax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Gather { x, .. }
            | Op::Scatter { x, .. }
            | Op::RowBlockLinear { x, .. }
            | Op::Pick { x, .. } => vec![*x],
            Op::Concat(v) | Op::Mean(v) => v.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn depth_first_order(&self, loss: usize) -> Vec<usize> {
        let mut visited = vec![false; loss + 1];
        let mut post = Vec::new();
        let mut stack = vec![(loss, false)];
        while let Some((i, expanded)) = stack.pop() {
            if expanded {
                post.push(i);
                continue;
            }
            if visited[i] {
                continue;
            }
            visited[i] = true;
            stack.push((i, true));
            for p in self.parents(i) {
                if !visited[p.0] && self.nodes[p.0].requires_grad {
                    stack.push((p.0, false));
                }
            }
        }
        post.reverse();
        post
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.backward_with(loss, Traversal::Reverse)
    }

    /// Accumulates d(loss)/d(node) for every trainable leaf reachable from
    /// `loss`. Contributions along different paths are summed.
    pub fn backward_with(&self, loss: NodeId, traversal: Traversal) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return invalid(format!(
                "backward: loss must be 1x1, got {:?}",
                self.shape(loss)
            ));
        }
        let order: Vec<usize> = match traversal {
            Traversal::Reverse => (0..=loss.0).rev().collect(),
            Traversal::DepthFirst => self.depth_first_order(loss.0),
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();
        for i in order {
            let Some(g) = grads[i].take() else { continue };
            if let Leaf::Variable(name) = &self.nodes[i].leaf {
                if let Some(n) = name {
                    out.by_name.insert(n.clone(), i);
                }
                out.by_node.insert(i, g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        // Named leaves the loss never reached still resolve by name (to None).
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Leaf::Variable(Some(n)) = &node.leaf {
                out.by_name.entry(n.clone()).or_insert(i);
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.needs(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g * *c),
            Op::Relu(x) => {
                let mut gx = g.clone();
                Zip::from(&mut gx)
                    .and(self.value(*x))
                    .for_each(|a, &v| {
                        if v <= 0.0 {
                            *a = 0.0
                        }
                    });
                self.acc(grads, *x, gx);
            }
            Op::Exp(x) => self.acc(grads, *x, g * &node.value),
            Op::Log(x) => self.acc(grads, *x, g / self.value(*x)),
            Op::SegmentMax { x, argmax } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Array2::zeros((rows, cols));
                for (flat, &r) in argmax.iter().enumerate() {
                    let (s, c) = (flat / cols, flat % cols);
                    gx[[r, c]] += g[[s, c]];
                }
                self.acc(grads, *x, gx);
            }
            Op::RowMax { x, argmax } => {
                let mut gx = Array2::zeros(self.shape(*x));
                for (r, &c) in argmax.iter().enumerate() {
                    gx[[r, c]] = g[[r, 0]];
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.needs(p) {
                        self.acc(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let mut gx = Array2::zeros(self.shape(*x));
                let w = g.ncols();
                gx.slice_mut(s![.., *start..*start + w]).assign(g);
                self.acc(grads, *x, gx);
            }
            Op::Gather { x, idx } => {
                let mut gx = Array2::zeros(self.shape(*x));
                for (r, &src) in idx.iter().enumerate() {
                    gx.row_mut(src).scaled_add(1.0, &g.row(r));
                }
                self.acc(grads, *x, gx);
            }
            Op::Scatter { x, idx, weights } => {
                let mut gx = Array2::zeros(self.shape(*x));
                for (r, &dst) in idx.iter().enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[r]);
                    gx.row_mut(r).scaled_add(w, &g.row(dst));
                }
                self.acc(grads, *x, gx);
            }
            Op::Mean(parts) => {
                let gm = g / parts.len() as f64;
                for &p in parts {
                    self.acc(grads, p, gm.clone());
                }
            }
            Op::RowNormalize(x) => {
                let y = &node.value;
                let sums = self.value(*x).sum_axis(Axis(1));
                let dots = (g * y).sum_axis(Axis(1));
                let mut gx = g.clone();
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|a| (a - dots[r]) / sums[r]);
                }
                self.acc(grads, *x, gx);
            }
            Op::RowBlockLinear {
                x,
                mats,
                row_mat,
                transpose,
            } => {
                self.acc(grads, *x, block_apply(g, mats, row_mat, !transpose));
            }
            Op::Sum(x) => self.acc(grads, *x, Array2::from_elem(self.shape(*x), g[[0, 0]])),
            Op::AbsSum(x) => {
                let s = g[[0, 0]];
                let gx = self.value(*x).mapv(|a| {
                    if a > 0.0 {
                        s
                    } else if a < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *x, gx);
            }
            Op::SqSum(x) => self.acc(grads, *x, self.value(*x) * (2.0 * g[[0, 0]])),
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let gsum = g.sum_axis(Axis(1));
                let mut gx = g.clone();
                Zip::indexed(&mut gx).and(y).for_each(|(r, _), a, &yv| {
                    *a -= yv.exp() * gsum[r];
                });
                self.acc(grads, *x, gx);
            }
            Op::Pick { x, cols } => {
                let mut gx = Array2::zeros(self.shape(*x));
                for (r, &c) in cols.iter().enumerate() {
                    gx[[r, c]] = g[[r, 0]];
                }
                self.acc(grads, *x, gx);
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&p| self.value(p)).collect();
                let gs = rule.backward(&vals, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return invalid(format!(
                        "custom backward returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    ));
                }
                for (k, (gp, &p)) in gs.into_iter().zip(inputs).enumerate() {
                    if gp.dim() != self.shape(p) {
                        return invalid(format!(
                            "custom backward gradient {k} has shape {:?}, input has {:?}",
                            gp.dim(),
                            self.shape(p)
                        ));
                    }
                    self.acc(grads, p, gp);
                }
            }
        }
        Ok(())
    }
}

fn block_apply(x: &Tensor, mats: &[Tensor], row_mat: &[usize], transpose: bool) -> Tensor {
    let d = mats[0].nrows();
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        let m = &mats[row_mat[r]];
        for blk in 0..cols / d {
            let base = blk * d;
            for c in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    let mv = if transpose { m[[c, k]] } else { m[[k, c]] };
                    acc += x[[r, base + k]] * mv;
                }
                out[[r, base + c]] = acc;
            }
        }
    }
    out
}
