//! Tape-based reverse-mode differentiation over dense row-major arrays.
//!
//! Every recorded value is a `rows × cols` array (scalars are `1 × 1`,
//! vectors `n × 1`). Operations are appended to a [`Tape`] in evaluation
//! order, which is therefore a topological order; [`Tape::backward`] walks it
//! in reverse. The primitive set is small and shaped after what the unrolled
//! reconstruction needs: vector algebra, fixed sparse products, node-wise
//! dense layers, and graph gather/scatter/softmax operations.
//!
//! ```
//! use pdeinvreg::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(vec![3.0], 1, 1);
//! let y = tape.hadamard(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x), &[6.0]);
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::{dot, MatrixOperator};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// Source/target index arrays of a directed graph grouped by source node.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub num_nodes: usize,
    /// Edges `offsets[i]..offsets[i+1]` start at node `i`.
    pub offsets: Vec<usize>,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

impl EdgeIndex {
    pub fn from_graph(graph: &crate::mesh::Graph) -> Self {
        Self {
            num_nodes: graph.num_nodes(),
            offsets: graph.offsets().to_vec(),
            sources: graph.edge_sources().to_vec(),
            targets: graph.edge_targets().to_vec(),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    /// `a·x + b` with constants.
    Affine(usize, f64, f64),
    Hadamard(usize, usize),
    /// `a·x + b·y` with constants.
    LinComb(f64, usize, f64, usize),
    /// `x (1 − x²)`.
    Cubic(usize),
    Dot(usize, usize),
    /// `y + α x` with scalar `α`.
    Axpy { alpha: usize, x: usize, y: usize },
    /// `x / s` with scalar `s`.
    DivScalar(usize, usize),
    ConstSpmv { op: MatrixOperator, x: usize },
    ConcatCols(Vec<usize>),
    Slice { x: usize, start: usize },
    Tanh(usize),
    Relu(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Exp(usize),
    Sum(usize),
    /// Node-wise dense layer `X W + b`.
    Linear { x: usize, w: usize, b: Option<usize> },
    RowSum(usize),
    ScaleRows { x: usize, w: usize },
    ScaleCols { x: usize, w: usize },
    EdgeGather { x: usize, index: Arc<Vec<usize>> },
    NodeScatterSum { x: usize, index: Arc<Vec<usize>> },
    SoftmaxGroups { x: usize, graph: Arc<EdgeIndex> },
    /// `out_i = Σ_{k ∈ edges(i)} w_k x_{target(k)}`.
    EdgeWeightedSum { w: usize, x: usize, graph: Arc<EdgeIndex> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Append-only record of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `var`; leaves the loss does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> &[f64] {
        match &self.grads[var.id] {
            Some(g) => g,
            None => &ZEROS[..0],
        }
    }

    /// Owned gradient, zero-filled when the loss does not depend on `var`.
    pub fn wrt_owned(&self, var: Var) -> Vec<f64> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[var.id]])
    }
}

static ZEROS: [f64; 0] = [];

fn shape_err(context: &'static str, expected: usize, found: usize) -> Error {
    Error::DimensionMismatch {
        context,
        expected,
        found,
    }
}

fn same_shape(context: &'static str, a: Var, b: Var) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(shape_err(context, a.len(), b.len()));
    }
    Ok(())
}

fn scalar(context: &'static str, v: Var) -> Result<()> {
    if !v.is_scalar() {
        return Err(shape_err(context, 1, v.len()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.id].value[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> Result<Var> {
        let value = self.eval(&op, rows, cols)?;
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node { op, rows, cols, value });
        Ok(Var { id, rows, cols })
    }

    fn push_value(&mut self, op: Op, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "value length does not match shape");
        let id = self.nodes.len();
        self.nodes.push(Node { op, rows, cols, value });
        Var { id, rows, cols }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push_value(Op::Leaf, value, rows, cols)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push_value(Op::Constant, value, rows, cols)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", a, b)?;
        self.push(Op::Add(a.id, b.id), a.rows, a.cols)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", a, b)?;
        self.push(Op::Sub(a.id, b.id), a.rows, a.cols)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.push(Op::Affine(x.id, scale, shift), x.rows, x.cols)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("hadamard", a, b)?;
        self.push(Op::Hadamard(a.id, b.id), a.rows, a.cols)
    }

    /// `a·x + b·y` for constant `a`, `b`.
    pub fn lincomb(&mut self, a: f64, x: Var, b: f64, y: Var) -> Result<Var> {
        same_shape("lincomb", x, y)?;
        self.push(Op::LinComb(a, x.id, b, y.id), x.rows, x.cols)
    }

    /// Elementwise double-well reaction `x (1 − x²)`.
    pub fn cubic(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Cubic(x.id), x.rows, x.cols)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("dot", a, b)?;
        self.push(Op::Dot(a.id, b.id), 1, 1)
    }

    /// `y + alpha·x` with scalar `alpha`.
    pub fn axpy(&mut self, alpha: Var, x: Var, y: Var) -> Result<Var> {
        scalar("axpy coefficient", alpha)?;
        same_shape("axpy", x, y)?;
        self.push(
            Op::Axpy {
                alpha: alpha.id,
                x: x.id,
                y: y.id,
            },
            x.rows,
            x.cols,
        )
    }

    /// `x / s` with scalar `s`; zero divisors are rejected.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        scalar("div_scalar divisor", s)?;
        if self.scalar_value(s) == 0.0 {
            return Err(Error::InvalidArgument("division by zero in div_scalar".into()));
        }
        self.push(Op::DivScalar(x.id, s.id), x.rows, x.cols)
    }

    /// Product of a fixed sparse matrix with a recorded vector.
    pub fn const_spmv(&mut self, op: &MatrixOperator, x: Var) -> Result<Var> {
        let m = op.matrix();
        if x.cols != 1 || x.rows != m.cols() {
            return Err(shape_err("const_spmv input", m.cols(), x.len()));
        }
        let rows = m.rows();
        self.push(Op::ConstSpmv { op: op.clone(), x: x.id }, rows, 1)
    }

    /// Column-wise concatenation of arrays with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?
            .rows;
        for p in parts {
            if p.rows != rows {
                return Err(shape_err("concat rows", rows, p.rows));
            }
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rows, cols)
    }

    /// Contiguous flat slice reshaped to `rows × cols`.
    pub fn slice(&mut self, x: Var, start: usize, rows: usize, cols: usize) -> Result<Var> {
        if start + rows * cols > x.len() {
            return Err(shape_err("slice", x.len(), start + rows * cols));
        }
        self.push(Op::Slice { x: x.id, start }, rows, cols)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x.id), x.rows, x.cols)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x.id), x.rows, x.cols)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient vanishes outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp range [{lo}, {hi}] is empty")));
        }
        self.push(Op::Clamp { x: x.id, lo, hi }, x.rows, x.cols)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x.id), x.rows, x.cols)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x.id), 1, 1)
    }

    /// `X W (+ b)` for `X: n × in`, `W: in × out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        if w.rows != x.cols {
            return Err(shape_err("linear inner dimension", x.cols, w.rows));
        }
        if let Some(b) = b {
            if b.len() != w.cols {
                return Err(shape_err("linear bias", w.cols, b.len()));
            }
        }
        self.push(
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            x.rows,
            w.cols,
        )
    }

    /// Per-row sums, `r × c → r × 1`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::RowSum(x.id), x.rows, 1)
    }

    /// Multiplies row `i` by `w_i`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        if w.len() != x.rows {
            return Err(shape_err("scale_rows weights", x.rows, w.len()));
        }
        self.push(Op::ScaleRows { x: x.id, w: w.id }, x.rows, x.cols)
    }

    /// Multiplies column `j` by `w_j`.
    pub fn scale_cols(&mut self, x: Var, w: Var) -> Result<Var> {
        if w.len() != x.cols {
            return Err(shape_err("scale_cols weights", x.cols, w.len()));
        }
        self.push(Op::ScaleCols { x: x.id, w: w.id }, x.rows, x.cols)
    }

    /// Row `k` of the output is row `index[k]` of `x`.
    pub fn edge_gather(&mut self, x: Var, index: &Arc<Vec<usize>>) -> Result<Var> {
        if let Some(&bad) = index.iter().find(|&&i| i >= x.rows) {
            return Err(shape_err("edge_gather index", x.rows, bad));
        }
        let rows = index.len();
        self.push(
            Op::EdgeGather {
                x: x.id,
                index: Arc::clone(index),
            },
            rows,
            x.cols,
        )
    }

    /// Row `index[k]` of the output accumulates row `k` of `x`.
    pub fn node_scatter_sum(&mut self, x: Var, index: &Arc<Vec<usize>>, num_nodes: usize) -> Result<Var> {
        if index.len() != x.rows {
            return Err(shape_err("node_scatter_sum index", x.rows, index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= num_nodes) {
            return Err(shape_err("node_scatter_sum target", num_nodes, bad));
        }
        self.push(
            Op::NodeScatterSum {
                x: x.id,
                index: Arc::clone(index),
            },
            num_nodes,
            x.cols,
        )
    }

    /// Softmax of per-edge scores within each source node's edge group.
    pub fn softmax_per_neighborhood(&mut self, scores: Var, graph: &Arc<EdgeIndex>) -> Result<Var> {
        if scores.len() != graph.num_edges() {
            return Err(shape_err("softmax scores", graph.num_edges(), scores.len()));
        }
        self.push(
            Op::SoftmaxGroups {
                x: scores.id,
                graph: Arc::clone(graph),
            },
            graph.num_edges(),
            1,
        )
    }

    /// Edge-weighted neighbour aggregation `out_i = Σ_k w_k x_{target(k)}`
    /// over the edges `k` leaving `i`; the fused form of gather, row scaling
    /// and scatter.
    pub fn edge_weighted_sum(&mut self, weights: Var, x: Var, graph: &Arc<EdgeIndex>) -> Result<Var> {
        if weights.len() != graph.num_edges() {
            return Err(shape_err("edge weights", graph.num_edges(), weights.len()));
        }
        if x.rows != graph.num_nodes {
            return Err(shape_err("edge_weighted_sum features", graph.num_nodes, x.rows));
        }
        self.push(
            Op::EdgeWeightedSum {
                w: weights.id,
                x: x.id,
                graph: Arc::clone(graph),
            },
            x.rows,
            x.cols,
        )
    }

    fn val(&self, id: usize) -> &[f64] {
        &self.nodes[id].value
    }

    fn eval(&self, op: &Op, rows: usize, cols: usize) -> Result<Vec<f64>> {
        self.eval_with(op, rows, cols, &|id| self.val(id))
    }

    fn eval_with<'a>(
        &'a self,
        op: &Op,
        rows: usize,
        cols: usize,
        val: &dyn Fn(usize) -> &'a [f64],
    ) -> Result<Vec<f64>> {
        let unary = |x: usize, f: &dyn Fn(f64) -> f64| val(x).iter().map(|&v| f(v)).collect::<Vec<f64>>();
        Ok(match op {
            Op::Leaf | Op::Constant => unreachable!("inputs are not evaluated"),
            Op::Add(a, b) => val(*a).iter().zip(val(*b)).map(|(x, y)| x + y).collect(),
            Op::Sub(a, b) => val(*a).iter().zip(val(*b)).map(|(x, y)| x - y).collect(),
            Op::Affine(x, s, t) => {
                let (s, t) = (*s, *t);
                if t == 0.0 {
                    unary(*x, &|v| s * v)
                } else {
                    unary(*x, &|v| s * v + t)
                }
            }
            Op::Hadamard(a, b) => val(*a).iter().zip(val(*b)).map(|(x, y)| x * y).collect(),
            Op::LinComb(a, x, b, y) => val(*x).iter().zip(val(*y)).map(|(u, v)| a * u + b * v).collect(),
            Op::Cubic(x) => unary(*x, &|v| v * (1.0 - v * v)),
            Op::Dot(a, b) => vec![dot(val(*a), val(*b))],
            Op::Axpy { alpha, x, y } => {
                let a = val(*alpha)[0];
                val(*y).iter().zip(val(*x)).map(|(yi, xi)| yi + a * xi).collect()
            }
            Op::DivScalar(x, s) => {
                let s = val(*s)[0];
                unary(*x, &|v| v / s)
            }
            Op::ConstSpmv { op, x } => op.matrix().spmv(val(*x))?,
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(rows * cols);
                let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].cols).collect();
                for i in 0..rows {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        out.extend_from_slice(&val(p)[i * w..(i + 1) * w]);
                    }
                }
                out
            }
            Op::Slice { x, start } => val(*x)[*start..*start + rows * cols].to_vec(),
            Op::Tanh(x) => unary(*x, &f64::tanh),
            Op::Relu(x) => unary(*x, &|v| v.max(0.0)),
            Op::Clamp { x, lo, hi } => unary(*x, &|v| v.clamp(*lo, *hi)),
            Op::Exp(x) => unary(*x, &f64::exp),
            Op::Sum(x) => vec![val(*x).iter().sum()],
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let inner = self.nodes[*x].cols;
                let mut out = vec![0.0; rows * cols];
                for i in 0..rows {
                    let row = &mut out[i * cols..(i + 1) * cols];
                    if let Some(b) = b {
                        row.copy_from_slice(val(*b));
                    }
                    for k in 0..inner {
                        let xik = xv[i * inner + k];
                        for (o, wkj) in row.iter_mut().zip(&wv[k * cols..(k + 1) * cols]) {
                            *o += xik * wkj;
                        }
                    }
                }
                out
            }
            Op::RowSum(x) => {
                let c = self.nodes[*x].cols;
                val(*x).chunks(c).map(|r| r.iter().sum()).collect()
            }
            Op::ScaleRows { x, w } => {
                let wv = val(*w);
                val(*x)
                    .chunks(cols)
                    .zip(wv)
                    .flat_map(|(r, &s)| r.iter().map(move |v| v * s))
                    .collect()
            }
            Op::ScaleCols { x, w } => {
                let wv = val(*w);
                val(*x)
                    .chunks(cols)
                    .flat_map(|r| r.iter().zip(wv).map(|(v, s)| v * s))
                    .collect()
            }
            Op::EdgeGather { x, index } => {
                let xv = val(*x);
                let mut out = Vec::with_capacity(rows * cols);
                for &i in index.iter() {
                    out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
                }
                out
            }
            Op::NodeScatterSum { x, index, .. } => {
                let xv = val(*x);
                let mut out = vec![0.0; rows * cols];
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        out[i * cols + c] += xv[k * cols + c];
                    }
                }
                out
            }
            Op::SoftmaxGroups { x, graph } => {
                let xv = val(*x);
                let mut out = vec![0.0; rows];
                for i in 0..graph.num_nodes {
                    let range = graph.offsets[i]..graph.offsets[i + 1];
                    if range.is_empty() {
                        continue;
                    }
                    let m = xv[range.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in range.clone() {
                        out[k] = (xv[k] - m).exp();
                        total += out[k];
                    }
                    for k in range {
                        out[k] /= total;
                    }
                }
                out
            }
            Op::EdgeWeightedSum { w, x, graph } => {
                let (wv, xv) = (val(*w), val(*x));
                let mut out = vec![0.0; rows * cols];
                for i in 0..graph.num_nodes {
                    let row = &mut out[i * cols..(i + 1) * cols];
                    for k in graph.offsets[i]..graph.offsets[i + 1] {
                        let j = graph.targets[k];
                        let wk = wv[k];
                        for (o, xj) in row.iter_mut().zip(&xv[j * cols..(j + 1) * cols]) {
                            *o += wk * xj;
                        }
                    }
                }
                out
            }
        })
    }

    /// Re-evaluates every recorded operation from the stored inputs and
    /// returns the recomputed values.
    pub fn replay(&self) -> Result<Vec<Vec<f64>>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                _ => {
                    let snapshot = &values;
                    self.eval_with(&node.op, node.rows, node.cols, &|id| snapshot[id].as_slice())?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when [`Tape::replay`] reproduces every cached value bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(self
            .nodes
            .iter()
            .zip(&replayed)
            .all(|(n, r)| n.value.len() == r.len() && n.value.iter().zip(r).all(|(a, b)| a.to_bits() == b.to_bits())))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        // constants never report gradients
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Constant) {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; len])
        }
        let len = |id: usize| self.nodes[id].value.len();
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for (o, gi) in acc(grads, *a, len(*a)).iter_mut().zip(g) {
                    *o += gi;
                }
                for (o, gi) in acc(grads, *b, len(*b)).iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Sub(a, b) => {
                for (o, gi) in acc(grads, *a, len(*a)).iter_mut().zip(g) {
                    *o += gi;
                }
                for (o, gi) in acc(grads, *b, len(*b)).iter_mut().zip(g) {
                    *o -= gi;
                }
            }
            Op::Affine(x, s, _) => {
                for (o, gi) in acc(grads, *x, len(*x)).iter_mut().zip(g) {
                    *o += s * gi;
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                for ((o, gi), bi) in acc(grads, *a, len(*a)).iter_mut().zip(g).zip(bv) {
                    *o += gi * bi;
                }
                for ((o, gi), ai) in acc(grads, *b, len(*b)).iter_mut().zip(g).zip(av) {
                    *o += gi * ai;
                }
            }
            Op::LinComb(a, x, b, y) => {
                for (o, gi) in acc(grads, *x, len(*x)).iter_mut().zip(g) {
                    *o += a * gi;
                }
                for (o, gi) in acc(grads, *y, len(*y)).iter_mut().zip(g) {
                    *o += b * gi;
                }
            }
            Op::Cubic(x) => {
                let xv = self.val(*x);
                for ((o, gi), v) in acc(grads, *x, len(*x)).iter_mut().zip(g).zip(xv) {
                    *o += gi * (1.0 - 3.0 * v * v);
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                for (o, bi) in acc(grads, *a, len(*a)).iter_mut().zip(bv) {
                    *o += g[0] * bi;
                }
                for (o, ai) in acc(grads, *b, len(*b)).iter_mut().zip(av) {
                    *o += g[0] * ai;
                }
            }
            Op::Axpy { alpha, x, y } => {
                let a = self.val(*alpha)[0];
                let xv = self.val(*x);
                let ga: f64 = dot(g, xv);
                acc(grads, *alpha, 1)[0] += ga;
                for (o, gi) in acc(grads, *x, len(*x)).iter_mut().zip(g) {
                    *o += a * gi;
                }
                for (o, gi) in acc(grads, *y, len(*y)).iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::DivScalar(x, s) => {
                let sv = self.val(*s)[0];
                let out = &node.value;
                let gs = -dot(g, out) / sv;
                for (o, gi) in acc(grads, *x, len(*x)).iter_mut().zip(g) {
                    *o += gi / sv;
                }
                acc(grads, *s, 1)[0] += gs;
            }
            Op::ConstSpmv { op, x } => {
                let back = op.adjoint_matrix().spmv(g).expect("shapes checked at record time");
                for (o, b) in acc(grads, *x, len(*x)).iter_mut().zip(&back) {
                    *o += b;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].cols;
                    let target = acc(grads, p, len(p));
                    for i in 0..rows {
                        for c in 0..w {
                            target[i * w + c] += g[i * cols + offset + c];
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let target = acc(grads, *x, len(*x));
                for (o, gi) in target[*start..*start + g.len()].iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Tanh(x) => {
                let out = &node.value;
                for ((o, gi), y) in acc(grads, *x, len(*x)).iter_mut().zip(g).zip(out) {
                    *o += gi * (1.0 - y * y);
                }
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                for ((o, gi), xi) in acc(grads, *x, len(*x)).iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.val(*x);
                for ((o, gi), xi) in acc(grads, *x, len(*x)).iter_mut().zip(g).zip(xv) {
                    if *xi > *lo && *xi < *hi {
                        *o += gi;
                    }
                }
            }
            Op::Exp(x) => {
                let out = &node.value;
                for ((o, gi), y) in acc(grads, *x, len(*x)).iter_mut().zip(g).zip(out) {
                    *o += gi * y;
                }
            }
            Op::Sum(x) => {
                for o in acc(grads, *x, len(*x)).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Linear { x, w, b } => {
                let inner = self.nodes[*x].cols;
                let (xv, wv) = (self.val(*x), self.val(*w));
                {
                    let gx = acc(grads, *x, len(*x));
                    for i in 0..rows {
                        let gi = &g[i * cols..(i + 1) * cols];
                        for k in 0..inner {
                            gx[i * inner + k] += dot(gi, &wv[k * cols..(k + 1) * cols]);
                        }
                    }
                }
                {
                    let gw = acc(grads, *w, len(*w));
                    for i in 0..rows {
                        let gi = &g[i * cols..(i + 1) * cols];
                        for k in 0..inner {
                            let xik = xv[i * inner + k];
                            for (o, gij) in gw[k * cols..(k + 1) * cols].iter_mut().zip(gi) {
                                *o += xik * gij;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let gb = acc(grads, *b, cols);
                    for i in 0..rows {
                        for (o, gij) in gb.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                            *o += gij;
                        }
                    }
                }
            }
            Op::RowSum(x) => {
                let c = self.nodes[*x].cols;
                let target = acc(grads, *x, len(*x));
                for (i, gi) in g.iter().enumerate() {
                    for o in &mut target[i * c..(i + 1) * c] {
                        *o += gi;
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                {
                    let gx = acc(grads, *x, len(*x));
                    for i in 0..rows {
                        for c in 0..cols {
                            gx[i * cols + c] += g[i * cols + c] * wv[i];
                        }
                    }
                }
                let gw = acc(grads, *w, len(*w));
                for i in 0..rows {
                    gw[i] += dot(&g[i * cols..(i + 1) * cols], &xv[i * cols..(i + 1) * cols]);
                }
            }
            Op::ScaleCols { x, w } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                {
                    let gx = acc(grads, *x, len(*x));
                    for i in 0..rows {
                        for c in 0..cols {
                            gx[i * cols + c] += g[i * cols + c] * wv[c];
                        }
                    }
                }
                let gw = acc(grads, *w, len(*w));
                for i in 0..rows {
                    for c in 0..cols {
                        gw[c] += g[i * cols + c] * xv[i * cols + c];
                    }
                }
            }
            Op::EdgeGather { x, index } => {
                let target = acc(grads, *x, len(*x));
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        target[i * cols + c] += g[k * cols + c];
                    }
                }
            }
            Op::NodeScatterSum { x, index, .. } => {
                let target = acc(grads, *x, len(*x));
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        target[k * cols + c] += g[i * cols + c];
                    }
                }
            }
            Op::SoftmaxGroups { x, graph } => {
                let out = &node.value;
                let target = acc(grads, *x, len(*x));
                for i in 0..graph.num_nodes {
                    let range = graph.offsets[i]..graph.offsets[i + 1];
                    let inner: f64 = range.clone().map(|k| g[k] * out[k]).sum();
                    for k in range {
                        target[k] += out[k] * (g[k] - inner);
                    }
                }
            }
            Op::EdgeWeightedSum { w, x, graph } => {
                let (wv, xv) = (self.val(*w), self.val(*x));
                {
                    let gw = acc(grads, *w, len(*w));
                    for i in 0..graph.num_nodes {
                        let gi = &g[i * cols..(i + 1) * cols];
                        for k in graph.offsets[i]..graph.offsets[i + 1] {
                            let j = graph.targets[k];
                            gw[k] += dot(gi, &xv[j * cols..(j + 1) * cols]);
                        }
                    }
                }
                let gx = acc(grads, *x, len(*x));
                for i in 0..graph.num_nodes {
                    for k in graph.offsets[i]..graph.offsets[i + 1] {
                        let j = graph.targets[k];
                        let wk = wv[k];
                        for c in 0..cols {
                            gx[j * cols + c] += wk * g[i * cols + c];
                        }
                    }
                }
            }
        }
    }
}

/// Outcome of a recorded CGLS run.
#[derive(Clone, Copy, Debug)]
pub struct RecordedCgls {
    pub x: Var,
    pub breakdown: bool,
    pub iterations: usize,
}

/// Records up to `iters` CGLS iterations for `min ‖A x − y‖²` from `x0`, using the
/// same arithmetic as [`crate::sparse::cgls`] on a [`MatrixOperator`], so the
/// recorded result is bit-identical to the plain solver.
pub fn cgls_recorded(tape: &mut Tape, op: &MatrixOperator, y: Var, x0: Var, iters: usize) -> Result<RecordedCgls> {
    if iters == 0 {
        return Err(Error::InvalidArgument("cgls needs at least one iteration".into()));
    }
    let adjoint = op.adjoint();
    let ax = tape.const_spmv(op, x0)?;
    let mut r = tape.sub(y, ax)?;
    let mut s = tape.const_spmv(&adjoint, r)?;
    let mut p = s;
    let mut gamma = tape.dot(s, s)?;
    let stop = tape.scalar_value(gamma) * crate::sparse::CGLS_CONVERGED;
    let mut x = x0;
    let mut breakdown = false;
    let mut done = 0;
    for _ in 0..iters {
        if tape.scalar_value(gamma) <= stop {
            break;
        }
        let q = tape.const_spmv(op, p)?;
        let delta = tape.dot(q, q)?;
        let dv = tape.scalar_value(delta);
        if dv <= 0.0 || !dv.is_finite() {
            breakdown = true;
            break;
        }
        let alpha = tape.div_scalar(gamma, delta)?;
        x = tape.axpy(alpha, p, x)?;
        let neg_alpha = tape.scale(alpha, -1.0)?;
        r = tape.axpy(neg_alpha, q, r)?;
        s = tape.const_spmv(&adjoint, r)?;
        let gamma_new = tape.dot(s, s)?;
        let beta = tape.div_scalar(gamma_new, gamma)?;
        p = tape.axpy(beta, p, s)?;
        gamma = gamma_new;
        done += 1;
    }
    Ok(RecordedCgls {
        x,
        breakdown,
        iterations: done,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        crate::error::check_dim("adam parameters", self.m.len(), params.len())?;
        crate::error::check_dim("adam gradients", self.m.len(), grads.len())?;
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{cgls, CsrMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central differences of `f` at `x` with step `h`.
    fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0], 1, 1);
        let y = t.hadamard(x, x).unwrap();
        assert_eq!(t.backward(y).unwrap().wrt(x), &[6.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut t = Tape::new();
        let v = vec![1.0, -2.0, 0.5];
        let x = t.leaf(v.clone(), 3, 1);
        let l = t.dot(x, x).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], 2, 1);
        let b = t.leaf(vec![5.0, 6.0], 2, 1);
        let l = t.dot(a, a).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt_owned(b), vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_non_scalar_loss_and_bad_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], 2, 1);
        let b = t.leaf(vec![1.0, 2.0, 3.0], 3, 1);
        assert!(t.backward(a).is_err());
        assert!(matches!(t.add(a, b), Err(Error::DimensionMismatch { .. })));
        let z = t.constant(vec![0.0], 1, 1);
        assert!(t.div_scalar(a, z).is_err());
    }

    #[test]
    fn const_spmv_gradient_is_transpose_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = rand_vec(&mut rng, 4 * 6);
        let a = CsrMatrix::from_dense(4, 6, &d).unwrap();
        let op = MatrixOperator::new(a);
        let v = rand_vec(&mut rng, 6);
        let w = rand_vec(&mut rng, 4);
        let mut t = Tape::new();
        let x = t.leaf(v, 6, 1);
        let wv = t.constant(w.clone(), 4, 1);
        let av = t.const_spmv(&op, x).unwrap();
        let l = t.dot(wv, av).unwrap();
        let g = t.backward(l).unwrap();
        // dense transpose oracle
        let oracle: Vec<f64> = (0..6).map(|j| (0..4).map(|i| d[i * 6 + j] * w[i]).sum()).collect();
        for (a, b) in g.wrt(x).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_softmax_is_one_with_zero_gradient() {
        let graph = Arc::new(EdgeIndex {
            num_nodes: 2,
            offsets: vec![0, 1, 2],
            sources: vec![0, 1],
            targets: vec![1, 0],
        });
        let mut t = Tape::new();
        let s = t.leaf(vec![0.3, -4.0], 2, 1);
        let a = t.softmax_per_neighborhood(s, &graph).unwrap();
        assert_eq!(t.value(a), &[1.0, 1.0]);
        let c = t.constant(vec![2.0, 7.0], 2, 1);
        let l = t.dot(a, c).unwrap();
        assert_eq!(t.backward(l).unwrap().wrt(s), &[0.0, 0.0]);
    }

    fn small_graph() -> Arc<EdgeIndex> {
        // path 0-1-2 plus edge 1-3
        let g = crate::mesh::Graph::from_edges(4, &[(0, 1), (1, 2), (1, 3)]).unwrap();
        Arc::new(EdgeIndex::from_graph(&g))
    }

    /// A program touching every primitive, as a function of a flat input.
    fn composite(t: &mut Tape, input: &[f64]) -> (Var, Var) {
        let graph = small_graph();
        let op = MatrixOperator::new(
            CsrMatrix::from_dense(3, 4, &[1.0, 0.5, 0.0, -1.0, 0.0, 2.0, 1.0, 0.0, 0.3, 0.0, 0.0, 1.0]).unwrap(),
        );
        let x = t.leaf(input.to_vec(), input.len(), 1);
        let feats = t.slice(x, 0, 4, 2).unwrap();
        let w = t.slice(x, 8, 2, 3).unwrap();
        let b = t.slice(x, 14, 3, 1).unwrap();
        let h = t.linear(feats, w, Some(b)).unwrap();
        let h = t.tanh(h).unwrap();
        let e = t.edge_gather(h, &Arc::new(graph.sources.clone())).unwrap();
        let f = t.edge_gather(h, &Arc::new(graph.targets.clone())).unwrap();
        let ef = t.hadamard(e, f).unwrap();
        let scores = t.row_sum(ef).unwrap();
        let att = t.softmax_per_neighborhood(scores, &graph).unwrap();
        let mixed = t.edge_weighted_sum(att, h, &graph).unwrap();
        let scaled = t.scale_rows(e, att).unwrap();
        let scattered = t.node_scatter_sum(scaled, &Arc::new(graph.targets.clone()), 4).unwrap();
        let chan = t.slice(x, 17, 3, 1).unwrap();
        let mixed = t.scale_cols(mixed, chan).unwrap();
        let both = t.concat_cols(&[mixed, scattered]).unwrap();
        let relu = t.relu(both).unwrap();
        let shifted = t.affine(relu, 0.5, -0.25).unwrap();
        let shifted = t.clamp(shifted, -0.2, 0.3).unwrap();
        let ex = t.exp(shifted).unwrap();
        let cu = t.cubic(ex).unwrap();
        let ex = t.lincomb(0.7, ex, -0.2, cu).unwrap();
        let col = t.slice(ex, 0, 4, 1).unwrap();
        let ax = t.const_spmv(&op, col).unwrap();
        let s0 = t.slice(x, 20, 1, 1).unwrap();
        let s1 = t.dot(ax, ax).unwrap();
        let s1 = t.affine(s1, 1.0, 1.0).unwrap();
        let ratio = t.div_scalar(ax, s1).unwrap();
        let ones = t.constant(vec![1.0; 3], 3, 1);
        let z = t.axpy(s0, ratio, ones).unwrap();
        let d = t.sub(z, ax).unwrap();
        let d = t.add(d, ratio).unwrap();
        let l1 = t.dot(d, d).unwrap();
        let l2 = t.sum(ex).unwrap();
        let l2 = t.scale(l2, 0.01).unwrap();
        (x, t.add(l1, l2).unwrap())
    }

    #[test]
    fn composite_program_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let input = rand_vec(&mut rng, 21);
            let mut t = Tape::new();
            let (x, loss) = composite(&mut t, &input);
            let g = t.backward(loss).unwrap().wrt_owned(x);
            let f = |v: &[f64]| {
                let mut t = Tape::new();
                let (_, l) = composite(&mut t, v);
                t.scalar_value(l)
            };
            let fd = fd_gradient(&f, &input, 1e-6);
            assert!(rel_err(&g, &fd) < 1e-4, "rel err {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        composite(&mut t, &rand_vec(&mut rng, 21));
        assert!(t.replay_matches().unwrap());
    }

    #[test]
    fn recorded_cgls_is_bit_identical_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = rand_vec(&mut rng, 9 * 5);
        let op = MatrixOperator::new(CsrMatrix::from_dense(9, 5, &d).unwrap());
        let y = rand_vec(&mut rng, 9);
        let x0 = rand_vec(&mut rng, 5);
        let plain = cgls(&op, &y, &x0, 3).unwrap();
        let run = |x0: &[f64]| {
            let mut t = Tape::new();
            let yv = t.constant(y.clone(), 9, 1);
            let xv = t.leaf(x0.to_vec(), 5, 1);
            let res = cgls_recorded(&mut t, &op, yv, xv, 3).unwrap();
            let l = t.dot(res.x, res.x).unwrap();
            (t, xv, res, l)
        };
        let (t, xv, res, l) = run(&x0);
        assert_eq!(t.value(res.x), plain.x.as_slice());
        let g = t.backward(l).unwrap().wrt_owned(xv);
        let f = |v: &[f64]| {
            let (t, _, _, l) = run(v);
            t.scalar_value(l)
        };
        let fd = fd_gradient(&f, &x0, 1e-6);
        assert!(rel_err(&g, &fd) < 1e-6, "rel err {}", rel_err(&g, &fd));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = AdamState::new(2, 1e-3);
        let mut p = vec![1.0, -1.0];
        s.step(&mut p, &[0.5, 0.0]).unwrap();
        // m̂ = g, v̂ = g², so the update is −lr·g/(|g| + eps)
        assert!((p[0] - (1.0 - 1e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert_eq!(p[1], -1.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut s = AdamState::new(3, 1e-1);
        let mut p = vec![1.0, 2.0, 3.0];
        for _ in 0..50 {
            s.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = AdamState::new(1, 1e-1);
        let mut p = vec![1.0];
        for _ in 0..500 {
            let g = [2.0 * p[0]];
            s.step(&mut p, &g).unwrap();
        }
        assert!(p[0].abs() < 1e-3, "{}", p[0]);
    }
}
