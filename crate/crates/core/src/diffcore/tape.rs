//! Append-only reverse-mode differentiation tape over dense `f64`
//! matrices. Scalars are 1x1 matrices. Shape violations panic with the op
//! name and offending shapes; the graph is acyclic by construction since
//! nodes can only reference earlier nodes.

use super::ParamStore;
use ndarray::{s, Array2};
use std::cell::Cell;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a scalar (1x1) loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("node {node} references later node {parent}: cycle")]
    Cycle { node: usize, parent: usize },
    #[error("non-finite value in backward at node {node}")]
    NonFinite { node: usize },
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type CustomBackward = Rc<dyn Fn(&Array2<f64>, &Array2<f64>, &mut Array2<f64>)>;

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    AddBroadcastRow(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Affine { x: usize, w: usize, b: usize },
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Silu(usize),
    Square(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRow(usize),
    BroadcastCol(usize),
    ConcatCols(Vec<usize>),
    SliceCols { p: usize, start: usize },
    GatherRows { p: usize, indices: Vec<usize> },
    Clamp { p: usize, lo: f64, hi: f64 },
    Custom { p: usize, backward: CustomBackward },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_bindings: Vec<(String, NodeId)>,
    clamp_events: Cell<u64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of elements clamped by [`Tape::clamp`] since construction.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.get()
    }

    /// Roll the tape back to `len` nodes. Sessions that rebuild a graph
    /// per call truncate back to just after their parameter bindings
    /// instead of re-inserting the parameters.
    pub fn truncate(&mut self, len: usize) {
        assert!(
            len >= self.param_bindings.last().map_or(0, |(_, id)| id.0 + 1),
            "truncate would drop parameter bindings"
        );
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert!(
            v.dim() == (1, 1),
            "scalar: node is {}x{}, not 1x1",
            v.nrows(),
            v.ncols()
        );
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Differentiable input (gradients flow into it).
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Insert a named parameter from the store as a differentiable leaf;
    /// [`ParamStore::absorb_gradients`] later routes its gradient back.
    pub fn param(&mut self, name: &str, store: &ParamStore) -> NodeId {
        let id = self.leaf(store.value(name).clone());
        self.param_bindings.push((name.to_string(), id));
        id
    }

    pub fn param_bindings(&self) -> &[(String, NodeId)] {
        &self.param_bindings
    }

    fn binary_shape_check(&self, op: &str, a: NodeId, b: NodeId) {
        let (sa, sb) = (self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        assert!(
            sa == sb,
            "{op}: shape mismatch {}x{} vs {}x{}",
            sa.0,
            sa.1,
            sb.0,
            sb.1
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape_check("add", a, b);
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.requires(a.0) || self.requires(b.0);
        self.push(value, Op::Add(a.0, b.0), req)
    }

    /// `a + b` with `b` a 1xF row broadcast over the rows of `a`.
    pub fn add_broadcast_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        assert!(
            sb.0 == 1 && sa.1 == sb.1,
            "add_broadcast_row: {}x{} vs {}x{}",
            sa.0,
            sa.1,
            sb.0,
            sb.1
        );
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.requires(a.0) || self.requires(b.0);
        self.push(value, Op::AddBroadcastRow(a.0, b.0), req)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape_check("sub", a, b);
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let req = self.requires(a.0) || self.requires(b.0);
        self.push(value, Op::Sub(a.0, b.0), req)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| -v);
        let req = self.requires(a.0);
        self.push(value, Op::Neg(a.0), req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape_check("mul", a, b);
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let req = self.requires(a.0) || self.requires(b.0);
        self.push(value, Op::Mul(a.0, b.0), req)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let req = self.requires(a.0);
        self.push(value, Op::MulScalar(a.0, c), req)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        assert!(
            sa.1 == sb.0,
            "matmul: inner dimensions differ, {}x{} vs {}x{}",
            sa.0,
            sa.1,
            sb.0,
            sb.1
        );
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let req = self.requires(a.0) || self.requires(b.0);
        self.push(value, Op::Matmul(a.0, b.0), req)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.t().to_owned();
        let req = self.requires(a.0);
        self.push(value, Op::Transpose(a.0), req)
    }

    /// `x.dot(w) + b` with `b` a 1xF bias row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (sx, sw, sb) = (
            self.nodes[x.0].value.dim(),
            self.nodes[w.0].value.dim(),
            self.nodes[b.0].value.dim(),
        );
        assert!(
            sx.1 == sw.0 && sb.0 == 1 && sb.1 == sw.1,
            "affine: x {}x{}, w {}x{}, b {}x{}",
            sx.0,
            sx.1,
            sw.0,
            sw.1,
            sb.0,
            sb.1
        );
        let mut value = self.nodes[x.0].value.dot(&self.nodes[w.0].value);
        value += &self.nodes[b.0].value;
        let req = self.requires(x.0) || self.requires(w.0) || self.requires(b.0);
        self.push(value, Op::Affine { x: x.0, w: w.0, b: b.0 }, req)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let req = self.requires(a.0);
        self.push(value, Op::Exp(a.0), req)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        let req = self.requires(a.0);
        self.push(value, Op::Log(a.0), req)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        let req = self.requires(a.0);
        self.push(value, Op::Tanh(a.0), req)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        let req = self.requires(a.0);
        self.push(value, Op::Relu(a.0), req)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v / (1.0 + (-v).exp()));
        let req = self.requires(a.0);
        self.push(value, Op::Silu(a.0), req)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * v);
        let req = self.requires(a.0);
        self.push(value, Op::Square(a.0), req)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let req = self.requires(a.0);
        self.push(value, Op::SoftmaxRows(a.0), req)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let req = self.requires(a.0);
        self.push(value, Op::SumAll(a.0), req)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len() as f64;
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        let req = self.requires(a.0);
        self.push(value, Op::MeanAll(a.0), req)
    }

    /// Sum over rows: NxF -> 1xF.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let value = x
            .sum_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0));
        let req = self.requires(a.0);
        self.push(value, Op::SumRows(a.0), req)
    }

    /// Sum over columns: NxF -> Nx1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let value = x
            .sum_axis(ndarray::Axis(1))
            .insert_axis(ndarray::Axis(1));
        let req = self.requires(a.0);
        self.push(value, Op::SumCols(a.0), req)
    }

    /// Repeat a 1xF row `rows` times.
    pub fn broadcast_row(&mut self, a: NodeId, rows: usize) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert!(x.nrows() == 1, "broadcast_row: input is {}x{}", x.nrows(), x.ncols());
        let value = Array2::from_shape_fn((rows, x.ncols()), |(_, c)| x[[0, c]]);
        let req = self.requires(a.0);
        self.push(value, Op::BroadcastRow(a.0), req)
    }

    /// Repeat an Nx1 column `cols` times.
    pub fn broadcast_col(&mut self, a: NodeId, cols: usize) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert!(x.ncols() == 1, "broadcast_col: input is {}x{}", x.nrows(), x.ncols());
        let value = Array2::from_shape_fn((x.nrows(), cols), |(r, _)| x[[r, 0]]);
        let req = self.requires(a.0);
        self.push(value, Op::BroadcastCol(a.0), req)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut value = Array2::zeros((rows, total));
        let mut offset = 0;
        for p in parts {
            let x = &self.nodes[p.0].value;
            assert!(
                x.nrows() == rows,
                "concat_cols: row mismatch {} vs {}",
                x.nrows(),
                rows
            );
            value.slice_mut(s![.., offset..offset + x.ncols()]).assign(x);
            offset += x.ncols();
        }
        let req = parts.iter().any(|p| self.requires(p.0));
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), req)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert!(
            start < end && end <= x.ncols(),
            "slice_cols: range {start}..{end} out of 0..{}",
            x.ncols()
        );
        let value = x.slice(s![.., start..end]).to_owned();
        let req = self.requires(a.0);
        self.push(value, Op::SliceCols { p: a.0, start }, req)
    }

    /// Row lookup: out row i = table row indices[i]. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let t = &self.nodes[table.0].value;
        for &i in indices {
            assert!(i < t.nrows(), "gather_rows: index {i} out of {} rows", t.nrows());
        }
        let mut value = Array2::zeros((indices.len(), t.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&t.row(i));
        }
        let req = self.requires(table.0);
        self.push(
            value,
            Op::GatherRows { p: table.0, indices: indices.to_vec() },
            req,
        )
    }

    /// Elementwise clamp; clamped entries are counted and pass zero
    /// gradient.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut events = 0u64;
        let value = x.mapv(|v| {
            if v < lo || v > hi {
                events += 1;
                v.clamp(lo, hi)
            } else {
                v
            }
        });
        self.clamp_events.set(self.clamp_events.get() + events);
        let req = self.requires(a.0);
        self.push(value, Op::Clamp { p: a.0, lo, hi }, req)
    }

    /// A scalar-valued op with an externally supplied backward rule
    /// (used to splice analytic gradients, e.g. potential energies, into
    /// the graph). `backward(upstream, parent_value, parent_grad)` must
    /// accumulate into `parent_grad`.
    pub fn custom_unary(
        &mut self,
        parent: NodeId,
        value: Array2<f64>,
        backward: CustomBackward,
    ) -> NodeId {
        let req = self.requires(parent.0);
        self.push(value, Op::Custom { p: parent.0, backward }, req)
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients for
    /// every node that requires one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        let shape = self.nodes[loss.0].value.dim();
        if shape != (1, 1) {
            return Err(TapeError::NonScalarLoss { rows: shape.0, cols: shape.1 });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().expect("present");
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        grads: &mut [Option<Array2<f64>>],
        target: usize,
        shape: (usize, usize),
        update: impl FnOnce(&mut Array2<f64>),
    ) {
        let slot = grads[target].get_or_insert_with(|| Array2::zeros(shape));
        update(slot);
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Array2<f64>,
        grads: &mut Vec<Option<Array2<f64>>>,
    ) -> Result<(), TapeError> {
        let nodes = &self.nodes;
        let need = |p: usize| nodes[p].requires_grad;
        let shape_of = |p: usize| nodes[p].value.dim();
        match &nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if p >= idx {
                        return Err(TapeError::Cycle { node: idx, parent: p });
                    }
                    if need(p) {
                        Self::accumulate(grads, p, shape_of(p), |gp| *gp += g);
                    }
                }
            }
            Op::AddBroadcastRow(a, b) => {
                if need(*a) {
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += g);
                }
                if need(*b) {
                    let col_sum = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                    Self::accumulate(grads, *b, shape_of(*b), |gp| *gp += &col_sum);
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += g);
                }
                if need(*b) {
                    Self::accumulate(grads, *b, shape_of(*b), |gp| *gp -= g);
                }
            }
            Op::Neg(a) => {
                if need(*a) {
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp -= g);
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let db = g * &nodes[*b].value;
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &db);
                }
                if need(*b) {
                    let da = g * &nodes[*a].value;
                    Self::accumulate(grads, *b, shape_of(*b), |gp| *gp += &da);
                }
            }
            Op::MulScalar(a, c) => {
                if need(*a) {
                    let d = g.mapv(|v| v * c);
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::Matmul(a, b) => {
                if need(*a) {
                    let da = g.dot(&nodes[*b].value.t());
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &da);
                }
                if need(*b) {
                    let db = nodes[*a].value.t().dot(g);
                    Self::accumulate(grads, *b, shape_of(*b), |gp| *gp += &db);
                }
            }
            Op::Transpose(a) => {
                if need(*a) {
                    let da = g.t().to_owned();
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &da);
                }
            }
            Op::Affine { x, w, b } => {
                if need(*x) {
                    let dx = g.dot(&nodes[*w].value.t());
                    Self::accumulate(grads, *x, shape_of(*x), |gp| *gp += &dx);
                }
                if need(*w) {
                    let dw = nodes[*x].value.t().dot(g);
                    Self::accumulate(grads, *w, shape_of(*w), |gp| *gp += &dw);
                }
                if need(*b) {
                    let db = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                    Self::accumulate(grads, *b, shape_of(*b), |gp| *gp += &db);
                }
            }
            Op::Exp(a) => {
                if need(*a) {
                    let d = g * &nodes[idx].value;
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::Log(a) => {
                if need(*a) {
                    let d = g / &nodes[*a].value;
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::Tanh(a) => {
                if need(*a) {
                    let d = g * &nodes[idx].value.mapv(|y| 1.0 - y * y);
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::Relu(a) => {
                if need(*a) {
                    let mask = nodes[*a].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let d = g * &mask;
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::Silu(a) => {
                if need(*a) {
                    let d = nodes[*a].value.mapv(|v| {
                        let sig = 1.0 / (1.0 + (-v).exp());
                        sig * (1.0 + v * (1.0 - sig))
                    });
                    let d = g * &d;
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::Square(a) => {
                if need(*a) {
                    let d = g * &nodes[*a].value.mapv(|v| 2.0 * v);
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::SoftmaxRows(a) => {
                if need(*a) {
                    let y = &nodes[idx].value;
                    let mut d = g * y;
                    for r in 0..d.nrows() {
                        let dot: f64 = d.row(r).sum();
                        for c in 0..d.ncols() {
                            d[[r, c]] -= dot * y[[r, c]];
                        }
                    }
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::SumAll(a) => {
                if need(*a) {
                    let v = g[[0, 0]];
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += v);
                }
            }
            Op::MeanAll(a) => {
                if need(*a) {
                    let v = g[[0, 0]] / nodes[*a].value.len() as f64;
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += v);
                }
            }
            Op::SumRows(a) => {
                if need(*a) {
                    Self::accumulate(grads, *a, shape_of(*a), |gp| {
                        for mut row in gp.rows_mut() {
                            for c in 0..row.len() {
                                row[c] += g[[0, c]];
                            }
                        }
                    });
                }
            }
            Op::SumCols(a) => {
                if need(*a) {
                    Self::accumulate(grads, *a, shape_of(*a), |gp| {
                        for (r, mut row) in gp.rows_mut().into_iter().enumerate() {
                            for c in 0..row.len() {
                                row[c] += g[[r, 0]];
                            }
                        }
                    });
                }
            }
            Op::BroadcastRow(a) => {
                if need(*a) {
                    let d = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::BroadcastCol(a) => {
                if need(*a) {
                    let d = g.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
                    Self::accumulate(grads, *a, shape_of(*a), |gp| *gp += &d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.ncols();
                    if need(p) {
                        let slice = g.slice(s![.., offset..offset + w]).to_owned();
                        Self::accumulate(grads, p, shape_of(p), |gp| *gp += &slice);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { p, start } => {
                if need(*p) {
                    let w = g.ncols();
                    let start = *start;
                    Self::accumulate(grads, *p, shape_of(*p), |gp| {
                        let mut view = gp.slice_mut(s![.., start..start + w]);
                        view += g;
                    });
                }
            }
            Op::GatherRows { p, indices } => {
                if need(*p) {
                    Self::accumulate(grads, *p, shape_of(*p), |gp| {
                        for (r, &i) in indices.iter().enumerate() {
                            let mut row = gp.row_mut(i);
                            for c in 0..row.len() {
                                row[c] += g[[r, c]];
                            }
                        }
                    });
                }
            }
            Op::Clamp { p, lo, hi } => {
                if need(*p) {
                    let mask =
                        nodes[*p].value.mapv(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                    let d = g * &mask;
                    Self::accumulate(grads, *p, shape_of(*p), |gp| *gp += &d);
                }
            }
            Op::Custom { p, backward } => {
                if need(*p) {
                    Self::accumulate(grads, *p, shape_of(*p), |gp| {
                        backward(g, &nodes[*p].value, gp);
                    });
                }
            }
        }
        Ok(())
    }
}
