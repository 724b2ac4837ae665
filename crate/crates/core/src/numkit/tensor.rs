//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! Every operation that participates in a loss builds a computation graph
//! behind the scenes; calling [`Tensor::backward`] on a scalar loss walks
//! that graph once in reverse topological order and accumulates gradients
//! into every reachable tensor created with [`Tensor::param`]. Gradients
//! accumulate across repeated backward calls until [`Tensor::zero_grad`].
//!
//! Graphs are single-threaded. Independent graphs may live on different
//! threads, but a single graph (and the parameters it references) must stay
//! on one thread.
//!
//! All forward and backward passes check their outputs for NaN/Inf and fail
//! with [`Error::NonFiniteValue`] rather than letting poison propagate.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Inputs to [`Tensor::log`] are clamped at this floor so degenerate
/// probabilities produce large-but-finite losses. Entries at or below the
/// clamp get zero gradient, matching the flat clamped forward.
pub const LOG_CLAMP: f64 = 1e-12;

/// Rows with an L2 norm below this floor are scaled by `1/EPS_NORM` instead
/// of being normalized, keeping [`Tensor::l2_normalize_rows`] finite.
pub const EPS_NORM: f64 = 1e-12;

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    op: Op,
}

enum Op {
    Leaf,
    Add,
    /// `[n, d] + [d]`, the second operand broadcast across rows.
    AddRow,
    Sub,
    Mul,
    Scale(f64),
    Matmul,
    Transpose,
    Relu,
    Exp,
    Log,
    Square,
    /// Softmax over the last axis.
    Softmax,
    Sum,
    Mean,
    SumAxis(usize),
    L2NormalizeRows {
        norms: Vec<f64>,
    },
    Concat {
        rows: Vec<usize>,
    },
    InterleaveRows,
    GatherRows(Vec<usize>),
    /// Parents: input, scale, shift. `xhat` is the normalized input saved
    /// for the backward pass, `inv_std` is per-feature 1/sqrt(var + eps).
    BatchNormTrain {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

/// A reference-counted handle to a tensor node. Cloning is cheap and both
/// handles see the same values and gradient.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Node>>);

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn ensure_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteValue(op))
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(RefCell::new(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            op: Op::Leaf,
        })))
    }

    fn validated(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "new",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        if numel_of(&shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                detail: format!("shape {:?} holds {} values, got {}", shape, numel_of(&shape), values.len()),
            });
        }
        ensure_finite("new", &values)?;
        Ok(Tensor::make(shape, values, requires_grad))
    }

    /// A constant tensor that does not participate in gradients.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Tensor::validated(shape, values, false)
    }

    /// A trainable tensor; backward passes accumulate into its `grad`.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Tensor::validated(shape, values, true)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::validated(vec![], vec![v], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor::make(shape, vec![0.0; n], false)
    }

    /// Builds an `[n, d]` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch("from_rows"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            values.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), d], values)
    }

    fn from_op(shape: Vec<usize>, values: Vec<f64>, parents: Vec<Tensor>, op: Op) -> Result<Tensor> {
        ensure_finite(op.name(), &values)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = if requires_grad {
            Node {
                shape,
                values,
                grad: None,
                requires_grad: true,
                parents,
                op,
            }
        } else {
            // Constant subgraphs are not recorded; the result is a fresh leaf.
            Node {
                shape,
                values,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                op: Op::Leaf,
            }
        };
        Ok(Tensor(Rc::new(RefCell::new(node))))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.borrow().shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// A copy of the stored values in row-major order.
    pub fn values(&self) -> Vec<f64> {
        self.0.borrow().values.clone()
    }

    /// The single stored value; panics unless the tensor holds exactly one.
    pub fn item(&self) -> f64 {
        let node = self.0.borrow();
        assert_eq!(node.values.len(), 1, "item() on tensor of shape {:?}", node.shape);
        node.values[0]
    }

    /// A copy of the accumulated gradient, if any backward pass reached this
    /// tensor since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrites the stored values in place. The replacement must match the
    /// current element count and be finite.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        ensure_finite("set_values", values)?;
        let mut node = self.0.borrow_mut();
        if node.values.len() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "set_values",
                detail: format!("have {} values, got {}", node.values.len(), values.len()),
            });
        }
        node.values.copy_from_slice(values);
        Ok(())
    }

    /// A constant copy sharing no graph history with this tensor.
    pub fn detach(&self) -> Tensor {
        let node = self.0.borrow();
        Tensor::make(node.shape.clone(), node.values.clone(), false)
    }

    fn ptr(&self) -> *const RefCell<Node> {
        Rc::as_ptr(&self.0)
    }

    // ── Elementwise and structural operations ───────────────────────────────

    /// Elementwise addition; also accepts a `[d]` right operand against an
    /// `[n, d]` left operand, broadcast across rows.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls == rs {
            let a = self.0.borrow();
            let b = other.0.borrow();
            let values = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
            drop(a);
            drop(b);
            Tensor::from_op(ls, values, vec![self.clone(), other.clone()], Op::Add)
        } else if ls.len() == 2 && rs.len() == 1 && ls[1] == rs[0] {
            let (n, d) = (ls[0], ls[1]);
            let a = self.0.borrow();
            let b = other.0.borrow();
            let mut values = Vec::with_capacity(n * d);
            for i in 0..n {
                for j in 0..d {
                    values.push(a.values[i * d + j] + b.values[j]);
                }
            }
            drop(a);
            drop(b);
            Tensor::from_op(ls, values, vec![self.clone(), other.clone()], Op::AddRow)
        } else {
            Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{ls:?} vs {rs:?}"),
            })
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(Error::ShapeMismatch {
                op: "sub",
                detail: format!("{ls:?} vs {rs:?}"),
            });
        }
        let a = self.0.borrow();
        let b = other.0.borrow();
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
        drop(a);
        drop(b);
        Tensor::from_op(ls, values, vec![self.clone(), other.clone()], Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{ls:?} vs {rs:?}"),
            });
        }
        let a = self.0.borrow();
        let b = other.0.borrow();
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
        drop(a);
        drop(b);
        Tensor::from_op(ls, values, vec![self.clone(), other.clone()], Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let node = self.0.borrow();
        let shape = node.shape.clone();
        let values = node.values.iter().map(|v| v * c).collect();
        drop(node);
        Tensor::from_op(shape, values, vec![self.clone()], Op::Scale(c))
    }

    /// Matrix product of `[m, k]` and `[k, n]` operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{ls:?} vs {rs:?}"),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let a = self.0.borrow();
        let b = other.0.borrow();
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a.values[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b.values[p * n..(p + 1) * n];
                let crow = &mut values[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        Tensor::from_op(vec![m, n], values, vec![self.clone(), other.clone()], Op::Matmul)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("need rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let node = self.0.borrow();
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = node.values[i * n + j];
            }
        }
        drop(node);
        Tensor::from_op(vec![n, m], values, vec![self.clone()], Op::Transpose)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let node = self.0.borrow();
        let shape = node.shape.clone();
        let values = node.values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        drop(node);
        Tensor::from_op(shape, values, vec![self.clone()], Op::Relu)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let node = self.0.borrow();
        let shape = node.shape.clone();
        let values = node.values.iter().map(|v| v.exp()).collect();
        drop(node);
        Tensor::from_op(shape, values, vec![self.clone()], Op::Exp)
    }

    /// Natural logarithm with inputs clamped at [`LOG_CLAMP`].
    pub fn log(&self) -> Result<Tensor> {
        let node = self.0.borrow();
        let shape = node.shape.clone();
        let values = node.values.iter().map(|&v| v.max(LOG_CLAMP).ln()).collect();
        drop(node);
        Tensor::from_op(shape, values, vec![self.clone()], Op::Log)
    }

    pub fn square(&self) -> Result<Tensor> {
        let node = self.0.borrow();
        let shape = node.shape.clone();
        let values = node.values.iter().map(|v| v * v).collect();
        drop(node);
        Tensor::from_op(shape, values, vec![self.clone()], Op::Square)
    }

    /// Softmax over the last axis, numerically stabilized by the row max.
    /// Each row of the result sums to 1.
    pub fn softmax(&self) -> Result<Tensor> {
        let shape = self.shape();
        let k = *shape.last().ok_or(Error::ShapeMismatch {
            op: "softmax",
            detail: "rank 0 input".into(),
        })?;
        let node = self.0.borrow();
        let rows = node.values.len() / k;
        let mut values = vec![0.0; node.values.len()];
        for r in 0..rows {
            let row = &node.values[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut values[r * k..(r + 1) * k];
            let mut sum = 0.0;
            for j in 0..k {
                out[j] = (row[j] - max).exp();
                sum += out[j];
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        drop(node);
        Tensor::from_op(shape, values, vec![self.clone()], Op::Softmax)
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let node = self.0.borrow();
        let total: f64 = node.values.iter().sum();
        drop(node);
        Tensor::from_op(vec![], vec![total], vec![self.clone()], Op::Sum)
    }

    /// Mean of all elements as a scalar tensor.
    pub fn mean(&self) -> Result<Tensor> {
        let node = self.0.borrow();
        let total: f64 = node.values.iter().sum();
        let n = node.values.len() as f64;
        drop(node);
        Tensor::from_op(vec![], vec![total / n], vec![self.clone()], Op::Mean)
    }

    /// Sum of a rank-2 tensor along `axis` (0 collapses rows, 1 collapses
    /// columns).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || axis > 1 {
            return Err(Error::ShapeMismatch {
                op: "sum_axis",
                detail: format!("need rank 2 and axis 0|1, got {s:?} axis {axis}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let node = self.0.borrow();
        let values = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += node.values[i * n + j];
                }
            }
            out
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = node.values[i * n..(i + 1) * n].iter().sum();
            }
            out
        };
        drop(node);
        let len = values.len();
        Tensor::from_op(vec![len], values, vec![self.clone()], Op::SumAxis(axis))
    }

    /// Scales each row of a rank-2 tensor to unit L2 norm. Rows with norm
    /// below [`EPS_NORM`] are divided by the floor instead.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize_rows",
                detail: format!("need rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let node = self.0.borrow();
        let mut values = vec![0.0; m * n];
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &node.values[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS_NORM);
            norms[i] = norm;
            for j in 0..n {
                values[i * n + j] = row[j] / norm;
            }
        }
        drop(node);
        Tensor::from_op(s, values, vec![self.clone()], Op::L2NormalizeRows { norms })
    }

    /// Stacks rank-2 tensors with equal column counts along axis 0.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyBatch("concat"));
        }
        let first = parts[0].shape();
        if first.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("need rank 2, got {first:?}"),
            });
        }
        let cols = first[1];
        let mut rows = Vec::with_capacity(parts.len());
        let mut values = Vec::new();
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{s:?} does not stack on [{}, {cols}]", first[0]),
                });
            }
            rows.push(s[0]);
            values.extend(p.0.borrow().values.iter());
        }
        let total: usize = rows.iter().sum();
        Tensor::from_op(vec![total, cols], values, parts.to_vec(), Op::Concat { rows })
    }

    /// Merges two `[b, d]` tensors into `[2b, d]` with rows alternating
    /// `a[0], b[0], a[1], b[1], ...`, so rows `2i` and `2i+1` form a pair.
    pub fn interleave_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sa != sb {
            return Err(Error::ShapeMismatch {
                op: "interleave_rows",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let (m, d) = (sa[0], sa[1]);
        let an = a.0.borrow();
        let bn = b.0.borrow();
        let mut values = Vec::with_capacity(2 * m * d);
        for i in 0..m {
            values.extend_from_slice(&an.values[i * d..(i + 1) * d]);
            values.extend_from_slice(&bn.values[i * d..(i + 1) * d]);
        }
        drop(an);
        drop(bn);
        Tensor::from_op(vec![2 * m, d], values, vec![a.clone(), b.clone()], Op::InterleaveRows)
    }

    /// Selects rows of a rank-2 tensor by index, in the order given.
    /// Gradients scatter-add back to the source rows.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("need rank 2, got {s:?}"),
            });
        }
        if indices.is_empty() {
            return Err(Error::EmptyBatch("gather_rows"));
        }
        let (m, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} out of bounds for {m} rows"),
            });
        }
        let node = self.0.borrow();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(&node.values[i * d..(i + 1) * d]);
        }
        drop(node);
        Tensor::from_op(
            vec![indices.len(), d],
            values,
            vec![self.clone()],
            Op::GatherRows(indices.to_vec()),
        )
    }

    // ── Backward pass ────────────────────────────────────────────────────────

    /// Reverse-mode gradient accumulation from a scalar loss. Every tensor
    /// on a grad-requiring path receives `d loss / d tensor` added into its
    /// `grad`. Calling backward twice without zeroing doubles the gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<*const RefCell<Node>> = HashSet::new();
        topo_visit(self, &mut seen, &mut order);

        // Leaf gradients accumulate across calls; interior nodes start each
        // pass clean so a second backward adds exactly one more gradient.
        for t in &order {
            let mut node = t.0.borrow_mut();
            if !node.parents.is_empty() {
                node.grad = None;
            }
        }

        add_grad(self, &[1.0])?;
        for t in order.iter().rev() {
            propagate(t)?;
        }
        Ok(())
    }
}

fn topo_visit(t: &Tensor, seen: &mut HashSet<*const RefCell<Node>>, order: &mut Vec<Tensor>) {
    if !t.requires_grad() || !seen.insert(t.ptr()) {
        return;
    }
    let parents = t.0.borrow().parents.clone();
    for p in &parents {
        topo_visit(p, seen, order);
    }
    order.push(t.clone());
}

fn add_grad(t: &Tensor, contrib: &[f64]) -> Result<()> {
    ensure_finite("backward", contrib)?;
    let mut node = t.0.borrow_mut();
    match &mut node.grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => node.grad = Some(contrib.to_vec()),
    }
    Ok(())
}

/// Computes every parent's gradient contribution for one node and adds it in.
fn propagate(t: &Tensor) -> Result<()> {
    let node = t.0.borrow();
    let Some(d) = node.grad.clone() else {
        return Ok(());
    };
    if matches!(node.op, Op::Leaf) {
        return Ok(());
    }
    let parents = node.parents.clone();
    let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
    let mut contribs: Vec<Option<Vec<f64>>> = vec![None; parents.len()];

    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            if needs[0] {
                contribs[0] = Some(d.clone());
            }
            if needs[1] {
                contribs[1] = Some(d.clone());
            }
        }
        Op::AddRow => {
            if needs[0] {
                contribs[0] = Some(d.clone());
            }
            if needs[1] {
                let cols = parents[1].numel();
                let mut g = vec![0.0; cols];
                for (i, v) in d.iter().enumerate() {
                    g[i % cols] += v;
                }
                contribs[1] = Some(g);
            }
        }
        Op::Sub => {
            if needs[0] {
                contribs[0] = Some(d.clone());
            }
            if needs[1] {
                contribs[1] = Some(d.iter().map(|v| -v).collect());
            }
        }
        Op::Mul => {
            let a = parents[0].0.borrow();
            let b = parents[1].0.borrow();
            if needs[0] {
                contribs[0] = Some(d.iter().zip(&b.values).map(|(x, y)| x * y).collect());
            }
            if needs[1] {
                contribs[1] = Some(d.iter().zip(&a.values).map(|(x, y)| x * y).collect());
            }
        }
        Op::Scale(c) => {
            if needs[0] {
                contribs[0] = Some(d.iter().map(|v| v * c).collect());
            }
        }
        Op::Matmul => {
            let a = parents[0].0.borrow();
            let b = parents[1].0.borrow();
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            if needs[0] {
                // dA = d @ B^T
                let mut g = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let dij = d[i * n + j];
                        if dij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            g[i * k + p] += dij * b.values[p * n + j];
                        }
                    }
                }
                contribs[0] = Some(g);
            }
            if needs[1] {
                // dB = A^T @ d
                let mut g = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a.values[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            g[p * n + j] += aip * d[i * n + j];
                        }
                    }
                }
                contribs[1] = Some(g);
            }
        }
        Op::Transpose => {
            if needs[0] {
                let s = parents[0].shape();
                let (m, n) = (s[0], s[1]);
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = d[j * m + i];
                    }
                }
                contribs[0] = Some(g);
            }
        }
        Op::Relu => {
            if needs[0] {
                let x = parents[0].0.borrow();
                contribs[0] = Some(
                    d.iter()
                        .zip(&x.values)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::Exp => {
            if needs[0] {
                contribs[0] = Some(d.iter().zip(&node.values).map(|(g, y)| g * y).collect());
            }
        }
        Op::Log => {
            if needs[0] {
                let x = parents[0].0.borrow();
                contribs[0] = Some(
                    d.iter()
                        .zip(&x.values)
                        .map(|(g, &v)| if v >= LOG_CLAMP { g / v } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::Square => {
            if needs[0] {
                let x = parents[0].0.borrow();
                contribs[0] = Some(d.iter().zip(&x.values).map(|(g, v)| 2.0 * v * g).collect());
            }
        }
        Op::Softmax => {
            if needs[0] {
                let k = *node.shape.last().unwrap();
                let rows = node.values.len() / k;
                let mut g = vec![0.0; node.values.len()];
                for r in 0..rows {
                    let p = &node.values[r * k..(r + 1) * k];
                    let dr = &d[r * k..(r + 1) * k];
                    let dot: f64 = p.iter().zip(dr).map(|(x, y)| x * y).sum();
                    let out = &mut g[r * k..(r + 1) * k];
                    for j in 0..k {
                        out[j] = p[j] * (dr[j] - dot);
                    }
                }
                contribs[0] = Some(g);
            }
        }
        Op::Sum => {
            if needs[0] {
                contribs[0] = Some(vec![d[0]; parents[0].numel()]);
            }
        }
        Op::Mean => {
            if needs[0] {
                let n = parents[0].numel();
                contribs[0] = Some(vec![d[0] / n as f64; n]);
            }
        }
        Op::SumAxis(axis) => {
            if needs[0] {
                let s = parents[0].shape();
                let (m, n) = (s[0], s[1]);
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = if *axis == 0 { d[j] } else { d[i] };
                    }
                }
                contribs[0] = Some(g);
            }
        }
        Op::L2NormalizeRows { norms } => {
            if needs[0] {
                let s = parents[0].shape();
                let (m, n) = (s[0], s[1]);
                let x = parents[0].0.borrow();
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    let norm = norms[i];
                    let row_x = &x.values[i * n..(i + 1) * n];
                    let row_y = &node.values[i * n..(i + 1) * n];
                    let dr = &d[i * n..(i + 1) * n];
                    let raw_norm = row_x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let out = &mut g[i * n..(i + 1) * n];
                    if raw_norm < EPS_NORM {
                        // forward was x / EPS_NORM, a plain scaling
                        for j in 0..n {
                            out[j] = dr[j] / norm;
                        }
                    } else {
                        let dot: f64 = row_y.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = (dr[j] - row_y[j] * dot) / norm;
                        }
                    }
                }
                contribs[0] = Some(g);
            }
        }
        Op::Concat { rows } => {
            let cols = node.shape[1];
            let mut offset = 0;
            for (idx, &r) in rows.iter().enumerate() {
                if needs[idx] {
                    contribs[idx] = Some(d[offset * cols..(offset + r) * cols].to_vec());
                }
                offset += r;
            }
        }
        Op::InterleaveRows => {
            let dcols = node.shape[1];
            let half = node.shape[0] / 2;
            for side in 0..2 {
                if needs[side] {
                    let mut g = vec![0.0; half * dcols];
                    for i in 0..half {
                        let src = (2 * i + side) * dcols;
                        g[i * dcols..(i + 1) * dcols].copy_from_slice(&d[src..src + dcols]);
                    }
                    contribs[side] = Some(g);
                }
            }
        }
        Op::GatherRows(indices) => {
            if needs[0] {
                let s = parents[0].shape();
                let (m, dcols) = (s[0], s[1]);
                let mut g = vec![0.0; m * dcols];
                for (out_row, &src_row) in indices.iter().enumerate() {
                    for j in 0..dcols {
                        g[src_row * dcols + j] += d[out_row * dcols + j];
                    }
                }
                contribs[0] = Some(g);
            }
        }
        Op::BatchNormTrain { xhat, inv_std } => {
            let s = parents[0].shape();
            let (n, c) = (s[0], s[1]);
            let scale = parents[1].0.borrow();
            // d xhat
            let mut dxhat = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..c {
                    dxhat[i * c + j] = d[i * c + j] * scale.values[j];
                }
            }
            drop(scale);
            if needs[1] {
                let mut g = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        g[j] += d[i * c + j] * xhat[i * c + j];
                    }
                }
                contribs[1] = Some(g);
            }
            if needs[2] {
                let mut g = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        g[j] += d[i * c + j];
                    }
                }
                contribs[2] = Some(g);
            }
            if needs[0] {
                let mut sum_d = vec![0.0; c];
                let mut sum_dx = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        sum_d[j] += dxhat[i * c + j];
                        sum_dx[j] += dxhat[i * c + j] * xhat[i * c + j];
                    }
                }
                let nf = n as f64;
                let mut g = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        g[i * c + j] = inv_std[j] / nf
                            * (nf * dxhat[i * c + j] - sum_d[j] - xhat[i * c + j] * sum_dx[j]);
                    }
                }
                contribs[0] = Some(g);
            }
        }
        Op::BatchNormEval { xhat, inv_std } => {
            let s = parents[0].shape();
            let (n, c) = (s[0], s[1]);
            if needs[1] {
                let mut g = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        g[j] += d[i * c + j] * xhat[i * c + j];
                    }
                }
                contribs[1] = Some(g);
            }
            if needs[2] {
                let mut g = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        g[j] += d[i * c + j];
                    }
                }
                contribs[2] = Some(g);
            }
            if needs[0] {
                let scale = parents[1].0.borrow();
                let mut g = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        g[i * c + j] = d[i * c + j] * scale.values[j] * inv_std[j];
                    }
                }
                contribs[0] = Some(g);
            }
        }
    }
    drop(node);

    for (p, contrib) in parents.iter().zip(contribs) {
        if let Some(c) = contrib {
            add_grad(p, &c)?;
        }
    }
    Ok(())
}

// ── Batch normalization ─────────────────────────────────────────────────────

/// Training-mode batch normalization of `[n, c]` inputs with learnable
/// per-feature `scale` and `shift`. Normalizes by the batch mean and biased
/// (population) variance and returns them alongside the output so callers
/// can maintain running statistics. Gradients flow through the batch
/// statistics. Requires `n >= 2`.
pub fn batchnorm_train(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_train",
            detail: format!("need rank 2 input, got {s:?}"),
        });
    }
    let (n, c) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::BatchTooSmall {
            op: "batchnorm_train",
            need: 2,
            got: n,
        });
    }
    if scale.shape() != vec![c] || shift.shape() != vec![c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_train",
            detail: format!("scale {:?} / shift {:?} vs {c} features", scale.shape(), shift.shape()),
        });
    }
    let xn = x.0.borrow();
    let sc = scale.0.borrow();
    let sh = shift.0.borrow();
    let nf = n as f64;
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            mean[j] += xn.values[i * c + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= nf;
    }
    let mut var = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            let dvi = xn.values[i * c + j] - mean[j];
            var[j] += dvi * dvi;
        }
    }
    for v in var.iter_mut() {
        *v /= nf;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; n * c];
    let mut values = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let h = (xn.values[i * c + j] - mean[j]) * inv_std[j];
            xhat[i * c + j] = h;
            values[i * c + j] = sc.values[j] * h + sh.values[j];
        }
    }
    drop(xn);
    drop(sc);
    drop(sh);
    let out = Tensor::from_op(
        vec![n, c],
        values,
        vec![x.clone(), scale.clone(), shift.clone()],
        Op::BatchNormTrain { xhat, inv_std },
    )?;
    Ok((out, mean, var))
}

/// Inference-mode batch normalization using frozen running statistics.
/// Behaves as a per-feature affine map, so single rows are fine.
pub fn batchnorm_eval(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_eval",
            detail: format!("need rank 2 input, got {s:?}"),
        });
    }
    let (n, c) = (s[0], s[1]);
    if scale.shape() != vec![c]
        || shift.shape() != vec![c]
        || running_mean.len() != c
        || running_var.len() != c
    {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_eval",
            detail: format!("feature count {c} not matched by scale/shift/running stats"),
        });
    }
    let xn = x.0.borrow();
    let sc = scale.0.borrow();
    let sh = shift.0.borrow();
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; n * c];
    let mut values = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let h = (xn.values[i * c + j] - running_mean[j]) * inv_std[j];
            xhat[i * c + j] = h;
            values[i * c + j] = sc.values[j] * h + sh.values[j];
        }
    }
    drop(xn);
    drop(sc);
    drop(sh);
    Tensor::from_op(
        vec![n, c],
        values,
        vec![x.clone(), scale.clone(), shift.clone()],
        Op::BatchNormEval { xhat, inv_std },
    )
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::AddRow => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Softmax => "softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::Concat { .. } => "concat",
            Op::InterleaveRows => "interleave_rows",
            Op::GatherRows(_) => "gather_rows",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormEval { .. } => "batchnorm_eval",
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let node = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &node.shape)
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}
