//! Reverse-mode automatic differentiation over flat `f64` tensors.
//!
//! A [`Tape`] records one forward pass as a define-by-run list of nodes; the
//! tape is rebuilt on every pass rather than mutated. Tensors are immutable
//! value buffers (`Rc`-shared) plus an optional node id into the tape —
//! tensors with no node are constants and cost nothing to record.
//!
//! Design rules:
//! - everything is `f64`; no broadcasting beyond what each op defines,
//! - gradients accumulate by summation when a tensor fans out,
//! - `backward` runs at most once per tape (a second call is an error),
//! - all ops are single-threaded with respect to one tape.

mod gradcheck;
mod params;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use params::{bind, Bindings, Param, ParamId, ParamSet};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

pub type NodeId = usize;

// ── Tensor ──────────────────────────────────────────────────────────────────

/// Immutable n-dimensional value buffer, row-major.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Rc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// A tensor that does not participate in differentiation.
    pub fn constant(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        Ok(Tensor { shape, values: Rc::new(values), node: None })
    }

    /// A constant scalar (shape `[]`).
    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], values: Rc::new(vec![v]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Whether gradient flows through this tensor.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one value; use only where the
    /// shape is known statically (losses, similarities).
    pub fn item(&self) -> f64 {
        assert!(
            self.numel() == 1,
            "item() on tensor with {} values (shape {:?})",
            self.numel(),
            self.shape
        );
        self.values[0]
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Contract(format!("{op}: expected a 2-d tensor, got shape {:?}", self.shape))),
        }
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

/// Given the gradient flowing into a node, produce the contributions to each
/// of its differentiable parents.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<(NodeId, Vec<f64>)>>;

struct Node {
    backward: BackwardFn,
    shape: Vec<usize>,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record(&self, shape: Vec<usize>, values: Vec<f64>, backward: BackwardFn) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { backward, shape: shape.clone() });
        Tensor { shape, values: Rc::new(values), node: Some(id) }
    }

    /// A differentiable leaf (trainable parameter or probed input).
    pub fn leaf(&self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Contract(format!(
                "leaf shape {:?} implies {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        Ok(self.record(shape, values, Box::new(|_| Vec::new())))
    }

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// differentiable ancestor; may run once per tape.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss.node.ok_or_else(|| {
            Error::Contract("backward requires a loss recorded on the tape (did every input opt out of gradients?)".into())
        })?;
        if self.spent.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this tape; rebuild the forward pass on a fresh tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            for (pid, contrib) in (nodes[id].backward)(&g) {
                debug_assert!(pid < id, "tape out of topological order");
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(contrib.iter()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` is differentiable
    /// and was reached by the reverse pass.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node?;
        self.grads.get(id)?.as_deref()
    }

    /// Shape recorded for a node; gradient buffers always match it.
    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }
}

// ── Elementwise and reduction ops ───────────────────────────────────────────

impl Tape {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch { op: "add", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let out: Vec<f64> = a.values.iter().zip(b.values.iter()).map(|(x, y)| x + y).collect();
        let parents = [a.node, b.node];
        if parents.iter().all(Option::is_none) {
            return Tensor::constant(a.shape.clone(), out);
        }
        Ok(self.record(
            a.shape.clone(),
            out,
            Box::new(move |dout| {
                parents.iter().flatten().map(|&p| (p, dout.to_vec())).collect()
            }),
        ))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch { op: "mul", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let out: Vec<f64> = a.values.iter().zip(b.values.iter()).map(|(x, y)| x * y).collect();
        if a.node.is_none() && b.node.is_none() {
            return Tensor::constant(a.shape.clone(), out);
        }
        let (an, bn) = (a.node, b.node);
        let (av, bv) = (a.values.clone(), b.values.clone());
        Ok(self.record(
            a.shape.clone(),
            out,
            Box::new(move |dout| {
                let mut contribs = Vec::new();
                if let Some(p) = an {
                    contribs.push((p, dout.iter().zip(bv.iter()).map(|(d, y)| d * y).collect()));
                }
                if let Some(p) = bn {
                    contribs.push((p, dout.iter().zip(av.iter()).map(|(d, x)| d * x).collect()));
                }
                contribs
            }),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = a.values.iter().map(|x| x * c).collect();
        match a.node {
            None => Tensor { shape: a.shape.clone(), values: Rc::new(out), node: None },
            Some(p) => self.record(
                a.shape.clone(),
                out,
                Box::new(move |dout| vec![(p, dout.iter().map(|d| d * c).collect())]),
            ),
        }
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = a.values.iter().map(|x| x.tanh()).collect();
        match a.node {
            None => Tensor { shape: a.shape.clone(), values: Rc::new(out), node: None },
            Some(p) => {
                let y = Rc::new(out.clone());
                self.record(
                    a.shape.clone(),
                    out,
                    Box::new(move |dout| {
                        vec![(p, dout.iter().zip(y.iter()).map(|(d, t)| d * (1.0 - t * t)).collect())]
                    }),
                )
            }
        }
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: &Tensor) -> Tensor {
        let total: f64 = a.values.iter().sum();
        match a.node {
            None => Tensor::scalar(total),
            Some(p) => {
                let n = a.numel();
                self.record(
                    vec![],
                    vec![total],
                    Box::new(move |dout| vec![(p, vec![dout[0]; n])]),
                )
            }
        }
    }

    /// Mean over the rows of a `[rows, cols]` tensor, kept 2-d as `[1, cols]`.
    pub fn mean_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.rows_cols("mean_rows")?;
        if rows == 0 {
            return Err(Error::DegenerateInput("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += a.values[r * cols + c];
            }
        }
        for v in out.iter_mut() {
            *v /= rows as f64;
        }
        match a.node {
            None => Tensor::constant(vec![1, cols], out),
            Some(p) => Ok(self.record(
                vec![1, cols],
                out,
                Box::new(move |dout| {
                    let inv = 1.0 / rows as f64;
                    let mut g = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] = dout[c] * inv;
                        }
                    }
                    vec![(p, g)]
                }),
            )),
        }
    }
}

// ── Shape ops ───────────────────────────────────────────────────────────────

impl Tape {
    /// View the same values under a different shape with equal element count.
    pub fn reshape(&self, a: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != a.numel() {
            return Err(Error::Contract(format!(
                "reshape: {:?} ({} values) cannot view as {:?} ({} values)",
                a.shape,
                a.numel(),
                shape,
                expect
            )));
        }
        match a.node {
            None => Tensor::constant(shape, a.values().to_vec()),
            Some(p) => Ok(self.record(
                shape,
                a.values().to_vec(),
                Box::new(move |dout| vec![(p, dout.to_vec())]),
            )),
        }
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.rows_cols("transpose")?;
        let out = transpose_raw(a.values(), rows, cols);
        match a.node {
            None => Tensor::constant(vec![cols, rows], out),
            Some(p) => Ok(self.record(
                vec![cols, rows],
                out,
                Box::new(move |dout| vec![(p, transpose_raw(dout, cols, rows))]),
            )),
        }
    }

    /// Stack 2-d tensors with equal column counts along the row axis.
    /// The same input tensor may appear more than once; its gradient
    /// contributions accumulate.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::DegenerateInput("concat_rows of zero tensors".into()));
        }
        let (_, cols) = parts[0].rows_cols("concat_rows")?;
        let mut rows = 0usize;
        for part in parts {
            let (r, c) = part.rows_cols("concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape.clone(),
                    rhs: part.shape.clone(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for part in parts {
            out.extend_from_slice(part.values());
        }
        // (parent id, element offset, element count) for each differentiable part.
        let mut spans = Vec::new();
        let mut offset = 0usize;
        for part in parts {
            if let Some(p) = part.node {
                spans.push((p, offset, part.numel()));
            }
            offset += part.numel();
        }
        if spans.is_empty() {
            return Tensor::constant(vec![rows, cols], out);
        }
        Ok(self.record(
            vec![rows, cols],
            out,
            Box::new(move |dout| {
                spans
                    .iter()
                    .map(|&(p, off, len)| (p, dout[off..off + len].to_vec()))
                    .collect()
            }),
        ))
    }

    /// Columns `c0..c1` of a 2-d tensor.
    pub fn slice_cols(&self, a: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
        let (rows, cols) = a.rows_cols("slice_cols")?;
        if c0 >= c1 || c1 > cols {
            return Err(Error::Contract(format!(
                "slice_cols: range {c0}..{c1} invalid for {cols} columns"
            )));
        }
        let width = c1 - c0;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&a.values[r * cols + c0..r * cols + c1]);
        }
        match a.node {
            None => Tensor::constant(vec![rows, width], out),
            Some(p) => Ok(self.record(
                vec![rows, width],
                out,
                Box::new(move |dout| {
                    let mut g = vec![0.0; rows * cols];
                    for r in 0..rows {
                        g[r * cols + c0..r * cols + c1].copy_from_slice(&dout[r * width..(r + 1) * width]);
                    }
                    vec![(p, g)]
                }),
            )),
        }
    }

    /// Stack 2-d tensors with equal row counts along the column axis.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::DegenerateInput("concat_cols of zero tensors".into()));
        }
        let (rows, _) = parts[0].rows_cols("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0usize;
        for part in parts {
            let (r, c) = part.rows_cols("concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: part.shape.clone(),
                });
            }
            widths.push(c);
            cols += c;
        }
        let mut out = vec![0.0; rows * cols];
        let mut col0 = 0usize;
        for (part, &w) in parts.iter().zip(widths.iter()) {
            for r in 0..rows {
                out[r * cols + col0..r * cols + col0 + w]
                    .copy_from_slice(&part.values[r * w..(r + 1) * w]);
            }
            col0 += w;
        }
        let mut spans = Vec::new();
        let mut col0 = 0usize;
        for (part, &w) in parts.iter().zip(widths.iter()) {
            if let Some(p) = part.node {
                spans.push((p, col0, w));
            }
            col0 += w;
        }
        if spans.is_empty() {
            return Tensor::constant(vec![rows, cols], out);
        }
        Ok(self.record(
            vec![rows, cols],
            out,
            Box::new(move |dout| {
                spans
                    .iter()
                    .map(|&(p, c0, w)| {
                        let mut g = vec![0.0; rows * w];
                        for r in 0..rows {
                            g[r * w..(r + 1) * w]
                                .copy_from_slice(&dout[r * cols + c0..r * cols + c0 + w]);
                        }
                        (p, g)
                    })
                    .collect()
            }),
        ))
    }
}

// ── Linear algebra ──────────────────────────────────────────────────────────

impl Tape {
    /// 2-d matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.rows_cols("matmul")?;
        let (k2, n) = b.rows_cols("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let out = matmul_raw(a.values(), b.values(), m, k, n);
        if a.node.is_none() && b.node.is_none() {
            return Tensor::constant(vec![m, n], out);
        }
        let (an, bn) = (a.node, b.node);
        let (av, bv) = (a.values.clone(), b.values.clone());
        Ok(self.record(
            vec![m, n],
            out,
            Box::new(move |dout| {
                let mut contribs = Vec::new();
                if let Some(p) = an {
                    // dA[i,p] = sum_j dC[i,j] * B[p,j]
                    let mut g = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dout[i * n + j];
                            if d != 0.0 {
                                for kk in 0..k {
                                    g[i * k + kk] += d * bv[kk * n + j];
                                }
                            }
                        }
                    }
                    contribs.push((p, g));
                }
                if let Some(p) = bn {
                    // dB[p,j] = sum_i A[i,p] * dC[i,j]
                    let mut g = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let x = av[i * k + kk];
                            if x != 0.0 {
                                for j in 0..n {
                                    g[kk * n + j] += x * dout[i * n + j];
                                }
                            }
                        }
                    }
                    contribs.push((p, g));
                }
                contribs
            }),
        ))
    }
}

// ── Normalization, similarity and loss ──────────────────────────────────────

impl Tape {
    /// Numerically stable softmax over the trailing axis of any tensor with
    /// at least one dimension. Rejects non-finite inputs.
    pub fn softmax_last_dim(&self, a: &Tensor) -> Result<Tensor> {
        let Some(&n) = a.shape.last() else {
            return Err(Error::Contract("softmax_last_dim: scalar input has no trailing axis".into()));
        };
        if n == 0 {
            return Err(Error::DegenerateInput("softmax_last_dim over an empty axis".into()));
        }
        if let Some(bad) = a.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("softmax_last_dim input contains {bad}")));
        }
        let mut out = vec![0.0; a.numel()];
        for (slice_in, slice_out) in a.values.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            softmax_slice(slice_in, slice_out);
        }
        match a.node {
            None => Tensor::constant(a.shape.clone(), out),
            Some(p) => {
                let y = Rc::new(out.clone());
                Ok(self.record(
                    a.shape.clone(),
                    out,
                    Box::new(move |dout| {
                        // dx = y * (dy - <dy, y>) per trailing slice
                        let mut g = vec![0.0; y.len()];
                        for s in 0..y.len() / n {
                            let ys = &y[s * n..(s + 1) * n];
                            let ds = &dout[s * n..(s + 1) * n];
                            let dot: f64 = ys.iter().zip(ds.iter()).map(|(yy, dd)| yy * dd).sum();
                            for i in 0..n {
                                g[s * n + i] = ys[i] * (ds[i] - dot);
                            }
                        }
                        vec![(p, g)]
                    }),
                ))
            }
        }
    }

    /// Cosine similarity between two tensors with the same element count,
    /// as a scalar. Zero-norm inputs are rejected.
    pub fn cosine_similarity(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.numel() != b.numel() || a.numel() == 0 {
            return Err(Error::ShapeMismatch { op: "cosine_similarity", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let na = l2_norm(a.values());
        let nb = l2_norm(b.values());
        if na == 0.0 {
            return Err(Error::DegenerateInput("cosine_similarity: first input has zero norm".into()));
        }
        if nb == 0.0 {
            return Err(Error::DegenerateInput("cosine_similarity: second input has zero norm".into()));
        }
        let dot: f64 = a.values.iter().zip(b.values.iter()).map(|(x, y)| x * y).sum();
        let cos = dot / (na * nb);
        if a.node.is_none() && b.node.is_none() {
            return Ok(Tensor::scalar(cos));
        }
        let (an, bn) = (a.node, b.node);
        let (av, bv) = (a.values.clone(), b.values.clone());
        Ok(self.record(
            vec![],
            vec![cos],
            Box::new(move |dout| {
                let d = dout[0];
                let mut contribs = Vec::new();
                if let Some(p) = an {
                    let g = av
                        .iter()
                        .zip(bv.iter())
                        .map(|(x, y)| d * (y / (na * nb) - cos * x / (na * na)))
                        .collect();
                    contribs.push((p, g));
                }
                if let Some(p) = bn {
                    let g = bv
                        .iter()
                        .zip(av.iter())
                        .map(|(y, x)| d * (x / (na * nb) - cos * y / (nb * nb)))
                        .collect();
                    contribs.push((p, g));
                }
                contribs
            }),
        ))
    }

    /// Cosine similarity of one vector against every row of a matrix:
    /// `v` (d values) vs `m: [n, d] -> [n]`. The batched form of
    /// [`Tape::cosine_similarity`]; any zero-norm operand is rejected.
    pub fn cosine_rows(&self, v: &Tensor, m: &Tensor) -> Result<Tensor> {
        let (n, d) = m.rows_cols("cosine_rows")?;
        if v.numel() != d {
            return Err(Error::ShapeMismatch { op: "cosine_rows", lhs: v.shape.clone(), rhs: m.shape.clone() });
        }
        let nv = l2_norm(v.values());
        if nv == 0.0 {
            return Err(Error::DegenerateInput("cosine_rows: query vector has zero norm".into()));
        }
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n];
        for r in 0..n {
            let row = &m.values[r * d..(r + 1) * d];
            let nr = l2_norm(row);
            if nr == 0.0 {
                return Err(Error::DegenerateInput(format!("cosine_rows: row {r} has zero norm")));
            }
            let dot: f64 = v.values.iter().zip(row.iter()).map(|(x, y)| x * y).sum();
            norms[r] = nr;
            out[r] = dot / (nv * nr);
        }
        if v.node.is_none() && m.node.is_none() {
            return Tensor::constant(vec![n], out);
        }
        let (vn, mn) = (v.node, m.node);
        let (vv, mv) = (v.values.clone(), m.values.clone());
        let cos = out.clone();
        Ok(self.record(
            vec![n],
            out,
            Box::new(move |dout| {
                let mut contribs = Vec::new();
                if let Some(p) = vn {
                    let mut g = vec![0.0; d];
                    for r in 0..n {
                        let dr = dout[r];
                        if dr == 0.0 {
                            continue;
                        }
                        let row = &mv[r * d..(r + 1) * d];
                        for i in 0..d {
                            g[i] += dr * (row[i] / (nv * norms[r]) - cos[r] * vv[i] / (nv * nv));
                        }
                    }
                    contribs.push((p, g));
                }
                if let Some(p) = mn {
                    let mut g = vec![0.0; n * d];
                    for r in 0..n {
                        let dr = dout[r];
                        if dr == 0.0 {
                            continue;
                        }
                        let row = &mv[r * d..(r + 1) * d];
                        for i in 0..d {
                            g[r * d + i] =
                                dr * (vv[i] / (nv * norms[r]) - cos[r] * row[i] / (norms[r] * norms[r]));
                        }
                    }
                    contribs.push((p, g));
                }
                contribs
            }),
        ))
    }

    /// Cross-entropy of a 1-d logit vector against a class index, with the
    /// log-sum-exp fused for stability.
    pub fn cross_entropy_from_logits(&self, logits: &Tensor, target: usize) -> Result<Tensor> {
        let n = match logits.shape.as_slice() {
            [n] => *n,
            _ => {
                return Err(Error::Contract(format!(
                    "cross_entropy_from_logits: expected a 1-d logit vector, got shape {:?}",
                    logits.shape
                )))
            }
        };
        if target >= n {
            return Err(Error::InvalidTarget { target, n_classes: n });
        }
        if let Some(bad) = logits.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cross_entropy_from_logits input contains {bad}")));
        }
        let max = logits.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.values.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let loss = lse - logits.values[target];
        match logits.node {
            None => Ok(Tensor::scalar(loss)),
            Some(p) => {
                let probs: Vec<f64> = logits.values.iter().map(|x| (x - max).exp() / sum_exp).collect();
                Ok(self.record(
                    vec![],
                    vec![loss],
                    Box::new(move |dout| {
                        let d = dout[0];
                        let g = probs
                            .iter()
                            .enumerate()
                            .map(|(i, pr)| d * (pr - if i == target { 1.0 } else { 0.0 }))
                            .collect();
                        vec![(p, g)]
                    }),
                ))
            }
        }
    }
}

// ── Raw numeric helpers ─────────────────────────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let x = a[i * k + kk];
            if x != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softmax_slice(input: &[f64], out: &mut [f64]) {
    let max = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(input.iter()) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
