//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] owns every tensor produced during a forward pass and records
//! the producing operation whenever a gradient will be needed. The tape is
//! rebuilt per step (decoding and training loops are dynamic), and
//! [`Graph::backward`] replays recorded adjoints in reverse order.

use crate::error::{Error, Result};
use crate::tensor::{matmul_data, Real, Tensor};

/// Handle to a node owned by a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// The primitive vocabulary exposed through [`Graph::apply`]. Index-carrying
/// primitives (`Slice`, `EmbeddingLookup`) keep their static arguments in the
/// variant; everything else takes tensors only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Matmul,
    Add,
    ElementwiseMul,
    Concat,
    Tanh,
    Sigmoid,
    Softmax,
    Log,
    Exp,
    EmbeddingLookup { index: usize },
    Slice { start: usize, len: usize },
    Sum,
    Mean,
    SquaredError,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::ElementwiseMul => "elementwise-mul",
            Primitive::Concat => "concat",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::EmbeddingLookup { .. } => "embedding-lookup",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SquaredError => "squared-error",
        }
    }
}

/// Recorded adjoint information for one node. `Leaf` marks nodes that need no
/// backward replay (inputs, constants, and outputs of untracked ops).
#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: F },
    Concat { parts: Vec<TensorId> },
    Slice { a: TensorId, start: usize },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    Exp { a: TensorId },
    Log { a: TensorId },
    Softmax { a: TensorId },
    MaskedSoftmax { a: TensorId },
    LogSoftmax { a: TensorId },
    Lookup { table: TensorId, index: usize },
    Sum { a: TensorId },
    Mean { a: TensorId },
    SquaredError { a: TensorId, b: TensorId },
}

struct Node<F: Real> {
    tensor: Tensor<F>,
    op: Op<F>,
}

/// Dynamic tape. Single-threaded by construction (`&mut self` everywhere);
/// run independent graphs on separate threads for parallelism.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape as an input node.
    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> TensorId {
        let mut tensor = t.clone();
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Constant vector leaf (never tracked).
    pub fn constant(&mut self, data: Vec<F>) -> TensorId {
        self.push(Tensor::vector(data), Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: F) -> TensorId {
        self.push(Tensor::scalar(x), Op::Leaf)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn item(&self, id: TensorId) -> F {
        self.nodes[id.0].tensor.item()
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Resets every gradient buffer on the tape to zero.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.tensor.grad {
                g.iter_mut().for_each(|x| *x = F::zero());
            }
        }
    }

    fn push(&mut self, tensor: Tensor<F>, op: Op<F>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    /// Records `op` only when some input needs gradients; otherwise the
    /// output is stored as an untracked leaf.
    fn push_op(&mut self, shape: Vec<usize>, data: Vec<F>, inputs: &[TensorId], op: Op<F>) -> TensorId {
        let tracked = inputs.iter().any(|id| self.nodes[id.0].tensor.requires_grad);
        let mut tensor = Tensor::new(shape, data);
        tensor.requires_grad = tracked;
        self.push(tensor, if tracked { op } else { Op::Leaf })
    }

    // ── Checked primitive dispatch ───────────────────────────────────

    /// Applies a named primitive after validating input shapes, reporting
    /// dimension and index errors by primitive name.
    pub fn apply(&mut self, prim: Primitive, inputs: &[TensorId]) -> Result<TensorId> {
        let arity_err = |want: &str| {
            Err(Error::dim(
                prim.name(),
                format!("expected {want} inputs, got {}", inputs.len()),
            ))
        };
        let shape_of = |i: usize| self.nodes[inputs[i].0].tensor.shape().to_vec();

        match prim {
            Primitive::Matmul => {
                if inputs.len() != 2 {
                    return arity_err("2");
                }
                let (sa, sb) = (shape_of(0), shape_of(1));
                let ok = matches!(
                    (sa.len(), sb.len()),
                    (2, 2) | (2, 1) | (1, 2)
                ) && sa[sa.len() - 1] == sb[0];
                if !ok {
                    return Err(Error::dim(
                        prim.name(),
                        format!("incompatible shapes {sa:?} x {sb:?}"),
                    ));
                }
                Ok(self.matmul(inputs[0], inputs[1]))
            }
            Primitive::Add => {
                if inputs.len() != 2 {
                    return arity_err("2");
                }
                let (sa, sb) = (shape_of(0), shape_of(1));
                if sa == sb {
                    Ok(self.add(inputs[0], inputs[1]))
                } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
                    // bias-add is the only permitted broadcast
                    Ok(self.add_bias(inputs[0], inputs[1]))
                } else {
                    Err(Error::dim(
                        prim.name(),
                        format!("incompatible shapes {sa:?} + {sb:?}"),
                    ))
                }
            }
            Primitive::ElementwiseMul => {
                if inputs.len() != 2 {
                    return arity_err("2");
                }
                let (sa, sb) = (shape_of(0), shape_of(1));
                if sa != sb {
                    return Err(Error::dim(
                        prim.name(),
                        format!("incompatible shapes {sa:?} * {sb:?}"),
                    ));
                }
                Ok(self.mul(inputs[0], inputs[1]))
            }
            Primitive::Concat => {
                if inputs.is_empty() {
                    return arity_err(">= 1");
                }
                for i in 0..inputs.len() {
                    if shape_of(i).len() != 1 {
                        return Err(Error::dim(
                            prim.name(),
                            format!("input {i} has shape {:?}, want vectors", shape_of(i)),
                        ));
                    }
                }
                Ok(self.concat(inputs))
            }
            Primitive::Tanh => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                Ok(self.tanh(inputs[0]))
            }
            Primitive::Sigmoid => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                Ok(self.sigmoid(inputs[0]))
            }
            Primitive::Softmax => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                let s = shape_of(0);
                if s.len() > 2 {
                    return Err(Error::dim(
                        prim.name(),
                        format!("want 1-D or 2-D input, got {s:?}"),
                    ));
                }
                Ok(self.softmax(inputs[0]))
            }
            Primitive::Log => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                Ok(self.log(inputs[0]))
            }
            Primitive::Exp => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                Ok(self.exp(inputs[0]))
            }
            Primitive::EmbeddingLookup { index } => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                let s = shape_of(0);
                if s.len() != 2 {
                    return Err(Error::dim(
                        prim.name(),
                        format!("table must be 2-D, got {s:?}"),
                    ));
                }
                if index >= s[0] {
                    return Err(Error::Index {
                        index,
                        limit: s[0],
                    });
                }
                Ok(self.lookup(inputs[0], index))
            }
            Primitive::Slice { start, len } => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                let n = self.nodes[inputs[0].0].tensor.len();
                if len == 0 || start + len > n {
                    return Err(Error::dim(
                        prim.name(),
                        format!("range {start}..{} out of {n} elements", start + len),
                    ));
                }
                Ok(self.slice(inputs[0], start, len))
            }
            Primitive::Sum => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                Ok(self.sum(inputs[0]))
            }
            Primitive::Mean => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                Ok(self.mean(inputs[0]))
            }
            Primitive::SquaredError => {
                if inputs.len() != 2 {
                    return arity_err("2");
                }
                let (sa, sb) = (shape_of(0), shape_of(1));
                if sa != sb {
                    return Err(Error::dim(
                        prim.name(),
                        format!("incompatible shapes {sa:?} vs {sb:?}"),
                    ));
                }
                Ok(self.squared_error(inputs[0], inputs[1]))
            }
        }
    }

    // ── Forward ops ──────────────────────────────────────────────────
    //
    // Shapes are asserted here; public entry points validate their inputs
    // before reaching these.

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert!(
            ta.shape()[ta.ndim() - 1] == tb.shape()[0],
            "matmul {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let (data, shape) = matmul_data(ta.data(), ta.shape(), tb.data(), tb.shape());
        self.push_op(shape, data, &[a, b], Op::Matmul { a, b })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert_eq!(ta.shape(), tb.shape(), "add");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a, b], Op::Add { a, b })
    }

    /// `[m,n] + [n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[bias.0].tensor);
        assert!(ta.ndim() == 2 && tb.ndim() == 1 && ta.shape()[1] == tb.shape()[0], "add_bias");
        let n = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + tb.data()[i % n])
            .collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a, bias], Op::AddBias { a, bias })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert_eq!(ta.shape(), tb.shape(), "sub");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x - *y).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert_eq!(ta.shape(), tb.shape(), "mul");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|x| *x * c).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a], Op::Scale { a, c })
    }

    /// Concatenates vectors (and scalars) into one vector.
    pub fn concat(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of nothing");
        let mut data = Vec::new();
        for id in parts {
            data.extend_from_slice(self.nodes[id.0].tensor.data());
        }
        let shape = vec![data.len()];
        self.push_op(shape, data, parts, Op::Concat { parts: parts.to_vec() })
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "stack_rows of nothing");
        let cols = self.nodes[parts[0].0].tensor.len();
        let mut data = Vec::with_capacity(parts.len() * cols);
        for id in parts {
            let t = &self.nodes[id.0].tensor;
            assert_eq!(t.len(), cols, "stack_rows of ragged vectors");
            data.extend_from_slice(t.data());
        }
        let shape = vec![parts.len(), cols];
        self.push_op(shape, data, parts, Op::Concat { parts: parts.to_vec() })
    }

    pub fn slice(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        assert!(start + len <= ta.len(), "slice out of range");
        let data = ta.data()[start..start + len].to_vec();
        self.push_op(vec![len], data, &[a], Op::Slice { a, start })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a], Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let one = F::one();
        let data = ta.data().iter().map(|x| one / (one + (-*x).exp())).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a], Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|x| x.exp()).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a], Op::Exp { a })
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|x| x.ln()).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a], Op::Log { a })
    }

    /// Numerically stable softmax over the last axis (rows of a matrix, or
    /// the whole of a vector).
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let shape = ta.shape().to_vec();
        let cols = *shape.last().unwrap();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        self.push_op(shape, data, &[a], Op::Softmax { a })
    }

    /// Softmax over a vector of scores with inactive positions forced to
    /// zero probability. At least one position must be active.
    pub fn masked_softmax(&mut self, a: TensorId, mask: &[bool]) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        assert_eq!(ta.ndim(), 1, "masked_softmax wants a vector");
        assert_eq!(ta.len(), mask.len(), "mask length");
        assert!(mask.iter().any(|&m| m), "all positions masked");
        let mut data = ta.data().to_vec();
        let max = data
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(x, _)| *x)
            .fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (x, m) in data.iter_mut().zip(mask) {
            if *m {
                *x = (*x - max).exp();
                total += *x;
            } else {
                *x = F::zero();
            }
        }
        for x in data.iter_mut() {
            *x = *x / total;
        }
        let shape = vec![data.len()];
        self.push_op(shape, data, &[a], Op::MaskedSoftmax { a })
    }

    /// `log(softmax(x))` over a vector, computed stably.
    pub fn log_softmax(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        assert_eq!(ta.ndim(), 1, "log_softmax wants a vector");
        let max = ta.data().iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let lse = ta
            .data()
            .iter()
            .map(|x| (*x - max).exp())
            .sum::<F>()
            .ln()
            + max;
        let data = ta.data().iter().map(|x| *x - lse).collect();
        let shape = ta.shape().to_vec();
        self.push_op(shape, data, &[a], Op::LogSoftmax { a })
    }

    /// Row `index` of a 2-D embedding table.
    pub fn lookup(&mut self, table: TensorId, index: usize) -> TensorId {
        let tt = &self.nodes[table.0].tensor;
        assert_eq!(tt.ndim(), 2, "lookup table must be 2-D");
        let (rows, cols) = (tt.shape()[0], tt.shape()[1]);
        assert!(index < rows, "lookup index {index} >= {rows}");
        let data = tt.data()[index * cols..(index + 1) * cols].to_vec();
        self.push_op(vec![cols], data, &[table], Op::Lookup { table, index })
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let s: F = ta.data().iter().copied().sum();
        self.push_op(vec![1], vec![s], &[a], Op::Sum { a })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let n = F::from_f64(ta.len() as f64);
        let s: F = ta.data().iter().copied().sum::<F>() / n;
        self.push_op(vec![1], vec![s], &[a], Op::Mean { a })
    }

    /// Sum of squared differences, a scalar.
    pub fn squared_error(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert_eq!(ta.shape(), tb.shape(), "squared_error");
        let s: F = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum();
        self.push_op(vec![1], vec![s], &[a, b], Op::SquaredError { a, b })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Propagates adjoints from a scalar loss back to every tracked
    /// ancestor, accumulating into each tensor's `grad` buffer. Calling
    /// twice without clearing doubles the gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].tensor.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }

        // Fresh adjoint buffers per call; persisted grads only accumulate at
        // the end, so repeated calls stay linear.
        let mut adj: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &dy, &mut adj);
            if self.nodes[i].tensor.requires_grad {
                self.nodes[i].tensor.add_grad(&dy);
            }
        }
        Ok(())
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn accum(&self, adj: &mut [Option<Vec<F>>], id: TensorId, f: impl FnOnce(&mut [F])) {
        if !self.wants(id) {
            return;
        }
        let buf = adj[id.0].get_or_insert_with(|| vec![F::zero(); self.nodes[id.0].tensor.len()]);
        f(buf);
    }

    fn propagate(&mut self, out: usize, op: &Op<F>, dy: &[F], adj: &mut [Option<Vec<F>>]) {
        let two = F::from_f64(2.0);
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (
                    self.nodes[a.0].tensor.shape().to_vec(),
                    self.nodes[b.0].tensor.shape().to_vec(),
                );
                match (sa.len(), sb.len()) {
                    (2, 2) => {
                        let (m, k, n) = (sa[0], sa[1], sb[1]);
                        if self.wants(*a) {
                            let bd = self.nodes[b.0].tensor.data().to_vec();
                            self.accum(adj, *a, |da| {
                                for i in 0..m {
                                    for p in 0..k {
                                        let mut s = F::zero();
                                        for j in 0..n {
                                            s += dy[i * n + j] * bd[p * n + j];
                                        }
                                        da[i * k + p] += s;
                                    }
                                }
                            });
                        }
                        if self.wants(*b) {
                            let ad = self.nodes[a.0].tensor.data().to_vec();
                            self.accum(adj, *b, |db| {
                                for p in 0..k {
                                    for j in 0..n {
                                        let mut s = F::zero();
                                        for i in 0..m {
                                            s += ad[i * k + p] * dy[i * n + j];
                                        }
                                        db[p * n + j] += s;
                                    }
                                }
                            });
                        }
                    }
                    (2, 1) => {
                        let (m, k) = (sa[0], sa[1]);
                        if self.wants(*a) {
                            let bd = self.nodes[b.0].tensor.data().to_vec();
                            self.accum(adj, *a, |da| {
                                for i in 0..m {
                                    for p in 0..k {
                                        da[i * k + p] += dy[i] * bd[p];
                                    }
                                }
                            });
                        }
                        if self.wants(*b) {
                            let ad = self.nodes[a.0].tensor.data().to_vec();
                            self.accum(adj, *b, |db| {
                                for i in 0..m {
                                    for p in 0..k {
                                        db[p] += ad[i * k + p] * dy[i];
                                    }
                                }
                            });
                        }
                    }
                    (1, 2) => {
                        let (k, n) = (sa[0], sb[1]);
                        if self.wants(*a) {
                            let bd = self.nodes[b.0].tensor.data().to_vec();
                            self.accum(adj, *a, |da| {
                                for p in 0..k {
                                    let mut s = F::zero();
                                    for j in 0..n {
                                        s += bd[p * n + j] * dy[j];
                                    }
                                    da[p] += s;
                                }
                            });
                        }
                        if self.wants(*b) {
                            let ad = self.nodes[a.0].tensor.data().to_vec();
                            self.accum(adj, *b, |db| {
                                for p in 0..k {
                                    for j in 0..n {
                                        db[p * n + j] += ad[p] * dy[j];
                                    }
                                }
                            });
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::Add { a, b } => {
                self.accum(adj, *a, |da| {
                    for (d, g) in da.iter_mut().zip(dy) {
                        *d += *g;
                    }
                });
                self.accum(adj, *b, |db| {
                    for (d, g) in db.iter_mut().zip(dy) {
                        *d += *g;
                    }
                });
            }
            Op::AddBias { a, bias } => {
                self.accum(adj, *a, |da| {
                    for (d, g) in da.iter_mut().zip(dy) {
                        *d += *g;
                    }
                });
                let n = self.nodes[bias.0].tensor.len();
                self.accum(adj, *bias, |db| {
                    for (i, g) in dy.iter().enumerate() {
                        db[i % n] += *g;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accum(adj, *a, |da| {
                    for (d, g) in da.iter_mut().zip(dy) {
                        *d += *g;
                    }
                });
                self.accum(adj, *b, |db| {
                    for (d, g) in db.iter_mut().zip(dy) {
                        *d -= *g;
                    }
                });
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bd = self.nodes[b.0].tensor.data().to_vec();
                    self.accum(adj, *a, |da| {
                        for ((d, g), y) in da.iter_mut().zip(dy).zip(&bd) {
                            *d += *g * *y;
                        }
                    });
                }
                if self.wants(*b) {
                    let ad = self.nodes[a.0].tensor.data().to_vec();
                    self.accum(adj, *b, |db| {
                        for ((d, g), x) in db.iter_mut().zip(dy).zip(&ad) {
                            *d += *g * *x;
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accum(adj, *a, |da| {
                    for (d, g) in da.iter_mut().zip(dy) {
                        *d += *g * c;
                    }
                });
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for id in parts {
                    let len = self.nodes[id.0].tensor.len();
                    let seg = &dy[offset..offset + len];
                    self.accum(adj, *id, |d| {
                        for (x, g) in d.iter_mut().zip(seg) {
                            *x += *g;
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, start } => {
                let start = *start;
                self.accum(adj, *a, |da| {
                    for (i, g) in dy.iter().enumerate() {
                        da[start + i] += *g;
                    }
                });
            }
            Op::Tanh { a } => {
                let y = self.nodes[out].tensor.data().to_vec();
                self.accum(adj, *a, |da| {
                    for ((d, g), yi) in da.iter_mut().zip(dy).zip(&y) {
                        *d += *g * (F::one() - *yi * *yi);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = self.nodes[out].tensor.data().to_vec();
                self.accum(adj, *a, |da| {
                    for ((d, g), yi) in da.iter_mut().zip(dy).zip(&y) {
                        *d += *g * *yi * (F::one() - *yi);
                    }
                });
            }
            Op::Exp { a } => {
                let y = self.nodes[out].tensor.data().to_vec();
                self.accum(adj, *a, |da| {
                    for ((d, g), yi) in da.iter_mut().zip(dy).zip(&y) {
                        *d += *g * *yi;
                    }
                });
            }
            Op::Log { a } => {
                let x = self.nodes[a.0].tensor.data().to_vec();
                self.accum(adj, *a, |da| {
                    for ((d, g), xi) in da.iter_mut().zip(dy).zip(&x) {
                        *d += *g / *xi;
                    }
                });
            }
            Op::Softmax { a } | Op::MaskedSoftmax { a } => {
                let y = self.nodes[out].tensor.data().to_vec();
                let cols = *self.nodes[a.0].tensor.shape().last().unwrap();
                self.accum(adj, *a, |da| {
                    for r in 0..y.len() / cols {
                        let (ys, gs) = (&y[r * cols..(r + 1) * cols], &dy[r * cols..(r + 1) * cols]);
                        let dot: F = ys.iter().zip(gs).map(|(yi, gi)| *yi * *gi).sum();
                        let drow = &mut da[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            drow[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let y = self.nodes[out].tensor.data().to_vec();
                let total: F = dy.iter().copied().sum();
                self.accum(adj, *a, |da| {
                    for ((d, g), yi) in da.iter_mut().zip(dy).zip(&y) {
                        *d += *g - yi.exp() * total;
                    }
                });
            }
            Op::Lookup { table, index } => {
                let cols = self.nodes[table.0].tensor.shape()[1];
                let start = index * cols;
                self.accum(adj, *table, |dt| {
                    for (i, g) in dy.iter().enumerate() {
                        dt[start + i] += *g;
                    }
                });
            }
            Op::Sum { a } => {
                let g = dy[0];
                self.accum(adj, *a, |da| {
                    for d in da.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::Mean { a } => {
                let n = F::from_f64(self.nodes[a.0].tensor.len() as f64);
                let g = dy[0] / n;
                self.accum(adj, *a, |da| {
                    for d in da.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::SquaredError { a, b } => {
                let g = dy[0];
                let diff: Vec<F> = self.nodes[a.0]
                    .tensor
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].tensor.data())
                    .map(|(x, y)| *x - *y)
                    .collect();
                self.accum(adj, *a, |da| {
                    for (d, df) in da.iter_mut().zip(&diff) {
                        *d += two * *df * g;
                    }
                });
                self.accum(adj, *b, |db| {
                    for (d, df) in db.iter_mut().zip(&diff) {
                        *d -= two * *df * g;
                    }
                });
            }
        }
    }
}

#[inline]
fn softmax_row<F: Real>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
