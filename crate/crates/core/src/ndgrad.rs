//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The engine is a define-by-run tape: a [`Graph`] records every operation
//! as it executes, storing forward values; [`Graph::backward`] then walks
//! the tape once in reverse, accumulating gradients. Graphs are cheap and
//! are rebuilt for every forward pass.
//!
//! Design points:
//!
//! * Everything is `f64`. Tensors are at most 2-D (`rows × cols`); scalars
//!   are `1 × 1`. The only broadcast is a `1 × m` row vector added to an
//!   `n × m` matrix (bias addition).
//! * Gradients accumulate: a node consumed twice receives the sum of both
//!   consumers' contributions, and calling `backward` twice without
//!   [`Graph::zero_grads`] accumulates into the existing gradients.
//! * ReLU, `|x|` and `clamp_min` use subgradient 0 at their kinks.
//! * Softmax and sigmoid are evaluated in numerically stabilised form.
//! * Determinism: identical inputs give bit-identical values and gradients,
//!   with or without the `parallel` feature (large matrix products fan rows
//!   out over threads, but each output row is produced by exactly one task
//!   with a fixed summation order).

use crate::error::Error;
use crate::parallel::par_rows;
use crate::Result;

// ───────────────────────────── tensors ─────────────────────────────

/// A dense `rows × cols` matrix of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from row-major data; the length must be `rows * cols`.
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "Tensor::from_data",
                detail: format!("{rows}x{cols} != data length {}", data.len()),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            requires_grad: false,
        })
    }

    /// All-zero tensor.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            requires_grad: false,
        }
    }

    /// `1 × 1` scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
            requires_grad: false,
        }
    }

    /// `1 × m` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
            requires_grad: false,
        }
    }

    /// Mark the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Shape as `[rows, cols]`.
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ───────────────────────────── the tape ─────────────────────────────

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// Same-shape addition, or rhs broadcast as a `1 × m` row vector.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ClampMin(NodeId, f64),
    Abs(NodeId),
    SumAll(NodeId),
    ConcatCols(NodeId, NodeId),
    /// Forward: row-wise one-hot argmax. Backward: identity (straight-through).
    StraightThrough(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Define-by-run tape. Records forward values; `backward` fills gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Below this `rows*inner*cols` product a matrix multiply stays on one
/// thread; the crossover where fan-out pays for itself.
const PAR_MATMUL_WORK: usize = 1 << 15;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, rg: bool) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            data,
            requires_grad: rg,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Insert a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad;
        self.push(Op::Leaf, t.rows, t.cols, t.data, rg)
    }

    /// Insert a non-differentiable leaf (inputs, noise draws, …).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t.rows, t.cols, t.data, false)
    }

    /// Insert a differentiable leaf by cloning a parameter tensor.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.rows, t.cols, t.data.clone(), true)
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.node(id).rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.node(id).cols
    }

    /// Forward value of a node.
    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    /// Forward value as an owned tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor {
            rows: n.rows,
            cols: n.cols,
            data: n.data.clone(),
            requires_grad: false,
        }
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any
    /// was accumulated.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Clear all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ───────────────────────── forward operations ─────────────────────────

    /// Matrix product `a @ b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{m}x{k} @ {k2}x{n}"),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::MatMul(a, b), m, n, out, rg))
    }

    /// Elementwise `a + b`; `b` may be a `1 × m` row vector broadcast over
    /// the rows of an `n × m` matrix.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        let broadcast = br == 1 && ar > 1 && bc == ac;
        if !broadcast && (ar != br || ac != bc) {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{ar}x{ac} + {br}x{bc}"),
            });
        }
        let bd = self.data(b);
        let out: Vec<f64> = if broadcast {
            self.data(a)
                .chunks_exact(ac)
                .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
                .collect()
        } else {
            self.data(a).iter().zip(bd).map(|(x, y)| x + y).collect()
        };
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Add(a, b), ar, ac, out, rg))
    }

    /// Elementwise `a - b` (same shape).
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Sub(a, b), self.rows(a), self.cols(a), out, rg))
    }

    /// Elementwise (Hadamard) product `a ⊙ b` (same shape).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Mul(a, b), self.rows(a), self.cols(a), out, rg))
    }

    /// Elementwise `exp`.
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.exp()).collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Exp(a), self.rows(a), self.cols(a), out, rg))
    }

    /// Elementwise natural log; any non-positive entry is a domain error.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.data(a).iter().find(|v| **v <= 0.0) {
            return Err(Error::numerical(format!(
                "log of non-positive input ({bad})"
            )));
        }
        let out: Vec<f64> = self.data(a).iter().map(|x| x.ln()).collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Log(a), self.rows(a), self.cols(a), out, rg))
    }

    /// Elementwise `max(x, 0)`; subgradient 0 at 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Relu(a), self.rows(a), self.cols(a), out, rg))
    }

    /// Elementwise logistic sigmoid, evaluated in stabilised form.
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Sigmoid(a), self.rows(a), self.cols(a), out, rg))
    }

    /// Row-wise softmax of a 2-D node, stabilised by subtracting each
    /// row's maximum before exponentiation.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if c == 0 {
            return Err(Error::Shape {
                op: "softmax_rows",
                detail: "zero columns".into(),
            });
        }
        let mut out = vec![0.0; r * c];
        for (orow, irow) in out.chunks_exact_mut(c).zip(self.data(a).chunks_exact(c)) {
            let mx = irow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, x) in orow.iter_mut().zip(irow) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::SoftmaxRows(a), r, c, out, rg))
    }

    /// Multiply every element by the scalar `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|x| c * x).collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Scale(a, c), self.rows(a), self.cols(a), out, rg))
    }

    /// Add the scalar `c` to every element.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::AddScalar(a), self.rows(a), self.cols(a), out, rg))
    }

    /// Elementwise `max(x, c)`; subgradient 0 where `x <= c`.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.max(c)).collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::ClampMin(a, c), self.rows(a), self.cols(a), out, rg))
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.abs()).collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Abs(a), self.rows(a), self.cols(a), out, rg))
    }

    /// Sum of all elements, as a `1 × 1` node.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::SumAll(a), 1, 1, vec![s], rg))
    }

    /// Concatenate two nodes column-wise: `n × a` ++ `n × b` → `n × (a+b)`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        if ar != br {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: format!("{ar}x{ac} ++ {br}x{bc}"),
            });
        }
        let mut out = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            out.extend_from_slice(&self.data(a)[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&self.data(b)[i * bc..(i + 1) * bc]);
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::ConcatCols(a, b), ar, ac + bc, out, rg))
    }

    /// Straight-through estimator: forward value is the row-wise one-hot
    /// argmax of `a` (ties to the lowest index); the backward pass treats
    /// the op as identity.
    pub fn straight_through(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if c == 0 {
            return Err(Error::Shape {
                op: "straight_through",
                detail: "zero columns".into(),
            });
        }
        let mut out = vec![0.0; r * c];
        for (orow, irow) in out.chunks_exact_mut(c).zip(self.data(a).chunks_exact(c)) {
            orow[argmax(irow)] = 1.0;
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::StraightThrough(a), r, c, out, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.rows(a) != self.rows(b) || self.cols(a) != self.cols(b) {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows(a),
                    self.cols(a),
                    self.rows(b),
                    self.cols(b)
                ),
            });
        }
        Ok(())
    }

    // ───────────────────────── backward pass ─────────────────────────

    /// Reverse-mode sweep from the scalar node `loss`. Each call runs an
    /// independent sweep and adds its result into any gradients already
    /// stored, so two calls yield exactly twice the gradient of one; call
    /// [`Graph::zero_grads`] between unrelated backward passes.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got {}x{}",
                    self.rows(loss),
                    self.cols(loss)
                ),
            });
        }
        // This sweep's gradients live in a workspace and merge into the
        // persistent store only at the end, keeping repeat calls additive.
        let mut work: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(vec![1.0]); // d(loss)/d(loss)

        // The tape is in topological order (inputs precede outputs), so a
        // single reverse walk visits each node exactly once with its
        // gradient complete.
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = work[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut work);
            match &mut self.grads[idx] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Route the output gradient `g` of node `idx` to its inputs.
    fn propagate(&self, idx: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.rows(a), self.cols(a));
                let n = self.cols(b);
                if self.wants_grad(a) {
                    // dA = dC @ B^T
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, self.data(b), m, n, k, &mut da);
                    acc(work, a, &da);
                }
                if self.wants_grad(b) {
                    // dB = A^T @ dC
                    let mut db = vec![0.0; k * n];
                    matmul_tn(self.data(a), g, m, k, n, &mut db);
                    acc(work, b, &db);
                }
            }
            Op::Add(a, b) => {
                if self.wants_grad(a) {
                    acc(work, a, g);
                }
                if self.wants_grad(b) {
                    let (br, bc) = (self.rows(b), self.cols(b));
                    if br == 1 && self.rows(a) > 1 {
                        // Broadcast bias: gradient is the column sum.
                        let mut db = vec![0.0; bc];
                        for row in g.chunks_exact(bc) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        acc(work, b, &db);
                    } else {
                        acc(work, b, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants_grad(a) {
                    acc(work, a, g);
                }
                if self.wants_grad(b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(work, b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants_grad(a) {
                    let da: Vec<f64> = g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
                    acc(work, a, &da);
                }
                if self.wants_grad(b) {
                    let db: Vec<f64> = g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect();
                    acc(work, b, &db);
                }
            }
            Op::Exp(a) => {
                if self.wants_grad(a) {
                    // d/dx exp(x) = exp(x), reusing the stored forward value.
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].data)
                        .map(|(x, y)| x * y)
                        .collect();
                    acc(work, a, &da);
                }
            }
            Op::Log(a) => {
                if self.wants_grad(a) {
                    let da: Vec<f64> = g.iter().zip(self.data(a)).map(|(x, y)| x / y).collect();
                    acc(work, a, &da);
                }
            }
            Op::Relu(a) => {
                if self.wants_grad(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                        .collect();
                    acc(work, a, &da);
                }
            }
            Op::Sigmoid(a) => {
                if self.wants_grad(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].data)
                        .map(|(x, s)| x * s * (1.0 - s))
                        .collect();
                    acc(work, a, &da);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants_grad(a) {
                    let c = self.cols(a);
                    let s = &self.nodes[idx].data;
                    let mut da = vec![0.0; g.len()];
                    for ((drow, grow), srow) in da
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(s.chunks_exact(c))
                    {
                        let dot: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                        for ((d, gv), sv) in drow.iter_mut().zip(grow).zip(srow) {
                            *d = sv * (gv - dot);
                        }
                    }
                    acc(work, a, &da);
                }
            }
            Op::Scale(a, c) => {
                if self.wants_grad(a) {
                    let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                    acc(work, a, &da);
                }
            }
            Op::AddScalar(a) => {
                if self.wants_grad(a) {
                    acc(work, a, g);
                }
            }
            Op::ClampMin(a, c) => {
                if self.wants_grad(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(x, y)| if *y > c { *x } else { 0.0 })
                        .collect();
                    acc(work, a, &da);
                }
            }
            Op::Abs(a) => {
                if self.wants_grad(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(x, y)| {
                            if *y > 0.0 {
                                *x
                            } else if *y < 0.0 {
                                -*x
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(work, a, &da);
                }
            }
            Op::SumAll(a) => {
                if self.wants_grad(a) {
                    let da = vec![g[0]; self.nodes[a.0].data.len()];
                    acc(work, a, &da);
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.cols(a);
                let bc = self.cols(b);
                let rows = self.rows(a);
                if self.wants_grad(a) {
                    let mut da = Vec::with_capacity(rows * ac);
                    for i in 0..rows {
                        da.extend_from_slice(&g[i * (ac + bc)..i * (ac + bc) + ac]);
                    }
                    acc(work, a, &da);
                }
                if self.wants_grad(b) {
                    let mut db = Vec::with_capacity(rows * bc);
                    for i in 0..rows {
                        db.extend_from_slice(&g[i * (ac + bc) + ac..(i + 1) * (ac + bc)]);
                    }
                    acc(work, b, &db);
                }
            }
            Op::StraightThrough(a) => {
                if self.wants_grad(a) {
                    acc(work, a, g);
                }
            }
        }
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

}

/// Add `contribution` into the sweep workspace slot for `id`.
fn acc(work: &mut [Option<Vec<f64>>], id: NodeId, contribution: &[f64]) {
    match &mut work[id.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        slot => *slot = Some(contribution.to_vec()),
    }
}

/// Index of the maximum element; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

// ───────────────────────── matrix kernels ─────────────────────────
//
// Three layouts cover forward and both backward products. Each output row
// is produced by exactly one task with a fixed inner summation order, so
// results are bit-identical across thread counts and with the sequential
// build. Zero multiplicands are skipped: with finite inputs `0 * x`
// contributes exactly zero, and ReLU activations make zeros common.

/// `out[m×n] = a[m×k] @ b[k×n]`; `out` must be zeroed.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let work = m * k * n;
    let fill = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if work >= PAR_MATMUL_WORK {
        par_rows(out, n, fill);
    } else {
        for i in 0..m {
            fill(i, &mut out[i * n..(i + 1) * n]);
        }
    }
}

/// `out[m×k] = a[m×n] @ b[k×n]^T`; `out` must be zeroed.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    let work = m * k * n;
    let fill = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if work >= PAR_MATMUL_WORK {
        par_rows(out, k, fill);
    } else {
        for i in 0..m {
            fill(i, &mut out[i * k..(i + 1) * k]);
        }
    }
}

/// `out[k×n] = a[m×k]^T @ b[m×n]`; `out` must be zeroed.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let work = m * k * n;
    let fill = |p: usize, orow: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if work >= PAR_MATMUL_WORK {
        par_rows(out, n, fill);
    } else {
        for p in 0..k {
            fill(p, &mut out[p * n..(p + 1) * n]);
        }
    }
}
