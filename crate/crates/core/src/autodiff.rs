//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! The design is a classic Wengert tape: every operation appends a node
//! holding its forward value and enough bookkeeping to run the vector–
//! Jacobian product later. Node ids are indices into the tape, so creation
//! order *is* topological order and [`Tape::backward`] is a single reverse
//! sweep.
//!
//! Gradient contract: each node owns a persistent gradient buffer of the
//! same shape as its value. `backward` computes the adjoints of one sweep
//! into scratch storage and then **adds** them into the persistent buffers,
//! so running `backward` twice doubles every gradient. Call
//! [`Tape::zero_grads`] between uses that should not accumulate.
//!
//! The op set is exactly what the models in this crate need — no
//! broadcasting rules, no views, no rank polymorphism. Every constructor
//! validates shapes eagerly and reports both offending shapes on error.

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Numerical floor used when clamping probabilities inside the fused
/// binary-cross-entropy op: probabilities are clamped to
/// `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input or parameter; no backward rule.
    Leaf,
    /// `a · b`.
    Matmul(NodeId, NodeId),
    /// `xᵀ`.
    Transpose(NodeId),
    /// Element-wise `a + b`, same shapes.
    Add(NodeId, NodeId),
    /// `x + bias` where `bias` is 1×cols, broadcast over rows.
    AddRowBias(NodeId, NodeId),
    /// Element-wise `max(x, 0)`.
    Relu(NodeId),
    /// Element-wise logistic function.
    Sigmoid(NodeId),
    /// Row-wise `softmax(x / scale)`.
    SoftmaxRows { x: NodeId, scale: f64 },
    /// Horizontal concatenation of same-height parts.
    ConcatCols(Vec<NodeId>),
    /// Same data, different shape.
    Reshape(NodeId),
    /// 1×cols mean over rows.
    MeanRows(NodeId),
    /// Row gather; duplicate indices allowed (gradients accumulate).
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// `out[i, j] = x[i, j] * gate[i, 0]` with `gate` of shape rows×1.
    RowScale { x: NodeId, gate: NodeId },
    /// `c * x` for a compile-time-constant scalar.
    ScaleConst { x: NodeId, c: f64 },
    /// 1×1 sum of all entries.
    SumAll(NodeId),
    /// 1×1 mean binary cross entropy of probabilities vs. constant targets.
    BceMean { probs: NodeId, targets: Tensor2 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor2,
    grad: Tensor2,
}

/// A Wengert tape: append-only list of nodes in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node (zeros until a backward sweep
    /// reaches it).
    pub fn grad(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].grad
    }

    /// Reset every persistent gradient buffer to zero.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            for g in node.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    fn push(&mut self, op: Op, value: Tensor2) -> NodeId {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.nodes.push(Node { op, value, grad });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId, what: &str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "{what}: node id {} does not exist on this tape (len {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    // ── node constructors ──────────────────────────────────────────────

    /// Record an input or parameter leaf.
    pub fn leaf(&mut self, value: Tensor2) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul lhs")?;
        self.check(b, "matmul rhs")?;
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    /// `xᵀ`.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "transpose")?;
        let value = self.nodes[x.0].value.transpose();
        Ok(self.push(Op::Transpose(x), value))
    }

    /// Element-wise sum of two same-shaped nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "add lhs")?;
        self.check(b, "add rhs")?;
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Broadcast a 1×cols bias over every row of `x`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(x, "add_row_bias input")?;
        self.check(bias, "add_row_bias bias")?;
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape(format!(
                "add_row_bias: input is {}x{} but bias is {}x{} (want 1x{})",
                xv.rows(),
                xv.cols(),
                bv.rows(),
                bv.cols(),
                xv.cols()
            )));
        }
        let mut value = xv.clone();
        let cols = value.cols();
        for i in 0..value.rows() {
            for j in 0..cols {
                let v = value.get(i, j) + bv.get(0, j);
                value.set(i, j, v);
            }
        }
        Ok(self.push(Op::AddRowBias(x, bias), value))
    }

    /// Element-wise `max(x, 0)`.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "relu")?;
        let value = self.nodes[x.0].value.map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(Op::Relu(x), value))
    }

    /// Element-wise logistic function, computed in the numerically stable
    /// two-branch form so large |x| saturates without producing NaN.
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "sigmoid")?;
        let value = self.nodes[x.0].value.map(stable_sigmoid);
        Ok(self.push(Op::Sigmoid(x), value))
    }

    /// Row-wise `softmax(x / scale)`; `scale` must be positive and finite.
    ///
    /// Each row has its maximum subtracted before exponentiation, so rows
    /// that differ by millions still produce finite, row-stochastic output.
    pub fn softmax_rows(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        self.check(x, "softmax_rows")?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!(
                "softmax_rows: scale must be positive and finite, got {scale}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        if xv.cols() == 0 {
            return Err(Error::Shape("softmax_rows: zero-width input".into()));
        }
        let mut value = Tensor2::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            let row = xv.row_slice(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / scale));
            let mut sum = 0.0;
            let mut exps = vec![0.0; row.len()];
            for (e, &v) in exps.iter_mut().zip(row) {
                *e = (v / scale - max).exp();
                sum += *e;
            }
            for (j, e) in exps.iter().enumerate() {
                value.set(i, j, e / sum);
            }
        }
        Ok(self.push(Op::SoftmaxRows { x, scale }, value))
    }

    /// Concatenate parts left-to-right; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no parts given".into()));
        }
        for &p in parts {
            self.check(p, "concat_cols part")?;
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: part is {}x{} but first part has {} rows",
                    v.rows(),
                    v.cols(),
                    rows
                )));
            }
            cols += v.cols();
        }
        let mut value = Tensor2::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..rows {
                for j in 0..v.cols() {
                    value.set(i, offset + j, v.get(i, j));
                }
            }
            offset += v.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// View the same elements under a new shape.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.check(x, "reshape")?;
        let value = self.nodes[x.0].value.reshaped(rows, cols)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// 1×cols mean over the rows of `x`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "mean_rows")?;
        let xv = &self.nodes[x.0].value;
        if xv.rows() == 0 {
            return Err(Error::Shape("mean_rows: zero-row input".into()));
        }
        let mut value = Tensor2::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for j in 0..xv.cols() {
                value.set(0, j, value.get(0, j) + xv.get(i, j));
            }
        }
        let inv = 1.0 / xv.rows() as f64;
        for j in 0..xv.cols() {
            value.set(0, j, value.get(0, j) * inv);
        }
        Ok(self.push(Op::MeanRows(x), value))
    }

    /// Gather rows of `x` by index, in the given order. Indices may repeat;
    /// their gradient contributions accumulate on the shared source row.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check(x, "gather_rows")?;
        let xv = &self.nodes[x.0].value;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows: empty index list".into()));
        }
        for &i in idx {
            if i >= xv.rows() {
                return Err(Error::Contract(format!(
                    "gather_rows: index {} out of range for {} rows",
                    i,
                    xv.rows()
                )));
            }
        }
        let mut value = Tensor2::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..xv.cols() {
                value.set(r, j, xv.get(i, j));
            }
        }
        Ok(self.push(Op::GatherRows { x, idx: idx.to_vec() }, value))
    }

    /// Scale row `i` of `x` by `gate[i, 0]`; `gate` must be rows×1.
    pub fn row_scale(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        self.check(x, "row_scale input")?;
        self.check(gate, "row_scale gate")?;
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gate.0].value;
        if gv.cols() != 1 || gv.rows() != xv.rows() {
            return Err(Error::Shape(format!(
                "row_scale: input is {}x{} but gate is {}x{} (want {}x1)",
                xv.rows(),
                xv.cols(),
                gv.rows(),
                gv.cols(),
                xv.rows()
            )));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            let g = gv.get(i, 0);
            for j in 0..value.cols() {
                value.set(i, j, value.get(i, j) * g);
            }
        }
        Ok(self.push(Op::RowScale { x, gate }, value))
    }

    /// Multiply by a constant scalar (the constant is not differentiated).
    pub fn scale_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check(x, "scale_const")?;
        if !c.is_finite() {
            return Err(Error::Config(format!("scale_const: constant must be finite, got {c}")));
        }
        let value = self.nodes[x.0].value.map(|v| c * v);
        Ok(self.push(Op::ScaleConst { x, c }, value))
    }

    /// 1×1 sum of every entry.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "sum_all")?;
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        Ok(self.push(Op::SumAll(x), Tensor2::scalar(total)))
    }

    /// Mean binary cross entropy of `probs` against constant `targets`,
    /// with probabilities clamped to `[BCE_EPS, 1 - BCE_EPS]`:
    ///
    /// `L = -(1/N) Σ [ y·ln(p) + (1-y)·ln(1-p) ]`, `N` = element count.
    pub fn bce_mean(&mut self, probs: NodeId, targets: Tensor2) -> Result<NodeId> {
        self.check(probs, "bce_mean probs")?;
        let pv = &self.nodes[probs.0].value;
        if pv.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "bce_mean: probs are {}x{} but targets are {}x{}",
                pv.rows(),
                pv.cols(),
                targets.rows(),
                targets.cols()
            )));
        }
        if pv.is_empty() {
            return Err(Error::Shape("bce_mean: empty input".into()));
        }
        let n = pv.len() as f64;
        let mut total = 0.0;
        for (&p, &y) in pv.data().iter().zip(targets.data()) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        Ok(self.push(Op::BceMean { probs, targets }, Tensor2::scalar(total / n)))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar (1×1) loss node.
    ///
    /// The adjoints of this sweep are accumulated (`+=`) into each node's
    /// persistent gradient buffer; nodes the loss does not reach receive
    /// exactly zero contribution.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss, "backward root")?;
        if self.nodes[loss.0].value.shape() != (1, 1) {
            let (r, c) = self.nodes[loss.0].value.shape();
            return Err(Error::Contract(format!(
                "backward: loss must be a 1x1 scalar, got {r}x{c}"
            )));
        }

        // Scratch adjoints for this sweep only.
        let mut adj: Vec<Tensor2> = self
            .nodes
            .iter()
            .map(|n| Tensor2::zeros(n.value.rows(), n.value.cols()))
            .collect();
        adj[loss.0].data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            // Take this node's adjoint out so we can mutate others freely.
            let g = std::mem::replace(&mut adj[i], Tensor2::zeros(0, 0));
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    adj[a.0].add_matmul_nt_assign(&g, &self.nodes[b.0].value)?;
                    adj[b.0].add_matmul_tn_assign(&self.nodes[a.0].value, &g)?;
                }
                Op::Transpose(x) => {
                    adj[x.0].add_assign(&g.transpose())?;
                }
                Op::Add(a, b) => {
                    adj[a.0].add_assign(&g)?;
                    adj[b.0].add_assign(&g)?;
                }
                Op::AddRowBias(x, bias) => {
                    adj[x.0].add_assign(&g)?;
                    let cols = g.cols();
                    let gb = adj[bias.0].data_mut();
                    for r in 0..g.rows() {
                        for j in 0..cols {
                            gb[j] += g.get(r, j);
                        }
                    }
                }
                Op::Relu(x) => {
                    // Subgradient choice at 0: derivative 0.
                    let dx = self.nodes[x.0].value.zip_map(&g, |v, gv| {
                        if v > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    })?;
                    adj[x.0].add_assign(&dx)?;
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    let dx = y.zip_map(&g, |yv, gv| gv * yv * (1.0 - yv))?;
                    adj[x.0].add_assign(&dx)?;
                }
                Op::SoftmaxRows { x, scale } => {
                    // d/dx softmax(x/s): per row, (y ⊙ (g - <g,y>)) / s.
                    let y = &self.nodes[i].value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let mut dot = 0.0;
                        for j in 0..y.cols() {
                            dot += g.get(r, j) * y.get(r, j);
                        }
                        for j in 0..y.cols() {
                            dx.set(r, j, y.get(r, j) * (g.get(r, j) - dot) / scale);
                        }
                    }
                    adj[x.0].add_assign(&dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        let rows = self.nodes[p.0].value.rows();
                        let mut slice = Tensor2::zeros(rows, pc);
                        for r in 0..rows {
                            for j in 0..pc {
                                slice.set(r, j, g.get(r, offset + j));
                            }
                        }
                        adj[p.0].add_assign(&slice)?;
                        offset += pc;
                    }
                }
                Op::Reshape(x) => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    adj[x.0].add_assign(&g.reshaped(r, c)?)?;
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let inv = 1.0 / rows as f64;
                    let dx = Tensor2::from_fn(rows, cols, |_, j| g.get(0, j) * inv);
                    adj[x.0].add_assign(&dx)?;
                }
                Op::GatherRows { x, idx } => {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let mut dx = Tensor2::zeros(rows, cols);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            dx.set(src, j, dx.get(src, j) + g.get(r, j));
                        }
                    }
                    adj[x.0].add_assign(&dx)?;
                }
                Op::RowScale { x, gate } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gate.0].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    let mut dgate = Tensor2::zeros(xv.rows(), 1);
                    for r in 0..xv.rows() {
                        let gr = gv.get(r, 0);
                        let mut acc = 0.0;
                        for j in 0..xv.cols() {
                            dx.set(r, j, g.get(r, j) * gr);
                            acc += g.get(r, j) * xv.get(r, j);
                        }
                        dgate.set(r, 0, acc);
                    }
                    adj[x.0].add_assign(&dx)?;
                    adj[gate.0].add_assign(&dgate)?;
                }
                Op::ScaleConst { x, c } => {
                    adj[x.0].add_scaled_assign(&g, c)?;
                }
                Op::SumAll(x) => {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let g0 = g.get(0, 0);
                    let dx = Tensor2::from_fn(rows, cols, |_, _| g0);
                    adj[x.0].add_assign(&dx)?;
                }
                Op::BceMean { probs, targets } => {
                    // dL/dp = -(1/N)(y/p - (1-y)/(1-p)) evaluated at the
                    // clamped probability; the clamp itself is treated as
                    // the identity for gradient purposes.
                    let pv = &self.nodes[probs.0].value;
                    let n = pv.len() as f64;
                    let g0 = g.get(0, 0);
                    let dp = pv.zip_map(&targets, |p, y| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        -g0 / n * (y / p - (1.0 - y) / (1.0 - p))
                    })?;
                    adj[probs.0].add_assign(&dp)?;
                }
            }
            // Fold this sweep's adjoint into the persistent buffer.
            self.nodes[i].grad.add_assign(&g)?;
        }
        // Nodes after the loss keep their (zero-contribution) adjoints too.
        for i in loss.0 + 1..self.nodes.len() {
            let g = std::mem::replace(&mut adj[i], Tensor2::zeros(0, 0));
            self.nodes[i].grad.add_assign(&g)?;
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
///
/// For very negative inputs the true value underflows f64 entirely
/// (σ(-1000) ≈ 5e-435), so the result saturates at 0.0; it is never NaN
/// and never overflows.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── gradient checking ──────────────────────────────────────────────────

/// Outcome of checking one named parameter.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// Largest relative error over the parameter's elements.
    pub max_rel_err: f64,
    /// Largest absolute error over the parameter's elements.
    pub max_abs_err: f64,
    pub pass: bool,
}

/// Result of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub pass: bool,
}

impl GradCheckReport {
    /// Names of parameters that failed, for error messages.
    pub fn failures(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.pass).map(|e| e.name.as_str()).collect()
    }

    /// Largest relative error across all parameters (0 for empty reports).
    pub fn worst_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Denominator floor for relative error so that near-zero true gradients
/// are compared absolutely at this scale instead of amplifying finite-
/// difference noise (central differences at step 1e-5 carry ~1e-10 of
/// truncation + roundoff error).
const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Check analytic gradients of an arbitrary scalar-valued graph against
/// central finite differences.
///
/// `build` must deterministically construct the graph on the given tape
/// from the supplied parameter leaves (one per entry of `params`, in
/// order) and return the scalar loss node. It is invoked once for the
/// analytic pass and twice per parameter element for the numeric pass.
pub fn grad_check<F>(
    build: F,
    params: &[(String, Tensor2)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!("grad_check: step must be positive, got {step}")));
    }

    // Analytic gradients from one tape.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(Error::Contract("grad_check: build must return a scalar loss".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor2> = ids.iter().map(|&id| tape.grad(id).clone()).collect();

    // Numeric gradients, one central difference per parameter element.
    let eval = |perturbed: &[Tensor2]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|p| t.leaf(p.clone())).collect();
        let l = build(&mut t, &ids)?;
        t.value(l).item()
    };

    let base: Vec<Tensor2> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut numeric: Vec<Tensor2> = base
        .iter()
        .map(|t| Tensor2::zeros(t.rows(), t.cols()))
        .collect();
    for (pi, tensor) in base.iter().enumerate() {
        for e in 0..tensor.len() {
            let mut plus = base.clone();
            plus[pi].data_mut()[e] += step;
            let mut minus = base.clone();
            minus[pi].data_mut()[e] -= step;
            let d = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            numeric[pi].data_mut()[e] = d;
        }
    }

    let named: Vec<(String, Tensor2, Tensor2)> = params
        .iter()
        .zip(analytic)
        .zip(numeric)
        .map(|(((name, _), a), n)| (name.clone(), a, n))
        .collect();
    Ok(compare_gradients(&named, tol))
}

/// Compare paired analytic/numeric gradients and build a report.
///
/// Exposed separately from [`grad_check`] so the comparison logic can be
/// exercised (and deliberately fed corrupted analytic gradients) on its own.
pub fn compare_gradients(named: &[(String, Tensor2, Tensor2)], tol: f64) -> GradCheckReport {
    let mut entries = Vec::with_capacity(named.len());
    for (name, analytic, numeric) in named {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            max_rel = max_rel.max(relative_error(a, n));
            max_abs = max_abs.max((a - n).abs());
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            pass: max_rel < tol,
        });
    }
    let pass = entries.iter().all(|e| e.pass);
    GradCheckReport { entries, pass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
        Tensor2::from_fn(rows, cols, |_, _| r.gen_range(-1.5..1.5))
    }

    /// FD-check a single-op graph over its named inputs.
    fn check_op<F>(seed: u64, shapes: &[(usize, usize)], build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        let mut r = rng(seed);
        let params: Vec<(String, Tensor2)> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(rows, cols))| (format!("p{i}"), rand_tensor(&mut r, rows, cols)))
            .collect();
        let report = grad_check(&build, &params, 1e-5, 1e-4).unwrap();
        assert!(
            report.pass,
            "failed params {:?}, worst rel err {:.3e}",
            report.failures(),
            report.worst_rel_err()
        );
    }

    #[test]
    fn matmul_gradients_match_fd() {
        for seed in 0..10 {
            check_op(seed, &[(3, 4), (4, 2)], |t, p| {
                let m = t.matmul(p[0], p[1])?;
                t.sum_all(m)
            });
        }
    }

    #[test]
    fn transpose_gradients_match_fd() {
        check_op(7, &[(3, 5), (3, 2)], |t, p| {
            let xt = t.transpose(p[0])?; // 5x3
            let m = t.matmul(xt, p[1])?; // 5x2
            let s = t.sigmoid(m)?;
            t.sum_all(s)
        });
    }

    #[test]
    fn softmax_rows_gradients_match_fd() {
        for seed in 20..30 {
            check_op(seed, &[(4, 6), (6, 1)], |t, p| {
                let sm = t.softmax_rows(p[0], 1.7)?;
                let m = t.matmul(sm, p[1])?;
                t.sum_all(m)
            });
        }
    }

    #[test]
    fn sigmoid_bce_gradients_match_fd() {
        let targets = Tensor2::from_vec(1, 5, vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        for seed in 40..50 {
            let tg = targets.clone();
            check_op(seed, &[(1, 5)], move |t, p| {
                let s = t.sigmoid(p[0])?;
                t.bce_mean(s, tg.clone())
            });
        }
    }

    #[test]
    fn concat_relu_bias_gradients_match_fd() {
        check_op(60, &[(3, 2), (3, 3), (1, 5)], |t, p| {
            let c = t.concat_cols(&[p[0], p[1]])?;
            let b = t.add_row_bias(c, p[2])?;
            let r = t.relu(b)?;
            t.sum_all(r)
        });
    }

    #[test]
    fn gather_row_scale_mean_gradients_match_fd() {
        check_op(70, &[(5, 4), (3, 1)], |t, p| {
            let g = t.gather_rows(p[0], &[4, 0, 4])?; // duplicates on purpose
            let scaled = t.row_scale(g, p[1])?;
            let pooled = t.mean_rows(scaled)?;
            let s = t.sigmoid(pooled)?;
            t.sum_all(s)
        });
    }

    #[test]
    fn reshape_scale_add_gradients_match_fd() {
        check_op(80, &[(2, 6), (3, 4)], |t, p| {
            let r = t.reshape(p[0], 3, 4)?;
            let a = t.add(r, p[1])?;
            let s = t.scale_const(a, -2.25)?;
            let sg = t.sigmoid(s)?;
            t.sum_all(sg)
        });
    }

    #[test]
    fn softmax_rows_are_stochastic_even_for_extreme_inputs() {
        let mut t = Tape::new();
        let x = t.leaf(
            Tensor2::from_vec(2, 3, vec![1e6, 0.0, -1e6, 3.0, 3.0, 3.0]).unwrap(),
        );
        let sm = t.softmax_rows(x, 1.0).unwrap();
        let v = t.value(sm);
        assert!(v.all_finite());
        for i in 0..2 {
            let sum: f64 = v.row_slice(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
        }
        // The dominant entry saturates to 1.
        assert!((v.get(0, 0) - 1.0).abs() < 1e-12);
        // A constant row is exactly uniform.
        assert!((v.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor2::from_vec(1, 2, vec![-1000.0, 1000.0]).unwrap());
        let s = t.sigmoid(x).unwrap();
        let v = t.value(s);
        assert!(v.all_finite());
        assert!(v.get(0, 0) >= 0.0 && v.get(0, 0) <= 1e-300);
        assert!((v.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor2::from_vec(2, 2, vec![0.3, -0.7, 1.1, 0.4]).unwrap());
        let w = t.leaf(Tensor2::from_vec(2, 2, vec![0.5, 0.2, -0.4, 0.9]).unwrap());
        let m = t.matmul(x, w).unwrap();
        let s = t.sigmoid(m).unwrap();
        let loss = t.sum_all(s).unwrap();

        t.backward(loss).unwrap();
        let once: Vec<f64> = t.grad(w).data().to_vec();
        t.backward(loss).unwrap();
        let twice: Vec<f64> = t.grad(w).data().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a, "accumulation must be an exact doubling");
        }

        t.zero_grads();
        assert!(t.grad(w).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unreachable_nodes_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor2::scalar(2.0));
        let orphan = t.leaf(Tensor2::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let orphan_t = t.transpose(orphan).unwrap();
        let orphan_sq = t.matmul(orphan, orphan_t).unwrap();
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).get(0, 0), 1.0);
        assert!(t.grad(orphan).data().iter().all(|&g| g == 0.0));
        assert!(t.grad(orphan_sq).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_roots() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor2::zeros(2, 3));
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor2::zeros(2, 3));
        let b = t.leaf(Tensor2::zeros(2, 3));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("2x3"), "{msg}");
        let bias = t.leaf(Tensor2::zeros(1, 4));
        let msg = t.add_row_bias(a, bias).unwrap_err().to_string();
        assert!(msg.contains("1x4") || msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn identical_graphs_are_bitwise_identical() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(Tensor2::from_fn(4, 4, |i, j| ((i * 4 + j) as f64).sin()));
            let w = t.leaf(Tensor2::from_fn(4, 4, |i, j| ((i + j) as f64).cos()));
            let m = t.matmul(x, w).unwrap();
            let sm = t.softmax_rows(m, 2.0).unwrap();
            let s = t.sum_all(sm).unwrap();
            t.backward(s).unwrap();
            (t.value(sm).data().to_vec(), t.grad(w).data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn grad_check_with_zero_params_is_vacuous() {
        let report = grad_check(
            |t, _| {
                let c = t.leaf(Tensor2::scalar(3.0));
                t.sum_all(c)
            },
            &[],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.entries.is_empty());
    }

    #[test]
    fn corrupted_gradient_is_reported_by_name() {
        // Build a correct analytic/numeric pair, then corrupt one analytic
        // entry; the comparison must fail and name the parameter.
        let w = Tensor2::from_vec(2, 2, vec![0.4, -0.2, 0.8, 0.1]).unwrap();
        let good = grad_check(
            |t, p| {
                let s = t.sigmoid(p[0])?;
                t.sum_all(s)
            },
            &[("weights".to_string(), w.clone())],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(good.pass);

        let mut t = Tape::new();
        let id = t.leaf(w.clone());
        let s = t.sigmoid(id).unwrap();
        let loss = t.sum_all(s).unwrap();
        t.backward(loss).unwrap();
        let mut corrupted = t.grad(id).clone();
        corrupted.data_mut()[2] += 0.5; // deliberate fault

        // Numeric side: reuse the analytic gradient as "numeric" truth.
        let numeric = t.grad(id).clone();
        let report = compare_gradients(
            &[("weights".to_string(), corrupted, numeric)],
            1e-4,
        );
        assert!(!report.pass);
        assert_eq!(report.failures(), vec!["weights"]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor2::zeros(3, 2));
        assert!(t.gather_rows(x, &[0, 3]).is_err());
        assert!(t.gather_rows(x, &[]).is_err());
    }

    #[test]
    fn foreign_node_ids_are_rejected() {
        let mut t1 = Tape::new();
        let a = t1.leaf(Tensor2::zeros(2, 2));
        let mut t2 = Tape::new();
        assert!(t2.matmul(a, a).is_err());
    }
}
