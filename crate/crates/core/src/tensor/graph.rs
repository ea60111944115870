use super::{matmul_nt_raw, matmul_tn_raw, transpose_raw, Result, Tensor, TensorError};

/// Epsilon added to the variance in [`Graph::layer_norm`].
pub const LN_EPS: f64 = 1e-5;
/// Lower bound applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction or normalization axis of a rank-2 value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along rows (reduces the row index).
    Rows,
    /// Along columns (reduces the column index).
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var, Axis),
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { x: Var, r0: usize, c0: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    MeanPool(Var, Axis),
    SegmentMean { x: Var, lengths: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDiv { p: Var, log_q: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is not on
    /// a differentiable path to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Tape of primitive operations in execution order.
///
/// Inputs always precede outputs because a node can only reference vars that
/// already exist. [`Graph::backward`] walks the tape once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape")),
    }
}

fn gelu_scalar(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

/// Index groups for a softmax or pooling along `axis` of an `r×c` matrix:
/// `(start, stride, count)` per group.
fn axis_groups(r: usize, c: usize, axis: Axis) -> Vec<(usize, usize, usize)> {
    match axis {
        Axis::Cols => (0..r).map(|i| (i * c, 1, c)).collect(),
        Axis::Rows => (0..c).map(|j| (j, c, r)).collect(),
    }
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

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.node(v)?;
        }
        Ok(())
    }

    /// Records a leaf. Gradients are only produced for leaves with
    /// `requires_grad` and for values derived from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn binary_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())?;
        Ok(self.push(out, Op::Scale(x, s), &[x]))
    }

    fn row_operand(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        self.check(&[x, row])?;
        let (tx, tr) = (self.value(x), self.value(row));
        let (r, c) = tx.dims2()?;
        if tr.len() != c || tr.rows() != 1 {
            return Err(shape_err(op, tx, tr));
        }
        Ok((r, c))
    }

    /// `x + row`, broadcasting a length-`c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("add_row", x, row)?;
        let (tx, tr) = (self.value(x), self.value(row));
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for (d, b) in data[i * c..(i + 1) * c].iter_mut().zip(tr.data()) {
                *d += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    /// `x ⊙ row`, broadcasting a length-`c` row over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("mul_row", x, row)?;
        let (tx, tr) = (self.value(x), self.value(row));
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for (d, b) in data[i * c..(i + 1) * c].iter_mut().zip(tr.data()) {
                *d *= b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulRow(x, row), &[x, row]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if c < 2 {
            return Err(TensorError::invalid(
                "layer_norm",
                "cannot normalize over a single element",
            ));
        }
        let mut data = vec![0.0; r * c];
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNorm { x, rstd: rstds }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut data = t.data().to_vec();
        for (start, stride, count) in axis_groups(r, c, axis) {
            let idx = |k: usize| start + k * stride;
            let max = (0..count).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..count {
                let e = (data[idx(k)] - max).exp();
                data[idx(k)] = e;
                total += e;
            }
            for k in 0..count {
                data[idx(k)] /= total;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_scalar(v).0).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Gelu(x), &[x]))
    }

    /// Rows of `table` selected by `ids`, as an `ids.len() × dim` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(&[table])?;
        let t = self.value(table);
        let (rows, dim) = t.dims2()?;
        if ids.is_empty() {
            return Err(TensorError::invalid("embedding", "empty id list"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::invalid(
                    "embedding",
                    format!("id {id} outside table of {rows} rows"),
                ));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), dim, data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenates rank-2 values. `Axis::Rows` stacks vertically.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        self.check(parts)?;
        let first = match parts.first() {
            Some(&v) => self.value(v),
            None => return Err(TensorError::invalid("concat", "nothing to concatenate")),
        };
        let (r0, c0) = first.dims2()?;
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = t.dims2()?;
                    if c != c0 {
                        return Err(shape_err("concat", first, t));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = t.dims2()?;
                    if r != r0 {
                        return Err(shape_err("concat", first, t));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Block `[r0, r0+rows) × [c0, c0+cols)` of a rank-2 value.
    pub fn slice(&mut self, x: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if rows == 0 || cols == 0 || r0 + rows > r || c0 + cols > c {
            return Err(TensorError::invalid(
                "slice",
                format!("block {rows}x{cols} at ({r0},{c0}) outside {r}x{c}"),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in r0..r0 + rows {
            data.extend_from_slice(&t.row(i)[c0..c0 + cols]);
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::Slice { x, r0, c0 }, &[x]))
    }

    /// Rows of `x` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(&[x])?;
        let r = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} outside {r} rows"),
            ));
        }
        // Shares the bounds checks and the backward rule of `embedding`.
        let v = self.embedding(x, idx)?;
        self.nodes[v.0].op = Op::GatherRows {
            x,
            idx: idx.to_vec(),
        };
        Ok(v)
    }

    /// Mean along `axis`, keeping a unit dimension.
    pub fn mean_pool(&mut self, x: Var, axis: Axis) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let groups = axis_groups(r, c, axis);
        let data: Vec<f64> = groups
            .iter()
            .map(|&(s, st, n)| (0..n).map(|k| t.data()[s + k * st]).sum::<f64>() / n as f64)
            .collect();
        let out = match axis {
            Axis::Rows => Tensor::matrix(1, c, data)?,
            Axis::Cols => Tensor::matrix(r, 1, data)?,
        };
        Ok(self.push(out, Op::MeanPool(x, axis), &[x]))
    }

    /// Mean over consecutive row segments of the given lengths.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if lengths.is_empty() || lengths.contains(&0) || lengths.iter().sum::<usize>() != r {
            return Err(TensorError::invalid(
                "segment_mean",
                format!("segments {lengths:?} do not tile {r} rows"),
            ));
        }
        let mut data = Vec::with_capacity(lengths.len() * c);
        let mut start = 0;
        for &len in lengths {
            let mut acc = vec![0.0; c];
            for i in start..start + len {
                for (a, v) in acc.iter_mut().zip(t.row(i)) {
                    *a += v;
                }
            }
            data.extend(acc.into_iter().map(|a| a / len as f64));
            start += len;
        }
        let out = Tensor::matrix(lengths.len(), c, data)?;
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                lengths: lengths.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(&[logits])?;
        let t = self.value(logits);
        let (r, c) = t.dims2()?;
        if labels.len() != r {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("{} labels for {r} rows", labels.len()),
            ));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::invalid(
                    "cross_entropy",
                    format!("label {label} outside {c} classes"),
                ));
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            loss += lse - row[label];
        }
        let out = Tensor::scalar(loss / r as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over rows of `KL(p_i ‖ q_i) = Σ_j p_ij (ln p_ij − ln q_ij)` with
    /// both logarithms floored at [`LOG_FLOOR`]. `q` is a fixed target.
    pub fn kl_div(&mut self, p: Var, q: &Tensor) -> Result<Var> {
        self.check(&[p])?;
        let tp = self.value(p);
        if tp.shape() != q.shape() {
            return Err(shape_err("kl_div", tp, q));
        }
        let rows = tp.rows();
        let log_q: Vec<f64> = q.data().iter().map(|v| v.max(LOG_FLOOR).ln()).collect();
        let total: f64 = tp
            .data()
            .iter()
            .zip(&log_q)
            .map(|(&pv, &lq)| pv * (pv.max(LOG_FLOOR).ln() - lq))
            .sum();
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(out, Op::KlDiv { p, log_q }, &[p]))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm below `eps`
    /// are divided by `eps` instead.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Reverse pass from a one-element `loss`. Consumes the tape: a second
    /// call fails with [`TensorError::Consumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::Consumed);
        }
        let loss_shape = self.node(loss)?.value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(loss_shape, vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            // Interior gradients are kept so callers can inspect them.
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(&mut grads[v.0], &shape_of(v), gd.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], &shape_of(*a), gd.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], &shape_of(*b), gd.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &shape_of(*a), d);
                }
                if wants(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &shape_of(*b), d);
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], &shape_of(*x), gd.iter().map(|v| v * s).collect());
                }
            }
            Op::AddRow(x, row) => {
                let (r, c) = g.dims2().expect("rank 2");
                if wants(*x) {
                    accumulate(&mut grads[x.0], &shape_of(*x), gd.to_vec());
                }
                if wants(*row) {
                    let mut d = vec![0.0; c];
                    for k in 0..r {
                        for (a, v) in d.iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[row.0], &shape_of(*row), d);
                }
            }
            Op::MulRow(x, row) => {
                let (r, c) = g.dims2().expect("rank 2");
                let (tx, tr) = (val(*x).data(), val(*row).data());
                if wants(*x) {
                    let d = (0..r * c).map(|k| gd[k] * tr[k % c]).collect();
                    accumulate(&mut grads[x.0], &shape_of(*x), d);
                }
                if wants(*row) {
                    let mut d = vec![0.0; c];
                    for k in 0..r * c {
                        d[k % c] += gd[k] * tx[k];
                    }
                    accumulate(&mut grads[row.0], &shape_of(*row), d);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("rank 2");
                let n = val(*b).cols();
                if wants(*a) {
                    let d = matmul_nt_raw(gd, val(*b).data(), m, n, k);
                    accumulate(&mut grads[a.0], &shape_of(*a), d);
                }
                if wants(*b) {
                    let d = matmul_tn_raw(val(*a).data(), gd, m, k, n);
                    accumulate(&mut grads[b.0], &shape_of(*b), d);
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = g.dims2().expect("rank 2");
                    accumulate(&mut grads[x.0], &shape_of(*x), transpose_raw(gd, r, c));
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], &shape_of(*x), gd.to_vec());
                }
            }
            Op::LayerNorm { x, rstd } => {
                if wants(*x) {
                    let (r, c) = g.dims2().expect("rank 2");
                    let y = node.value.data();
                    let mut d = vec![0.0; r * c];
                    for k in 0..r {
                        let gs = &gd[k * c..(k + 1) * c];
                        let ys = &y[k * c..(k + 1) * c];
                        let mg = gs.iter().sum::<f64>() / c as f64;
                        let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[k * c + j] = rstd[k] * (gs[j] - mg - ys[j] * mgy);
                        }
                    }
                    accumulate(&mut grads[x.0], &shape_of(*x), d);
                }
            }
            Op::Softmax(x, axis) => {
                if wants(*x) {
                    let (r, c) = g.dims2().expect("rank 2");
                    let y = node.value.data();
                    let mut d = vec![0.0; r * c];
                    for (s, st, n) in axis_groups(r, c, *axis) {
                        let dot: f64 = (0..n).map(|k| gd[s + k * st] * y[s + k * st]).sum();
                        for k in 0..n {
                            let at = s + k * st;
                            d[at] = y[at] * (gd[at] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], &shape_of(*x), d);
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let d = gd
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, &v)| g * gelu_scalar(v).1)
                        .collect();
                    accumulate(&mut grads[x.0], &shape_of(*x), d);
                }
            }
            Op::Embedding { table: src, ids } | Op::GatherRows { x: src, idx: ids } => {
                if wants(*src) {
                    let (rows, dim) = val(*src).dims2().expect("rank 2");
                    let mut d = vec![0.0; rows * dim];
                    for (k, &id) in ids.iter().enumerate() {
                        for (a, v) in d[id * dim..(id + 1) * dim].iter_mut().zip(&gd[k * dim..(k + 1) * dim]) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[src.0], &shape_of(*src), d);
                }
            }
            Op::Concat { parts, axis } => {
                let (_, total_c) = g.dims2().expect("rank 2");
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).dims2().expect("rank 2");
                    if wants(p) {
                        let d = match axis {
                            Axis::Rows => gd[offset * total_c..(offset + r) * total_c].to_vec(),
                            Axis::Cols => (0..r)
                                .flat_map(|k| gd[k * total_c + offset..k * total_c + offset + c].iter().copied())
                                .collect(),
                        };
                        accumulate(&mut grads[p.0], &shape_of(p), d);
                    }
                    offset += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            Op::Slice { x, r0, c0 } => {
                if wants(*x) {
                    let (_, c) = val(*x).dims2().expect("rank 2");
                    let (sr, sc) = g.dims2().expect("rank 2");
                    let mut d = vec![0.0; val(*x).len()];
                    for k in 0..sr {
                        let dst = (r0 + k) * c + c0;
                        d[dst..dst + sc].copy_from_slice(&gd[k * sc..(k + 1) * sc]);
                    }
                    accumulate(&mut grads[x.0], &shape_of(*x), d);
                }
            }
            Op::MeanPool(x, axis) => {
                if wants(*x) {
                    let (r, c) = val(*x).dims2().expect("rank 2");
                    let d = match axis {
                        Axis::Rows => (0..r * c).map(|k| gd[k % c] / r as f64).collect(),
                        Axis::Cols => (0..r * c).map(|k| gd[k / c] / c as f64).collect(),
                    };
                    accumulate(&mut grads[x.0], &shape_of(*x), d);
                }
            }
            Op::SegmentMean { x, lengths } => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let mut d = Vec::with_capacity(val(*x).len());
                    for (s, &len) in lengths.iter().enumerate() {
                        let gs = &gd[s * c..(s + 1) * c];
                        for _ in 0..len {
                            d.extend(gs.iter().map(|v| v / len as f64));
                        }
                    }
                    accumulate(&mut grads[x.0], &shape_of(*x), d);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    accumulate(&mut grads[x.0], &shape_of(*x), vec![gd[0]; n]);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let (r, c) = val(*logits).dims2().expect("rank 2");
                    let scale = gd[0] / r as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (k, &l) in labels.iter().enumerate() {
                        d[k * c + l] -= scale;
                    }
                    accumulate(&mut grads[logits.0], &shape_of(*logits), d);
                }
            }
            Op::KlDiv { p, log_q } => {
                if wants(*p) {
                    let rows = val(*p).rows();
                    let scale = gd[0] / rows as f64;
                    let d = val(*p)
                        .data()
                        .iter()
                        .zip(log_q)
                        .map(|(&pv, &lq)| {
                            let dlogp = if pv > LOG_FLOOR { pv.ln() + 1.0 } else { LOG_FLOOR.ln() };
                            scale * (dlogp - lq)
                        })
                        .collect();
                    accumulate(&mut grads[p.0], &shape_of(*p), d);
                }
            }
            Op::L2Normalize { x, norms } => {
                if wants(*x) {
                    let (r, c) = g.dims2().expect("rank 2");
                    let y = node.value.data();
                    let tx = val(*x).data();
                    let mut d = vec![0.0; r * c];
                    for k in 0..r {
                        let gs = &gd[k * c..(k + 1) * c];
                        let ys = &y[k * c..(k + 1) * c];
                        let raw_norm = tx[k * c..(k + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
                        if raw_norm >= norms[k] {
                            let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[k * c + j] = (gs[j] - ys[j] * dot) / norms[k];
                            }
                        } else {
                            for j in 0..c {
                                d[k * c + j] = gs[j] / norms[k];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &shape_of(*x), d);
                }
            }
        }
    }
}
