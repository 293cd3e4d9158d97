use crate::autodiff::batchnorm::{BatchNormState, BatchStats, BnMode};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    RowSoftmax { x: Var, tau: f64 },
    RowL2Normalize { x: Var, norms: Vec<f64> },
    ConcatRows(Var, Var),
    SelectRows { x: Var, indices: Vec<usize> },
    Transpose(Var),
    MeanAll(Var),
    SumAll(Var),
    ScalarMul(Var, f64),
    ElemMul(Var, Var),
    StopGradient,
    StraightThrough(Var),
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        gamma_value: Vec<f64>,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Forward values captured at the custom-gradient nodes of one graph
/// construction.
///
/// Replaying them turns the graph into an ordinary function whose true
/// derivative is what the custom backward rules compute: stop-gradient
/// outputs become constants and straight-through outputs become
/// `hard + (soft - soft_ref)`. Finite differences of the replayed function
/// can therefore be compared against analytic gradients.
#[derive(Clone, Debug, Default)]
pub struct FrozenNodes(Vec<Frozen>);

#[derive(Clone, Debug)]
enum Frozen {
    StopGradient(Tensor),
    StraightThrough { hard: Tensor, soft: Tensor },
}

impl FrozenNodes {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Default)]
enum Mode {
    #[default]
    Plain,
    Record(Vec<Frozen>),
    Replay {
        frozen: Vec<Frozen>,
        cursor: usize,
    },
}

/// Records primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and a single reverse sweep is a valid topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
}

/// Per-node gradients produced by [`Tape::backward`].
///
/// Nodes the loss does not depend on have no entry; [`Gradients::get_or_zeros`]
/// reports them as zeros of the right shape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn need_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected a matrix, got shape {:?}", t.shape())))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ))
    }
}

/// One-hot rows at each row's argmax, ties to the lowest column.
pub fn onehot_rows(a: &Tensor) -> (Tensor, Vec<usize>) {
    let (rows, cols) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[rows, cols]);
    let mut labels = Vec::with_capacity(rows);
    for i in 0..rows {
        let j = argmax(a.row(i));
        out.set(i, j, 1.0);
        labels.push(j);
    }
    (out, labels)
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that logs the forward values of its custom-gradient nodes.
    pub fn recording() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Record(Vec::new()),
        }
    }

    /// A tape that substitutes previously logged custom-gradient values.
    pub fn replaying(frozen: FrozenNodes) -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Replay {
                frozen: frozen.0,
                cursor: 0,
            },
        }
    }

    /// Takes the log gathered by a recording tape.
    pub fn take_frozen(&mut self) -> FrozenNodes {
        match &mut self.mode {
            Mode::Record(log) => FrozenNodes(std::mem::take(log)),
            _ => FrozenNodes::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        need_matrix("matmul", ta)?;
        need_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
        let data = kernels::matmul(ta.data(), tb.data(), r, k, c);
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        need_matrix("add_row_bias", tx)?;
        if tb.len() != tx.cols() {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} does not broadcast over {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut value = tx.clone();
        let b = tb.data().to_vec();
        for i in 0..value.rows() {
            for (v, bj) in value.row_mut(i).iter_mut().zip(&b) {
                *v += bj;
            }
        }
        Ok(self.push(value, Op::AddRowBias(x, bias)))
    }

    /// `x · w (+ b)` with `x: N×Din`, `w: Din×Dout`, `b: Dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x))
    }

    /// Softmax along each row of `x / tau`.
    pub fn row_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Param(format!("softmax temperature must be positive, got {tau}")));
        }
        let tx = self.value(x);
        need_matrix("row_softmax", tx)?;
        let mut value = tx.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / tau).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(value, Op::RowSoftmax { x, tau }))
    }

    /// Scales each row to unit L2 norm. All-zero rows stay zero.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        need_matrix("row_l2_normalize", tx)?;
        let mut value = tx.clone();
        let mut norms = Vec::with_capacity(value.rows());
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let n = kernels::norm(row);
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            norms.push(n);
        }
        Ok(self.push(value, Op::RowL2Normalize { x, norms }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        need_matrix("concat_rows", ta)?;
        need_matrix("concat_rows", tb)?;
        if ta.cols() != tb.cols() {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::matrix(ta.rows() + tb.rows(), ta.cols(), data)?;
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        need_matrix("select_rows", tx)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} out of range for {:?}", tx.shape()),
            ));
        }
        let value = tx.select_rows(indices);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        need_matrix("transpose", tx)?;
        let value = tx.transpose();
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let value = Tensor::scalar(tx.sum() / tx.len() as f64);
        Ok(self.push(value, Op::MeanAll(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::ScalarMul(x, c))
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("elementwise_mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ElemMul(a, b)))
    }

    /// Identity forward; blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = match &mut self.mode {
            Mode::Plain => self.nodes[x.0].value.clone(),
            Mode::Record(log) => {
                let v = self.nodes[x.0].value.clone();
                log.push(Frozen::StopGradient(v.clone()));
                v
            }
            Mode::Replay { frozen, cursor } => {
                let v = match frozen.get(*cursor) {
                    Some(Frozen::StopGradient(v)) => v.clone(),
                    _ => panic!("replayed graph diverged from the recorded one at custom node {cursor}"),
                };
                *cursor += 1;
                v
            }
        };
        self.push(value, Op::StopGradient)
    }

    /// Forward: one-hot of each row's argmax (ties to the lowest column).
    /// Backward: the upstream gradient is passed to `a` unchanged.
    pub fn straight_through_onehot(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        need_matrix("straight_through_onehot", ta)?;
        if ta.cols() == 0 {
            return Err(Error::shape("straight_through_onehot", "need at least one column"));
        }
        let value = match &mut self.mode {
            Mode::Plain => onehot_rows(&self.nodes[a.0].value).0,
            Mode::Record(log) => {
                let soft = self.nodes[a.0].value.clone();
                let hard = onehot_rows(&soft).0;
                log.push(Frozen::StraightThrough {
                    hard: hard.clone(),
                    soft,
                });
                hard
            }
            Mode::Replay { frozen, cursor } => {
                let (hard, soft) = match frozen.get(*cursor) {
                    Some(Frozen::StraightThrough { hard, soft }) => (hard, soft),
                    _ => panic!("replayed graph diverged from the recorded one at custom node {cursor}"),
                };
                *cursor += 1;
                let current = &self.nodes[a.0].value;
                let data = hard
                    .data()
                    .iter()
                    .zip(current.data())
                    .zip(soft.data())
                    .map(|((h, a), a0)| h + (a - a0))
                    .collect();
                Tensor::new(hard.shape().to_vec(), data)?
            }
        };
        Ok(self.push(value, Op::StraightThrough(a)))
    }

    /// Batch normalization over the rows of `x`.
    ///
    /// `gamma`/`beta` are the tape handles of the affine parameters when they
    /// are trainable; otherwise the values stored in `state` are used as
    /// constants. In train mode the batch statistics are returned so the
    /// caller can fold them into the running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        state: &BatchNormState,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        if !(state.epsilon > 0.0) {
            return Err(Error::Param(format!(
                "batchnorm epsilon must be positive, got {}",
                state.epsilon
            )));
        }
        let tx = self.value(x);
        need_matrix("batchnorm", tx)?;
        let (n, d) = (tx.rows(), tx.cols());
        if state.dim() != d {
            return Err(Error::shape(
                "batchnorm",
                format!("state has {} features, input has shape {:?}", state.dim(), tx.shape()),
            ));
        }
        let gamma_value = match gamma {
            Some(g) => self.value(g).data().to_vec(),
            None => state.gamma.data().to_vec(),
        };
        let beta_value = match beta {
            Some(b) => self.value(b).data().to_vec(),
            None => state.beta.data().to_vec(),
        };
        if gamma_value.len() != d || beta_value.len() != d {
            return Err(Error::shape("batchnorm", "affine parameters do not match feature count"));
        }

        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::Param(format!(
                        "batchnorm in train mode needs at least 2 rows, got {n}"
                    )));
                }
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    for (m, v) in mean.iter_mut().zip(tx.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for i in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(tx.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval => (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
                None,
            ),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let mut xhat = tx.clone();
        let mut value = tx.clone();
        for i in 0..n {
            let xr = xhat.row_mut(i);
            for j in 0..d {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let xr = xhat.row(i).to_vec();
            let yr = value.row_mut(i);
            for j in 0..d {
                yr[j] = gamma_value[j] * xr[j] + beta_value[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            gamma_value,
            xhat,
            inv_std,
            train: mode == BnMode::Train,
        };
        Ok((self.push(value, op), stats))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                let bt = tb.transpose();
                let da = kernels::matmul(g.data(), bt.data(), r, c, k);
                let at = ta.transpose();
                let db = kernels::matmul(at.data(), g.data(), k, r, c);
                acc(*a, Tensor::new(vec![r, k], da).expect("matmul grad shape"));
                acc(*b, Tensor::new(vec![k, c], db).expect("matmul grad shape"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                let mut db = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (s, v) in db.iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                let shape = self.value(*b).shape().to_vec();
                acc(*b, Tensor::new(shape, db).expect("bias grad shape"));
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data).expect("relu grad shape"));
            }
            Op::RowSoftmax { x, tau } => {
                let s = &node.value;
                let mut dx = g.clone();
                for i in 0..s.rows() {
                    let (sr, gr) = (s.row(i), g.row(i));
                    let inner = kernels::dot(sr, gr);
                    for ((d, sv), gv) in dx.row_mut(i).iter_mut().zip(sr).zip(gr) {
                        *d = sv * (gv - inner) / tau;
                    }
                }
                acc(*x, dx);
            }
            Op::RowL2Normalize { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (i, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dxr = dx.row_mut(i);
                    if n > 0.0 {
                        let proj = kernels::dot(yr, gr);
                        for ((d, yv), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv * proj) / n;
                        }
                    } else {
                        dxr.fill(0.0);
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                let c = g.cols();
                let (top, bottom) = g.data().split_at(ra * c);
                acc(*a, Tensor::matrix(ra, c, top.to_vec()).expect("concat grad"));
                acc(
                    *b,
                    Tensor::matrix(g.rows() - ra, c, bottom.to_vec()).expect("concat grad"),
                );
            }
            Op::SelectRows { x, indices } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (k, &i) in indices.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::MeanAll(x) => {
                let tx = self.value(*x);
                let v = g.item() / tx.len() as f64;
                acc(*x, Tensor::full(tx.shape(), v));
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                acc(*x, Tensor::full(tx.shape(), g.item()));
            }
            Op::ScalarMul(x, c) => acc(*x, g.map(|v| v * c)),
            Op::ElemMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), da).expect("mul grad"));
                acc(*b, Tensor::new(g.shape().to_vec(), db).expect("mul grad"));
            }
            Op::StraightThrough(a) => acc(*a, g.clone()),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                gamma_value,
                xhat,
                inv_std,
                train,
            } => {
                let (n, d) = (xhat.rows(), xhat.cols());
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dgamma[j] += g.get(i, j) * xhat.get(i, j);
                        dbeta[j] += g.get(i, j);
                    }
                }
                let mut dx = Tensor::zeros(&[n, d]);
                if *train {
                    // dxhat = g * gamma; dx = inv_std/N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
                    let nf = n as f64;
                    for j in 0..d {
                        let sum_dxhat = dbeta[j] * gamma_value[j];
                        let sum_dxhat_xhat = dgamma[j] * gamma_value[j];
                        for i in 0..n {
                            let dxhat = g.get(i, j) * gamma_value[j];
                            let v = inv_std[j] / nf
                                * (nf * dxhat - sum_dxhat - xhat.get(i, j) * sum_dxhat_xhat);
                            dx.set(i, j, v);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..d {
                            dx.set(i, j, g.get(i, j) * gamma_value[j] * inv_std[j]);
                        }
                    }
                }
                acc(*x, dx);
                if let Some(gm) = gamma {
                    acc(*gm, Tensor::vector(dgamma));
                }
                if let Some(bt) = beta {
                    acc(*bt, Tensor::vector(dbeta));
                }
            }
        }
    }
}
