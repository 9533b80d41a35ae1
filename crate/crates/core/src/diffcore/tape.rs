//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! Every op appends one node holding its forward value. Because a node can only
//! reference nodes created before it, the node vector is already in topological
//! order and the backward pass is a single reverse sweep.

use super::tensor::TensorValue;
use crate::error::{Error, Result};

/// Logits entering the leaky softmax are clamped to this magnitude.
pub const LEAKY_LOGIT_CLAMP: f64 = 30.0;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LeakySoftmax { x: Var, active: Vec<bool> },
    GradReverse { x: Var, lambda: f64 },
    SafeLog { x: Var, active: Vec<bool> },
    Gather { x: Var, idx: Vec<usize> },
    Column { x: Var, col: usize },
    RowSum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleShift { x: Var, scale: f64 },
    Mean(Var),
    BatchNorm(Box<BatchNormSaved>),
}

#[derive(Debug, Clone)]
struct BatchNormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: TensorValue,
    needs_grad: bool,
}

/// Recording tape. One tape per forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<TensorValue>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any flowed there.
    pub fn get(&self, var: Var) -> Option<&TensorValue> {
        self.slots.get(var.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `like` when no
    /// gradient reached the node.
    pub fn get_or_zero(&self, var: Var, like: &TensorValue) -> TensorValue {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| TensorValue::zeros_like(like))
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &TensorValue) -> TensorValue {
    let cols = z.cols();
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise leaky softmax `exp(l_c) / (K + sum_j exp(l_j))` with logits
/// clamped to `[-LEAKY_LOGIT_CLAMP, LEAKY_LOGIT_CLAMP]`.
pub fn leaky_softmax_rows(l: &TensorValue) -> TensorValue {
    let cols = l.cols();
    let k = cols as f64;
    let mut out = l.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = v.clamp(-LEAKY_LOGIT_CLAMP, LEAKY_LOGIT_CLAMP).exp();
            sum += *v;
        }
        let denom = k + sum;
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

/// `ln(clamp(p, eps, 1 - eps))`.
pub fn safe_log(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps).ln()
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

    pub fn value(&self, v: Var) -> &TensorValue {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: TensorValue, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input: gradients are reported for it.
    pub fn leaf(&mut self, value: TensorValue) -> Result<Var> {
        self.push(Op::Leaf, value, true, "leaf")
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, value: TensorValue) -> Result<Var> {
        self.push(Op::Leaf, value, false, "constant")
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `x·w + b` for `x: [B×I]`, `w: [I×O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (rows, inner) = xv.require_matrix("affine", "input x")?;
        let (w_in, out) = wv.require_matrix("affine", "weight w")?;
        if inner != w_in {
            return Err(Error::dim(
                "affine",
                format!("x has {inner} columns but w has {w_in} rows"),
            ));
        }
        if bv.rank() != 1 || bv.len() != out {
            return Err(Error::dim(
                "affine",
                format!("bias b has shape {:?}, expected [{out}]", bv.shape()),
            ));
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut data = vec![0.0; rows * out];
        for r in 0..rows {
            let acc = &mut data[r * out..(r + 1) * out];
            for i in 0..inner {
                let xi = xd[r * inner + i];
                let wrow = &wd[i * out..(i + 1) * out];
                for (a, &wv) in acc.iter_mut().zip(wrow) {
                    *a += xi * wv;
                }
            }
            for (a, &bc) in acc.iter_mut().zip(bd) {
                *a += bc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = TensorValue::matrix(rows, out, data)?;
        self.push(Op::Affine { x, w, b }, value, needs, "affine")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = v.max(0.0);
        }
        let needs = self.needs(x);
        self.push(Op::Relu(x), value, needs, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = v.tanh();
        }
        let needs = self.needs(x);
        self.push(Op::Tanh(x), value, needs, "tanh")
    }

    /// Numerically stable row softmax of a `[B×M]` matrix.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let zv = self.value(z);
        let (_, m) = zv.require_matrix("softmax", "logits")?;
        if m == 0 {
            return Err(Error::Contract("softmax needs at least one column".into()));
        }
        let value = softmax_rows(zv);
        let needs = self.needs(z);
        self.push(Op::Softmax(z), value, needs, "softmax")
    }

    /// Row leaky softmax of a `[B×K]` matrix; rows sum to strictly less than one.
    pub fn leaky_softmax(&mut self, l: Var) -> Result<Var> {
        let lv = self.value(l);
        let (_, k) = lv.require_matrix("leaky_softmax", "logits")?;
        if k == 0 {
            return Err(Error::Contract("leaky_softmax needs at least one column".into()));
        }
        let active = lv
            .data()
            .iter()
            .map(|v| v.abs() < LEAKY_LOGIT_CLAMP)
            .collect();
        let value = leaky_softmax_rows(lv);
        let needs = self.needs(l);
        self.push(Op::LeakySoftmax { x: l, active }, value, needs, "leaky_softmax")
    }

    /// Identity forward; scales the upstream gradient by `-lambda` backward.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Contract(format!(
                "gradient reversal coefficient must be >= 0, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        let needs = self.needs(x);
        self.push(Op::GradReverse { x, lambda }, value, needs, "grad_reverse")
    }

    /// Elementwise `ln(clamp(p, eps, 1 - eps))`; zero gradient where clamped.
    pub fn safe_log(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::Contract(format!("safe_log eps must lie in (0, 0.5), got {eps}")));
        }
        let mut value = self.value(x).clone();
        let mut active = Vec::with_capacity(value.len());
        for v in value.data_mut() {
            active.push(*v >= eps && *v <= 1.0 - eps);
            *v = safe_log(*v, eps);
        }
        let needs = self.needs(x);
        self.push(Op::SafeLog { x, active }, value, needs, "safe_log")
    }

    /// Picks `x[r, idx[r]]` from each row, giving a `[B]` vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.require_matrix("gather", "input")?;
        if idx.len() != rows {
            return Err(Error::dim(
                "gather",
                format!("{} indices for {rows} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {cols} columns"
            )));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| xv.get2(r, c)).collect();
        let needs = self.needs(x);
        self.push(
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            TensorValue::vector(data),
            needs,
            "gather",
        )
    }

    /// Column `col` of a `[B×M]` matrix as a `[B]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.require_matrix("column", "input")?;
        if col >= cols {
            return Err(Error::dim(
                "column",
                format!("column {col} out of range for {cols} columns"),
            ));
        }
        let data = (0..rows).map(|r| xv.get2(r, col)).collect();
        let needs = self.needs(x);
        self.push(Op::Column { x, col }, TensorValue::vector(data), needs, "column")
    }

    /// Sum over each row of a `[B×M]` matrix.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, cols) = xv.require_matrix("row_sum", "input")?;
        let data = xv.data().chunks(cols.max(1)).map(|r| r.iter().sum()).collect();
        let needs = self.needs(x);
        self.push(Op::RowSum(x), TensorValue::vector(data), needs, "row_sum")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("operands have shapes {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        for (v, &o) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v += o;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, needs, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut value = self.value(a).clone();
        for (v, &o) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= o;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, needs, "mul")
    }

    /// Elementwise `scale * x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = scale * *v + shift;
        }
        let needs = self.needs(x);
        self.push(Op::ScaleShift { x, scale }, value, needs, "scale_shift")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let needs = self.needs(x);
        self.push(Op::Mean(x), TensorValue::scalar(m), needs, "mean")
    }

    /// Training-mode batch normalization over the rows of `x: [B×F]`, with
    /// per-feature affine `gamma`, `beta` of shape `[F]`.
    ///
    /// Returns the node and the per-feature batch mean and biased variance so
    /// callers can keep running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (rows, f) = xv.require_matrix("batch_norm", "input")?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let pv = self.value(p);
            if pv.rank() != 1 || pv.len() != f {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} has shape {:?}, expected [{f}]", pv.shape()),
                ));
            }
        }
        if rows == 0 {
            return Err(Error::Contract("batch_norm over an empty batch".into()));
        }
        let n = rows as f64;
        let mut mean = vec![0.0; f];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![0.0; rows * f];
        let mut out = vec![0.0; rows * f];
        for r in 0..rows {
            for c in 0..f {
                let h = (xv.get2(r, c) - mean[c]) * inv_std[c];
                x_hat[r * f + c] = h;
                out[r * f + c] = g[c] * h + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = TensorValue::matrix(rows, f, out)?;
        let saved = BatchNormSaved {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
        };
        let node = self.push(Op::BatchNorm(Box::new(saved)), value, needs, "batch_norm")?;
        Ok((node, mean, var))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut slots: Vec<Option<TensorValue>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(TensorValue::new(lv.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut slots)?;
            }
            slots[i] = Some(g);
        }
        // Only nodes that are differentiable report gradients.
        for (slot, node) in slots.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<TensorValue>], v: Var, contrib: Vec<f64>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut slots[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => {
                *slot = Some(TensorValue::new(self.value(v).shape().to_vec(), contrib)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &TensorValue, slots: &mut [Option<TensorValue>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, inner) = (xv.rows(), xv.cols());
                let out = wv.cols();
                let (xd, wd) = (xv.data(), wv.data());
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * inner];
                    for r in 0..rows {
                        let grow = &gd[r * out..(r + 1) * out];
                        for i in 0..inner {
                            let wrow = &wd[i * out..(i + 1) * out];
                            dx[r * inner + i] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(slots, *x, dx)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; inner * out];
                    for r in 0..rows {
                        let grow = &gd[r * out..(r + 1) * out];
                        for i in 0..inner {
                            let xi = xd[r * inner + i];
                            for (d, &gc) in dw[i * out..(i + 1) * out].iter_mut().zip(grow) {
                                *d += xi * gc;
                            }
                        }
                    }
                    self.accumulate(slots, *w, dw)?;
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; out];
                    for grow in gd.chunks(out) {
                        for (d, &gc) in db.iter_mut().zip(grow) {
                            *d += gc;
                        }
                    }
                    self.accumulate(slots, *b, db)?;
                }
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(slots, *x, dx)?;
            }
            Op::Tanh(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(slots, *x, dx)?;
            }
            Op::Softmax(x) => {
                let dx = softmax_vjp(&node.value, gd, None);
                self.accumulate(slots, *x, dx)?;
            }
            Op::LeakySoftmax { x, active } => {
                let dx = softmax_vjp(&node.value, gd, Some(active));
                self.accumulate(slots, *x, dx)?;
            }
            Op::GradReverse { x, lambda } => {
                let dx = gd.iter().map(|&gv| -lambda * gv).collect();
                self.accumulate(slots, *x, dx)?;
            }
            Op::SafeLog { x, active } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .zip(active)
                    .map(|((&p, &gv), &on)| if on { gv / p } else { 0.0 })
                    .collect();
                self.accumulate(slots, *x, dx)?;
            }
            Op::Gather { x, idx } => {
                let cols = self.value(*x).cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, (&c, &gv)) in idx.iter().zip(gd).enumerate() {
                    dx[r * cols + c] = gv;
                }
                self.accumulate(slots, *x, dx)?;
            }
            Op::Column { x, col } => {
                let cols = self.value(*x).cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, &gv) in gd.iter().enumerate() {
                    dx[r * cols + col] = gv;
                }
                self.accumulate(slots, *x, dx)?;
            }
            Op::RowSum(x) => {
                let cols = self.value(*x).cols();
                let dx = gd
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv, cols))
                    .collect();
                self.accumulate(slots, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(slots, *a, gd.to_vec())?;
                self.accumulate(slots, *b, gd.to_vec())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da = gd.iter().zip(bv).map(|(g, b)| g * b).collect();
                    self.accumulate(slots, *a, da)?;
                }
                if self.needs(*b) {
                    let db = gd.iter().zip(av).map(|(g, a)| g * a).collect();
                    self.accumulate(slots, *b, db)?;
                }
            }
            Op::ScaleShift { x, scale } => {
                let dx = gd.iter().map(|&gv| scale * gv).collect();
                self.accumulate(slots, *x, dx)?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let share = gd[0] / n as f64;
                self.accumulate(slots, *x, vec![share; n])?;
            }
            Op::BatchNorm(saved) => {
                let BatchNormSaved {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                } = saved.as_ref();
                let f = inv_std.len();
                let rows = gd.len() / f;
                let n = rows as f64;
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for r in 0..rows {
                    for c in 0..f {
                        dgamma[c] += gd[r * f + c] * x_hat[r * f + c];
                        dbeta[c] += gd[r * f + c];
                    }
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; rows * f];
                    for r in 0..rows {
                        for c in 0..f {
                            let k = r * f + c;
                            dx[k] = gam[c] * inv_std[c] / n
                                * (n * gd[k] - dbeta[c] - x_hat[k] * dgamma[c]);
                        }
                    }
                    self.accumulate(slots, *x, dx)?;
                }
                self.accumulate(slots, *gamma, dgamma)?;
                self.accumulate(slots, *beta, dbeta)?;
            }
        }
        Ok(())
    }
}

/// Vector-Jacobian product shared by softmax and leaky softmax:
/// `dz_j = s_j (g_j - sum_c g_c s_c)`, masked where the input was clamped.
fn softmax_vjp(out: &TensorValue, gd: &[f64], active: Option<&Vec<bool>>) -> Vec<f64> {
    let cols = out.cols();
    let mut dx = vec![0.0; out.len()];
    for (r, (srow, grow)) in out.data().chunks(cols).zip(gd.chunks(cols)).enumerate() {
        let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
        for c in 0..cols {
            let k = r * cols + c;
            let on = active.is_none_or(|a| a[k]);
            dx[k] = if on { srow[c] * (grow[c] - dot) } else { 0.0 };
        }
    }
    dx
}
