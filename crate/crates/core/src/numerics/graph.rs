//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the tape itself is a valid
//! topological order and `backward` is a single reverse sweep. Gradient
//! contributions are accumulated in that fixed order, which keeps repeated
//! runs bit-identical.

use std::collections::HashMap;

use super::{NumericsError, ParamGrads, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    AddScalar { x: Var },
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Clamp { x: Var, lo: T, hi: T },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    MeanPool { x: Var, mask: Vec<bool>, count: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Conv1d { x: Var, w: Var, b: Var, pad: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A computation graph over tensors of scalar type `T`.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var, NumericsError> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Parameter node; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// `a · b` for `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `[m,k]·[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{kb},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), b_t, T::zero(), &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_t }, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let vx = self.value(x);
        Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a `[n]`/`[1,n]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims(x);
        if self.value(bias).len() != cols {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias))));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        self.push(out, Op::AddBias { x, bias }, "add_bias")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumericsError> {
        let f = T::of(factor);
        let out = self.map(x, |v| v * f);
        self.push(out, Op::Scale { x, factor: f }, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let c = T::of(c);
        let out = self.map(x, |v| v + c);
        self.push(out, Op::AddScalar { x }, "add_scalar")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v.tanh());
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v.max(T::zero()));
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v.exp());
        self.push(out, Op::Exp(x), "exp")
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.map(x, |v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, "clamp")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims(x);
        let mut out = self.value(x).clone();
        for r in 0..rows {
            softmax_row(&mut out.data_mut()[r * cols..(r + 1) * cols], cols);
        }
        self.push(out, Op::Softmax { x }, "softmax")
    }

    /// Softmax over the last axis of a square score matrix with entries
    /// above the diagonal masked to probability zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims(x);
        if rows != cols {
            return Err(shape_err("causal_softmax", format!("needs a square matrix, got {:?}", self.shape(x))));
        }
        let mut out = self.value(x).clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            softmax_row(row, r + 1);
        }
        self.push(out, Op::Softmax { x }, "causal_softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims(x);
        let mut out = self.value(x).clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push(out, Op::LogSoftmax { x }, "log_softmax")
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims(x);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(shape_err("layer_norm", format!("x {:?}, gain {:?}", self.shape(x), self.shape(gain))));
        }
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, "layer_norm")
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (vocab, dim) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err("embedding", format!("id {bad} out of range for table of {vocab}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        self.push(Tensor::new(vec![ids.len(), dim], out)?, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    /// Mean over the rows where `mask` is true, giving a `[1, cols]` row.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims(x);
        if mask.len() != rows {
            return Err(shape_err("mean_pool", format!("mask of {} for {rows} rows", mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(shape_err("mean_pool", "no unmasked rows".into()));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); cols];
        for r in (0..rows).filter(|&r| mask[r]) {
            for c in 0..cols {
                out[c] = out[c] + xv[r * cols + c];
            }
        }
        let n = T::of(count as f64);
        for v in &mut out {
            *v = *v / n;
        }
        self.push(Tensor::new(vec![1, cols], out)?, Op::MeanPool { x, mask: mask.to_vec(), count }, "mean_pool")
    }

    /// Concatenates along the last axis; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(shape_err("concat", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.dims(p);
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), "concat")
    }

    /// Stacks row blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != cols) {
            return Err(shape_err("concat_rows", "column counts differ".into()));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            rows += self.dims(p).0;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims(x);
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {cols}", start + len)));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// 1D cross-correlation. `x` is `[in_ch, len]`, `w` is
    /// `[out_ch, in_ch, kernel]` and `b` is `[out_ch]`; zero padding `pad`
    /// on both ends. Output is `[out_ch, len + 2·pad − kernel + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, NumericsError> {
        let (in_ch, len) = self.dims(x);
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != in_ch || self.value(b).len() != ws[0] {
            return Err(shape_err("conv1d", format!("x {:?}, w {ws:?}, b {:?}", self.shape(x), self.shape(b))));
        }
        let (out_ch, k) = (ws[0], ws[2]);
        if len + 2 * pad < k {
            return Err(shape_err("conv1d", format!("kernel {k} longer than padded input {}", len + 2 * pad)));
        }
        let out_len = len + 2 * pad - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); out_ch * out_len];
        for o in 0..out_ch {
            for t in 0..out_len {
                let mut acc = bv[o];
                for i in 0..in_ch {
                    for j in 0..k {
                        let pos = t + j;
                        if pos >= pad && pos - pad < len {
                            acc = acc + wv[(o * in_ch + i) * k + j] * xv[i * len + pos - pad];
                        }
                    }
                }
                out[o * out_len + t] = acc;
            }
        }
        self.push(Tensor::new(vec![out_ch, out_len], out)?, Op::Conv1d { x, w, b, pad }, "conv1d")
    }

    /// Summed token-level cross-entropy of `logits` (`[n, classes]`)
    /// against `targets`; positions whose target equals `ignore` contribute
    /// nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims(logits);
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        let targets: Vec<Option<usize>> =
            targets.iter().map(|&t| if Some(t) == ignore { None } else { Some(t) }).collect();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= cols) {
            return Err(shape_err("cross_entropy", format!("target {bad} out of range for {cols} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
            if let Some(t) = targets[r] {
                total = total + (lse - row[t]);
            }
        }
        self.push(Tensor::scalar(total), Op::CrossEntropy { logits, targets, probs }, "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = self.dims(*a);
                let n = node.value.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dC · Bᵀ  (B stored [k,n], or [n,k] when b_t)
                T::gemm(m, n, k, gd, false, bv, !*b_t, T::one(), slot(grads, *a, &self.nodes));
                if *b_t {
                    // B is [n,k]: dB = dCᵀ · A
                    T::gemm(n, m, k, gd, true, av, false, T::one(), slot(grads, *b, &self.nodes));
                } else {
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, av, true, gd, false, T::one(), slot(grads, *b, &self.nodes));
                }
            }
            Op::Add(a, b) => {
                axpy(slot(grads, *a, &self.nodes), gd);
                axpy(slot(grads, *b, &self.nodes), gd);
            }
            Op::Sub(a, b) => {
                axpy(slot(grads, *a, &self.nodes), gd);
                let gb = slot(grads, *b, &self.nodes);
                for (o, &v) in gb.iter_mut().zip(gd) {
                    *o = *o - v;
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = slot(grads, *a, &self.nodes);
                for j in 0..gd.len() {
                    ga[j] = ga[j] + gd[j] * bv[j];
                }
                let gb = slot(grads, *b, &self.nodes);
                for j in 0..gd.len() {
                    gb[j] = gb[j] + gd[j] * av[j];
                }
            }
            Op::AddBias { x, bias } => {
                axpy(slot(grads, *x, &self.nodes), gd);
                let cols = node.value.cols();
                let gb = slot(grads, *bias, &self.nodes);
                for row in gd.chunks(cols) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let gx = slot(grads, *x, &self.nodes);
                for (o, &v) in gx.iter_mut().zip(gd) {
                    *o = *o + v * *factor;
                }
            }
            Op::AddScalar { x } | Op::Reshape(x) => axpy(slot(grads, *x, &self.nodes), gd),
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx = slot(grads, *x, &self.nodes);
                for j in 0..gd.len() {
                    gx[j] = gx[j] + gd[j] * (T::one() - y[j] * y[j]);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, &self.nodes);
                for j in 0..gd.len() {
                    if xv[j] > T::zero() {
                        gx[j] = gx[j] + gd[j];
                    }
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let gx = slot(grads, *x, &self.nodes);
                for j in 0..gd.len() {
                    gx[j] = gx[j] + gd[j] * y[j];
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, &self.nodes);
                for j in 0..gd.len() {
                    if xv[j] > *lo && xv[j] < *hi {
                        gx[j] = gx[j] + gd[j];
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let gx = slot(grads, *x, &self.nodes);
                for r in 0..y.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    let dot: T = y[span.clone()].iter().zip(&gd[span.clone()]).map(|(&p, &d)| p * d).sum();
                    for j in span {
                        gx[j] = gx[j] + y[j] * (gd[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let gx = slot(grads, *x, &self.nodes);
                for r in 0..y.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    let total: T = gd[span.clone()].iter().copied().sum();
                    for j in span {
                        gx[j] = gx[j] + gd[j] - y[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                let n = T::of(cols as f64);
                {
                    let gg = slot(grads, *gain, &self.nodes);
                    for j in 0..gd.len() {
                        gg[j % cols] = gg[j % cols] + gd[j] * xhat[j];
                    }
                }
                {
                    let gb = slot(grads, *bias, &self.nodes);
                    for j in 0..gd.len() {
                        gb[j % cols] = gb[j % cols] + gd[j];
                    }
                }
                let gx = slot(grads, *x, &self.nodes);
                for r in 0..rows {
                    let base = r * cols;
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for c in 0..cols {
                        let dh = gd[base + c] * gv[c];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * xhat[base + c];
                    }
                    for c in 0..cols {
                        let dh = gd[base + c] * gv[c];
                        gx[base + c] =
                            gx[base + c] + rstd[r] * (dh - sum_dh / n - xhat[base + c] * sum_dh_h / n);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.cols();
                let gt = slot(grads, *table, &self.nodes);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        gt[id * dim + c] = gt[id * dim + c] + gd[r * dim + c];
                    }
                }
            }
            Op::MeanPool { x, mask, count } => {
                let cols = node.value.cols();
                let inv = T::one() / T::of(*count as f64);
                let gx = slot(grads, *x, &self.nodes);
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for c in 0..cols {
                        gx[r * cols + c] = gx[r * cols + c] + gd[c] * inv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    let gp = slot(grads, p, &self.nodes);
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] = gp[r * c + j] + gd[r * total + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    axpy(slot(grads, p, &self.nodes), &gd[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.dims(*x);
                let len = node.value.cols();
                let gx = slot(grads, *x, &self.nodes);
                for r in 0..rows {
                    for j in 0..len {
                        gx[r * cols + start + j] = gx[r * cols + start + j] + gd[r * len + j];
                    }
                }
            }
            Op::Conv1d { x, w, b, pad } => {
                let (in_ch, len) = self.dims(*x);
                let ws = self.shape(*w);
                let (out_ch, k) = (ws[0], ws[2]);
                let out_len = node.value.cols();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                {
                    let gb = slot(grads, *b, &self.nodes);
                    for o in 0..out_ch {
                        for t in 0..out_len {
                            gb[o] = gb[o] + gd[o * out_len + t];
                        }
                    }
                }
                {
                    let gw = slot(grads, *w, &self.nodes);
                    for o in 0..out_ch {
                        for i in 0..in_ch {
                            for j in 0..k {
                                let mut acc = T::zero();
                                for t in 0..out_len {
                                    let pos = t + j;
                                    if pos >= *pad && pos - pad < len {
                                        acc = acc + gd[o * out_len + t] * xv[i * len + pos - pad];
                                    }
                                }
                                let idx = (o * in_ch + i) * k + j;
                                gw[idx] = gw[idx] + acc;
                            }
                        }
                    }
                }
                let gx = slot(grads, *x, &self.nodes);
                for o in 0..out_ch {
                    for t in 0..out_len {
                        let d = gd[o * out_len + t];
                        for i in 0..in_ch {
                            for j in 0..k {
                                let pos = t + j;
                                if pos >= *pad && pos - pad < len {
                                    let idx = i * len + pos - pad;
                                    gx[idx] = gx[idx] + d * wv[(o * in_ch + i) * k + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.dims(*logits).1;
                let scale = gd[0];
                let gl = slot(grads, *logits, &self.nodes);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..cols {
                        gl[r * cols + c] = gl[r * cols + c] + scale * probs[r * cols + c];
                    }
                    gl[r * cols + t] = gl[r * cols + t] - scale;
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                for o in slot(grads, *x, &self.nodes).iter_mut() {
                    *o = *o + s;
                }
            }
        }
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, nodes: &[Node<T>]) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())).data_mut()
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// In-place softmax of the first `active` entries; the rest become zero.
fn softmax_row<T: Scalar>(row: &mut [T], active: usize) {
    let max = row[..active].iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in &mut row[..active] {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in &mut row[..active] {
        *v = *v / total;
    }
    for v in &mut row[active..] {
        *v = T::zero();
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of any node; `None` if the loss does not depend on it.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Collects per-parameter gradients for a store.
    pub fn params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::empty(store.len());
        for (&id, &v) in &graph.params {
            if let Some(g) = self.of(v) {
                out.set(id, g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.leaf(Tensor::row(v.to_vec())).unwrap()
    }

    #[test]
    fn conv1d_hand_computed() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[1.0, 2.0, 3.0]);
        let w = g.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let b = g.leaf(Tensor::row(vec![0.0])).unwrap();
        let y = g.conv1d(x, w, b, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[0.0, 0.0]);
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_cross_entropy_is_log_classes() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[0.3; 8]);
        for target in 0..8 {
            let ce = g.cross_entropy(x, &[target], None).unwrap();
            assert!((g.value(ce).item() - 8f64.ln()).abs() < 1e-12);
        }
        assert!((8f64.ln() - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn ignored_targets_contribute_nothing() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let ce = g.cross_entropy(x, &[0, 1], Some(0)).unwrap();
        assert!((g.value(ce).item() - 3f64.ln()).abs() < 1e-12);
        let grads = g.backward(ce).unwrap();
        assert!(grads.of(x).unwrap().data()[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_derivative_matches_central_difference() {
        let f = |x: f64| x * x;
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        let analytic = grads.of(x).unwrap().item();
        assert_eq!(analytic, 6.0);
        let numeric = (f(3.001) - f(2.999)) / 0.002;
        assert!((analytic - numeric).abs() < 1e-6);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1.0)).unwrap();
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.of(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss { .. })));
    }

    #[test]
    fn unreachable_parameters_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let used = store.insert("used", Tensor::scalar(2.0));
        let unused = store.insert("unused", Tensor::scalar(5.0));
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let _ = g.param(&store, unused);
        let loss = g.scale(u, 3.0).unwrap();
        let grads = g.backward(loss).unwrap().params(&g, &store);
        assert_eq!(grads.dense(&store, used), vec![3.0]);
        assert_eq!(grads.dense(&store, unused), vec![0.0]);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::<f64>::new();
        let a = row(&mut g, &[1.0, 2.0]);
        let b = row(&mut g, &[1.0, 2.0, 3.0]);
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn non_finite_values_are_a_contract_violation() {
        let mut g = Graph::<f64>::new();
        let a = row(&mut g, &[1000.0]);
        assert!(matches!(g.exp(a), Err(NumericsError::NonFinite { op: "exp" })));
    }

    #[test]
    fn causal_softmax_masks_the_future() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::new(vec![2, 2], vec![0.0, 9.0, 0.0, 0.0]).unwrap()).unwrap();
        let p = g.causal_softmax(s).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn mean_pool_skips_masked_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3, 2], vec![1.0, 3.0, 3.0, 1.0, 100.0, 100.0]).unwrap()).unwrap();
        let p = g.mean_pool(x, &[true, true, false]).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 2.0]);
    }
}
