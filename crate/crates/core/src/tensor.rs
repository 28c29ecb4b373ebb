//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Tape`] owns every tensor created on it and records one primitive
//! operation per produced tensor, so the record is topologically ordered by
//! construction and [`Tape::backward`] visits each operation exactly once in
//! reverse. Tensors are addressed by [`TensorId`] handles.
//!
//! Supported shapes are scalars (empty shape), vectors and matrices in
//! row-major order. Binary elementwise operations require identical shapes or
//! a scalar on one side; there is no general broadcasting. Row replication
//! and row gathering are explicit operations instead.
//!
//! All arithmetic is f64. Every completed operation is checked to contain
//! only finite values; a NaN or infinity surfaces as [`Error::NonFinite`]
//! instead of propagating silently.

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// A dense value plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddScalar { a: TensorId },
    Scale { a: TensorId, c: f64 },
    Relu { a: TensorId },
    Sqrt { a: TensorId },
    Sum { a: TensorId },
    Mean { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    MeanAxis { a: TensorId, axis: usize },
    GatherRows { a: TensorId, rows: Vec<usize> },
    RepeatRows { a: TensorId, n: usize },
    View { a: TensorId, offset: usize },
    SoftmaxCrossEntropy { logits: TensorId, labels: Vec<usize> },
}

/// Row-major matrix product: `a` is m×k, `b` is k×n, result m×n.
pub(crate) fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// The recording tape. One unit of single-threaded work; independent tapes
/// may run in parallel.
#[derive(Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Creates a differentiable input tensor.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dimension(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        self.push(data, shape, Op::Leaf, requires_grad)
    }

    /// Creates a non-differentiable tensor.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    /// A scalar constant (empty shape).
    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.constant(vec![v], vec![])
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Result<TensorId> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "operation {:?} produced {} (shape {:?})",
                op_name(&op),
                bad,
                shape
            )));
        }
        let id = TensorId(self.tensors.len());
        let grad = if requires_grad { vec![0.0; data.len()] } else { Vec::new() };
        self.tensors.push(Tensor { shape, data, requires_grad, grad });
        self.ops.push(op);
        Ok(id)
    }

    fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.tensor(id).data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensor(id).shape
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.tensor(id).grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.tensor(id).numel(), 1);
        self.tensor(id).data[0]
    }

    /// Resets every accumulated gradient to zero.
    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            for g in &mut t.grad {
                *g = 0.0;
            }
        }
    }

    fn dims_2d(&self, id: TensorId, ctx: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{ctx} requires a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims_2d(a, "matmul lhs")?;
        let (kb, n) = self.dims_2d(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: lhs {:?}, rhs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = matmul_2d(&self.tensor(a).data, &self.tensor(b).data, m, ka, n);
        self.push(data, vec![m, n], Op::MatMul { a, b }, false)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims_2d(a, "transpose")?;
        let src = &self.tensor(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(data, vec![c, r], Op::Transpose { a }, false)
    }

    fn binary(&mut self, a: TensorId, b: TensorId, kind: BinKind) -> Result<TensorId> {
        let (an, bn) = (self.tensor(a).numel(), self.tensor(b).numel());
        let same = self.tensor(a).shape == self.tensor(b).shape;
        if !same && an != 1 && bn != 1 {
            return Err(Error::Dimension(format!(
                "elementwise op on mismatched shapes {:?} and {:?} (only identical shapes or a scalar side are allowed)",
                self.shape(a),
                self.shape(b)
            )));
        }
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (data, shape) = if same {
            let av = &self.tensor(a).data;
            let bv = &self.tensor(b).data;
            (
                av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
                self.tensor(a).shape.clone(),
            )
        } else if bn == 1 {
            let s = self.tensor(b).data[0];
            (
                self.tensor(a).data.iter().map(|&x| f(x, s)).collect(),
                self.tensor(a).shape.clone(),
            )
        } else {
            let s = self.tensor(a).data[0];
            (
                self.tensor(b).data.iter().map(|&y| f(s, y)).collect(),
                self.tensor(b).shape.clone(),
            )
        };
        let op = match kind {
            BinKind::Add => Op::Add { a, b },
            BinKind::Sub => Op::Sub { a, b },
            BinKind::Mul => Op::Mul { a, b },
            BinKind::Div => Op::Div { a, b },
        };
        self.push(data, shape, op, false)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Div)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data = self.tensor(a).data.iter().map(|&x| x + c).collect();
        let shape = self.tensor(a).shape.clone();
        self.push(data, shape, Op::AddScalar { a }, false)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data = self.tensor(a).data.iter().map(|&x| x * c).collect();
        let shape = self.tensor(a).shape.clone();
        self.push(data, shape, Op::Scale { a, c }, false)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.tensor(a).data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.tensor(a).shape.clone();
        self.push(data, shape, Op::Relu { a }, false)
    }

    /// Elementwise max{x, 0}. Same kernel as [`Tape::relu`]; the subgradient
    /// at exactly 0 is 0.
    pub fn max_zero(&mut self, a: TensorId) -> Result<TensorId> {
        self.relu(a)
    }

    /// Elementwise square root. Inputs must be nonnegative; the backward
    /// contribution at an exact 0 is defined as 0 so degenerate distances do
    /// not poison the gradient.
    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(bad) = self.tensor(a).data.iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        let data = self.tensor(a).data.iter().map(|&x| x.sqrt()).collect();
        let shape = self.tensor(a).shape.clone();
        self.push(data, shape, Op::Sqrt { a }, false)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.tensor(a).data.iter().sum();
        self.push(vec![s], vec![], Op::Sum { a }, false)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.tensor(a).numel();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s: f64 = self.tensor(a).data.iter().sum();
        self.push(vec![s / n as f64], vec![], Op::Mean { a }, false)
    }

    /// Column sums (axis 0) or row sums (axis 1) of a matrix.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (r, c) = self.dims_2d(a, "sum_axis")?;
        if axis > 1 {
            return Err(Error::Contract(format!("sum_axis axis {axis} out of range")));
        }
        let src = &self.tensor(a).data;
        let data = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += src[i * c + j];
                }
            }
            out
        } else {
            (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect()
        };
        let shape = vec![if axis == 0 { c } else { r }];
        self.push(data, shape, Op::SumAxis { a, axis }, false)
    }

    /// Column means (axis 0) or row means (axis 1) of a matrix.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (r, c) = self.dims_2d(a, "mean_axis")?;
        if axis > 1 {
            return Err(Error::Contract(format!("mean_axis axis {axis} out of range")));
        }
        let denom = if axis == 0 { r } else { c };
        if denom == 0 {
            return Err(Error::Contract("mean_axis over an empty axis".into()));
        }
        let src = &self.tensor(a).data;
        let data: Vec<f64> = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += src[i * c + j];
                }
            }
            out.iter().map(|&x| x / r as f64).collect()
        } else {
            (0..r)
                .map(|i| src[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                .collect()
        };
        let shape = vec![if axis == 0 { c } else { r }];
        self.push(data, shape, Op::MeanAxis { a, axis }, false)
    }

    /// Selects rows of a matrix. Row indices may repeat.
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (r, c) = self.dims_2d(a, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of range for {r} rows")));
        }
        let src = &self.tensor(a).data;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(data, vec![rows.len(), c], Op::GatherRows { a, rows: rows.to_vec() }, false)
    }

    /// Tiles a length-d vector (or 1×d matrix) into n identical rows.
    pub fn repeat_rows(&mut self, a: TensorId, n: usize) -> Result<TensorId> {
        let s = self.shape(a);
        let d = match s {
            [d] => *d,
            [1, d] => *d,
            _ => {
                return Err(Error::Dimension(format!(
                    "repeat_rows requires a vector or single-row matrix, got shape {s:?}"
                )))
            }
        };
        let src = &self.tensor(a).data;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        self.push(data, vec![n, d], Op::RepeatRows { a, n }, false)
    }

    /// A window of a tensor's flat storage reinterpreted with a new shape.
    /// Gradients flow back into the corresponding slice of the source.
    pub fn view(&mut self, a: TensorId, offset: usize, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        let total = self.tensor(a).numel();
        if offset + numel > total {
            return Err(Error::Dimension(format!(
                "view [{offset}, {}) exceeds source length {total}",
                offset + numel
            )));
        }
        let data = self.tensor(a).data[offset..offset + numel].to_vec();
        self.push(data, shape, Op::View { a, offset }, false)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (n, classes) = self.dims_2d(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {} logit rows",
                labels.len(),
                n
            )));
        }
        if n == 0 {
            return Err(Error::Contract("softmax_cross_entropy on an empty batch".into()));
        }
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Domain(format!(
                "label {bad} at row {i} out of range for {classes} classes"
            )));
        }
        let data = &self.tensor(logits).data;
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &data[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[y];
        }
        self.push(
            vec![total / n as f64],
            vec![],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
            false,
        )
    }

    /// Propagates `d loss / d tensor` into every tensor's `grad` buffer.
    ///
    /// Adjoints are recomputed from scratch on each call and then added into
    /// the stored gradients, so repeated calls without [`Tape::zero_grads`]
    /// accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Vec<f64>> = self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        adj[loss.0][0] = 1.0;

        for i in (0..self.ops.len()).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            match &self.ops[i] {
                Op::Leaf => {
                    adj[i] = g;
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.tensors[a.0].shape[0], self.tensors[a.0].shape[1]);
                    let n = self.tensors[b.0].shape[1];
                    let bd = &self.tensors[b.0].data;
                    let ad = &self.tensors[a.0].data;
                    // dA = g · Bᵀ
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    let da = matmul_2d(&g, &bt, m, n, k);
                    // dB = Aᵀ · g
                    let mut at = vec![0.0; k * m];
                    for ii in 0..m {
                        for p in 0..k {
                            at[p * m + ii] = ad[ii * k + p];
                        }
                    }
                    let db = matmul_2d(&at, &g, k, m, n);
                    accumulate(&mut adj[a.0], &da);
                    accumulate(&mut adj[b.0], &db);
                }
                Op::Transpose { a } => {
                    let (r, c) = (self.tensors[a.0].shape[0], self.tensors[a.0].shape[1]);
                    let dst = &mut adj[a.0];
                    for i2 in 0..c {
                        for j in 0..r {
                            dst[j * c + i2] += g[i2 * r + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    self.binary_backward(&mut adj, *a, *b, &g, |_, _, gi| (gi, gi));
                }
                Op::Sub { a, b } => {
                    self.binary_backward(&mut adj, *a, *b, &g, |_, _, gi| (gi, -gi));
                }
                Op::Mul { a, b } => {
                    self.binary_backward(&mut adj, *a, *b, &g, |x, y, gi| (gi * y, gi * x));
                }
                Op::Div { a, b } => {
                    self.binary_backward(&mut adj, *a, *b, &g, |x, y, gi| (gi / y, -gi * x / (y * y)));
                }
                Op::AddScalar { a } => accumulate(&mut adj[a.0], &g),
                Op::Scale { a, c } => {
                    let dst = &mut adj[a.0];
                    for (d, &gi) in dst.iter_mut().zip(&g) {
                        *d += c * gi;
                    }
                }
                Op::Relu { a } => {
                    let src = &self.tensors[a.0].data;
                    let dst = &mut adj[a.0];
                    for ((d, &x), &gi) in dst.iter_mut().zip(src).zip(&g) {
                        if x > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Sqrt { a } => {
                    let out = &self.tensors[i].data;
                    let dst = &mut adj[a.0];
                    for ((d, &o), &gi) in dst.iter_mut().zip(out).zip(&g) {
                        if o > 0.0 {
                            *d += gi / (2.0 * o);
                        }
                    }
                }
                Op::Sum { a } => {
                    let dst = &mut adj[a.0];
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean { a } => {
                    let n = self.tensors[a.0].data.len() as f64;
                    let dst = &mut adj[a.0];
                    for d in dst.iter_mut() {
                        *d += g[0] / n;
                    }
                }
                Op::SumAxis { a, axis } => {
                    let (r, c) = (self.tensors[a.0].shape[0], self.tensors[a.0].shape[1]);
                    let dst = &mut adj[a.0];
                    for ii in 0..r {
                        for j in 0..c {
                            dst[ii * c + j] += if *axis == 0 { g[j] } else { g[ii] };
                        }
                    }
                }
                Op::MeanAxis { a, axis } => {
                    let (r, c) = (self.tensors[a.0].shape[0], self.tensors[a.0].shape[1]);
                    let denom = if *axis == 0 { r } else { c } as f64;
                    let dst = &mut adj[a.0];
                    for ii in 0..r {
                        for j in 0..c {
                            dst[ii * c + j] += (if *axis == 0 { g[j] } else { g[ii] }) / denom;
                        }
                    }
                }
                Op::GatherRows { a, rows } => {
                    let c = self.tensors[a.0].shape[1];
                    let dst = &mut adj[a.0];
                    for (r_out, &r_src) in rows.iter().enumerate() {
                        for j in 0..c {
                            dst[r_src * c + j] += g[r_out * c + j];
                        }
                    }
                }
                Op::RepeatRows { a, n } => {
                    let d = self.tensors[a.0].data.len();
                    let dst = &mut adj[a.0];
                    for r in 0..*n {
                        for j in 0..d {
                            dst[j] += g[r * d + j];
                        }
                    }
                }
                Op::View { a, offset } => {
                    let dst = &mut adj[a.0];
                    for (t, &gi) in g.iter().enumerate() {
                        dst[offset + t] += gi;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let (n, classes) =
                        (self.tensors[logits.0].shape[0], self.tensors[logits.0].shape[1]);
                    let data = &self.tensors[logits.0].data;
                    let dst = &mut adj[logits.0];
                    let g0 = g[0] / n as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &data[r * classes..(r + 1) * classes];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                        for c in 0..classes {
                            let p = (row[c] - max).exp() / denom;
                            let indicator = if c == y { 1.0 } else { 0.0 };
                            dst[r * classes + c] += g0 * (p - indicator);
                        }
                    }
                }
            }
            adj[i] = g;
        }

        for (t, a) in self.tensors.iter_mut().zip(&adj) {
            if t.requires_grad {
                accumulate(&mut t.grad, a);
            }
        }
        Ok(())
    }

    fn binary_backward(
        &self,
        adj: &mut [Vec<f64>],
        a: TensorId,
        b: TensorId,
        g: &[f64],
        df: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let an = self.tensors[a.0].data.len();
        let bn = self.tensors[b.0].data.len();
        let same = self.tensors[a.0].shape == self.tensors[b.0].shape;
        if same {
            for idx in 0..an {
                let (da, db) = df(self.tensors[a.0].data[idx], self.tensors[b.0].data[idx], g[idx]);
                adj[a.0][idx] += da;
                adj[b.0][idx] += db;
            }
        } else if bn == 1 {
            let y = self.tensors[b.0].data[0];
            for idx in 0..an {
                let (da, db) = df(self.tensors[a.0].data[idx], y, g[idx]);
                adj[a.0][idx] += da;
                adj[b.0][0] += db;
            }
        } else {
            let x = self.tensors[a.0].data[0];
            for idx in 0..bn {
                let (da, db) = df(x, self.tensors[b.0].data[idx], g[idx]);
                adj[a.0][0] += da;
                adj[b.0][idx] += db;
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Div { .. } => "div",
        Op::AddScalar { .. } => "add_scalar",
        Op::Scale { .. } => "scale",
        Op::Relu { .. } => "relu",
        Op::Sqrt { .. } => "sqrt",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::SumAxis { .. } => "sum_axis",
        Op::MeanAxis { .. } => "mean_axis",
        Op::GatherRows { .. } => "gather_rows",
        Op::RepeatRows { .. } => "repeat_rows",
        Op::View { .. } => "view",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}

/// SGD hyperparameters for local updates.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One SGD-with-momentum update:
/// `v ← momentum·v + g + weight_decay·w; w ← w − lr·v`.
///
/// `velocity` persists across steps of one local-training call and is reset
/// by the caller when a client receives fresh global weights.
pub fn sgd_step(params: &mut [f64], grads: &[f64], cfg: &SgdConfig, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Contract(format!(
            "sgd_step length mismatch: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
        *w -= cfg.learning_rate * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` w.r.t. one leaf, rebuilt per probe.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            g[i] = (up - down) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let c = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilation() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let b = t.constant(vec![0.0, 5.0], vec![2, 1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_at = |a: &[f64], b: &[f64]| {
            let mut t = Tape::new();
            let ai = t.leaf(a.to_vec(), vec![2, 3], true).unwrap();
            let bi = t.leaf(b.to_vec(), vec![3, 4], true).unwrap();
            let c = t.matmul(ai, bi).unwrap();
            let l = t.sum(c).unwrap();
            (t, ai, bi, l)
        };

        let (mut t, ai, bi, l) = loss_at(&a0, &b0);
        t.backward(l).unwrap();
        let ga = t.grad(ai).to_vec();
        let gb = t.grad(bi).to_vec();

        let na = fd_grad(|a| { let (t, _, _, l) = loss_at(a, &b0); t.scalar_value(l) }, &a0, 1e-5);
        let nb = fd_grad(|b| { let (t, _, _, l) = loss_at(&a0, b); t.scalar_value(l) }, &b0, 1e-5);
        assert!(max_rel_err(&ga, &na) <= 1e-6, "dA rel err {}", max_rel_err(&ga, &na));
        assert!(max_rel_err(&gb, &nb) <= 1e-6, "dB rel err {}", max_rel_err(&gb, &nb));
    }

    #[test]
    fn max_zero_clamps_and_mean_reduces() {
        let mut t = Tape::new();
        let x = t.constant(vec![-1.0, 0.0, 2.0], vec![3]).unwrap();
        let y = t.max_zero(x).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
        let m = t.constant(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let mm = t.mean(m).unwrap();
        assert_eq!(t.scalar_value(mm), 2.0);
    }

    #[test]
    fn max_zero_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0], vec![1], true).unwrap();
        let y = t.max_zero(x).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[0.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut t = Tape::new();
        let logits = t.constant(vec![0.5; 8], vec![2, 4]).unwrap();
        let l = t.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert!((t.scalar_value(l) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_saturated_correct_class() {
        let mut t = Tape::new();
        let logits = t.constant(vec![1e6, 0.0, 0.0, 0.0], vec![1, 4]).unwrap();
        let l = t.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(t.scalar_value(l).abs() < 1e-9);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let mut t = Tape::new();
        let logits = t.constant(vec![0.0; 4], vec![1, 4]).unwrap();
        let err = t.softmax_cross_entropy(logits, &[4]).unwrap_err();
        assert_eq!(err.category(), "domain");
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = [2usize, 0, 1];
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let id = t.leaf(x.to_vec(), vec![3, 4], true).unwrap();
            let l = t.softmax_cross_entropy(id, &labels).unwrap();
            (t, id, l)
        };
        let (mut t, id, l) = eval(&x0);
        t.backward(l).unwrap();
        let g = t.grad(id).to_vec();
        let n = fd_grad(|x| { let (t, _, l) = eval(x); t.scalar_value(l) }, &x0, 1e-5);
        assert!(max_rel_err(&g, &n) <= 1e-5, "rel err {}", max_rel_err(&g, &n));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0, -1.0, 0.5, 9.0], vec![2, 2], true).unwrap();
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[1.0; 4]);
    }

    #[test]
    fn backward_zero_scaled_loss_gives_zeros() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0, -1.0], vec![2], true).unwrap();
        let s = t.sum(x).unwrap();
        let l = t.scale(s, 0.0).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert_eq!(t.backward(x).unwrap_err().category(), "contract");
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0], vec![1], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[4.0]);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[8.0]);
        t.zero_grads();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), &[4.0]);
    }

    #[test]
    fn backward_is_repeatable_after_zeroing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let x = t.leaf(x0, vec![2, 5], true).unwrap();
        let r = t.relu(x).unwrap();
        let s = t.mul(r, r).unwrap();
        let l = t.mean(s).unwrap();
        t.backward(l).unwrap();
        let first = t.grad(x).to_vec();
        t.zero_grads();
        t.backward(l).unwrap();
        assert_eq!(first, t.grad(x));
    }

    #[test]
    fn composite_expression_gradient_matches_finite_differences() {
        // Touches div, sqrt, gather, repeat, axis reductions in one graph.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x0: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..2.0)).collect();
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let id = t.leaf(x.to_vec(), vec![4, 3], true).unwrap();
            let mu = t.mean_axis(id, 0).unwrap();
            let tiled = t.repeat_rows(mu, 4).unwrap();
            let centered = t.sub(id, tiled).unwrap();
            let sq = t.mul(centered, centered).unwrap();
            let rows = t.sum_axis(sq, 1).unwrap();
            let dist = t.sqrt(rows).unwrap();
            let picked = t.gather_rows(id, &[0, 2]).unwrap();
            let picked_sum = t.sum(picked).unwrap();
            let dist_mean = t.mean(dist).unwrap();
            let both = t.add(dist_mean, picked_sum).unwrap();
            let l = t.scale(both, 0.5).unwrap();
            (t, id, l)
        };
        let (mut t, id, l) = eval(&x0);
        t.backward(l).unwrap();
        let g = t.grad(id).to_vec();
        let n = fd_grad(|x| { let (t, _, l) = eval(x); t.scalar_value(l) }, &x0, 1e-5);
        assert!(max_rel_err(&g, &n) <= 1e-5, "rel err {}", max_rel_err(&g, &n));
    }

    #[test]
    fn scalar_broadcast_binary_ops() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
        let s = t.leaf(vec![2.0], vec![], true).unwrap();
        let y = t.mul(x, s).unwrap();
        assert_eq!(t.value(y), &[2.0, 4.0, 6.0]);
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(s), &[6.0]);
        assert_eq!(t.grad(x), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn nonfinite_result_is_rejected() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0], vec![1]).unwrap();
        let b = t.constant(vec![0.0], vec![1]).unwrap();
        let err = t.div(a, b).unwrap_err();
        assert_eq!(err.category(), "nonfinite");
    }

    #[test]
    fn sgd_plain_step() {
        let mut w = vec![1.0];
        let mut v = vec![0.0];
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut w, &[2.0], &cfg, &mut v).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_rejected_by_validation_but_step_is_identity() {
        let cfg = SgdConfig { learning_rate: 0.0, momentum: 0.0, weight_decay: 0.0 };
        assert!(cfg.validate().is_err());
        // The raw step with a zero rate leaves parameters untouched.
        let mut w = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut w, &[3.0, -4.0], &cfg, &mut v).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_momentum_matches_hand_recursion() {
        // v1 = g1; w1 = w0 - lr*v1
        // v2 = 0.9*v1 + g2; w2 = w1 - lr*v2
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut w = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut w, &[2.0], &cfg, &mut v).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15);
        assert!((w[0] - 0.8).abs() < 1e-15);
        sgd_step(&mut w, &[1.0], &cfg, &mut v).unwrap();
        let v2 = 0.9 * 2.0 + 1.0;
        assert!((v[0] - v2).abs() < 1e-15);
        assert!((w[0] - (0.8 - 0.1 * v2)).abs() < 1e-15);
    }

    #[test]
    fn sgd_length_mismatch() {
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut w = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        assert_eq!(
            sgd_step(&mut w, &[1.0], &cfg, &mut v).unwrap_err().category(),
            "contract"
        );
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x0: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut t = Tape::new();
            let x = t.leaf(x0, vec![4, 5], true).unwrap();
            let w = t.leaf(vec![0.1; 15], vec![5, 3], true).unwrap();
            let h = t.matmul(x, w).unwrap();
            let r = t.relu(h).unwrap();
            let l = t.mean(r).unwrap();
            t.backward(l).unwrap();
            (t.grad(x).to_vec(), t.grad(w).to_vec())
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }
}
