//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Every forward operation is recorded on a [`Tape`]; [`Tape::backward`]
//! replays the records in reverse execution order exactly once and leaves
//! gradients on all `requires_grad` leaves. Storage is row-major `Vec<T>`,
//! no broadcasting beyond the bias add in `linear` and scalar ops: model
//! code is written to explicit shapes, which keeps shape bugs loud.
//!
//! Forward outputs are checked for NaN/Inf after every op; a violation is
//! an error naming the op, never a silent poisoned value.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional value grid, the carrier for all model math.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Populated by `Tape::backward` for `requires_grad` nodes.
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Usage(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Usage(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len().max(1);
        Tensor::new(vec![n], data).expect("vector construction")
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel]).expect("zeros construction")
    }

    /// Marks this tensor as a gradient target when used as a tape leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols view of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape { op: "dims2", detail: format!("expected 2-D, got {s:?}") }),
        }
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Recorded forward operation; inputs are tape handles.
#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulScalar { x: TensorId, c: T },
    Scale { x: TensorId, s: TensorId },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Sigmoid { x: TensorId },
    Gelu { x: TensorId },
    SoftmaxRows { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: T },
    MeanPoolRows { x: TensorId },
    ConcatLastAxis { parts: Vec<TensorId> },
    Sum { x: TensorId },
    Mse { pred: TensorId, target: TensorId },
}

struct Record<T: Scalar> {
    op: Op<T>,
    out: TensorId,
}

/// Ordered record of executed ops with their inputs and outputs, enough to
/// run backward passes. Single-threaded per tape.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    records: Vec<Record<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), records: Vec::new() }
    }

    /// Number of tensors held by the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, t: Tensor<T>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        self.records.push(Record { op: Op::Leaf, out: id });
        id
    }

    /// Leaf that participates in the backward pass.
    pub fn param(&mut self, t: Tensor<T>) -> TensorId {
        self.leaf(t.with_grad())
    }

    /// Leaf that is held constant (inputs, encodings, targets).
    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].shape()
    }

    /// Gradient of a node after `backward`; `None` if not a gradient target.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, op: Op<T>, out: Tensor<T>, name: &'static str) -> Result<TensorId> {
        if !out.is_finite() {
            return Err(Error::NonFinite { op: name, context: String::new() });
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(out);
        self.records.push(Record { op, out: id });
        Ok(id)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// `C[m x n] = A[m x k] B[k x n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!(
                    "inner dimensions disagree: lhs {:?} vs rhs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, ka, n, T::one(), self.data(a), self.data(b), T::zero(), &mut out);
        self.push(Op::Matmul { a, b }, Tensor::matrix(m, n, out)?, "matmul")
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        self.push(Op::Transpose { x }, Tensor::matrix(n, m, out)?, "transpose")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<T> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add { a, b }, Tensor::new(shape, data)?, "add")
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<T> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul { a, b }, Tensor::new(shape, data)?, "mul")
    }

    /// Multiplication by a compile-time constant (not a tape value).
    pub fn mul_scalar(&mut self, x: TensorId, c: T) -> Result<TensorId> {
        let data: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::MulScalar { x, c }, Tensor::new(shape, data)?, "mul_scalar")
    }

    /// Multiplication by a single-element tape tensor (gradient flows to it).
    pub fn scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "scale",
                detail: format!("scale factor must be a single element, got {:?}", self.shape(s)),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<T> = self.data(x).iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, s }, Tensor::new(shape, data)?, "scale")
    }

    /// `y[m x n] = x[m x k] w[k x n] + b[n]` with the bias broadcast over rows.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, kx) = self.value(x).dims2()?;
        let (kw, n) = self.value(w).dims2()?;
        if kx != kw || self.value(b).numel() != n {
            return Err(Error::Shape {
                op: "linear",
                detail: format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, kx, n, T::one(), self.data(x), self.data(w), T::zero(), &mut out);
        let bias = self.data(b);
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(Op::Linear { x, w, b }, Tensor::matrix(m, n, out)?, "linear")
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.data(x).iter().map(|&v| sigmoid_val(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid { x }, Tensor::new(shape, data)?, "sigmoid")
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.data(x).iter().map(|&v| gelu_val(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu { x }, Tensor::new(shape, data)?, "gelu")
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push(Op::SoftmaxRows { x }, Tensor::matrix(m, n, out)?, "softmax_rows")
    }

    /// Per-last-axis standardization then affine: `gain * (x-mu)/sqrt(var+eps) + bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: T,
    ) -> Result<TensorId> {
        if eps <= T::zero() {
            return Err(Error::Usage(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        let xd = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![T::zero(); m * n];
        let inv_n = T::one() / T::from_usize(n).unwrap();
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().cloned().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let inv = T::one() / (var + eps).sqrt();
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        self.push(
            Op::LayerNorm { x, gain, bias, eps },
            Tensor::matrix(m, n, out)?,
            "layer_norm",
        )
    }

    /// `[m x n] -> [1 x n]` mean over rows.
    pub fn mean_pool_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.data(x);
        let inv_m = T::one() / T::from_usize(m).unwrap();
        let mut out = vec![T::zero(); n];
        for row in xd.chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv_m;
        }
        self.push(Op::MeanPoolRows { x }, Tensor::matrix(1, n, out)?, "mean_pool_rows")
    }

    /// Concatenates 2-D tensors with equal row counts along the feature axis.
    pub fn concat_last_axis(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_last_axis: no inputs".into()));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.value(p).dims2()?;
            if mp != m {
                return Err(Error::Shape {
                    op: "concat_last_axis",
                    detail: format!("row counts disagree: {:?} vs {:?}", self.shape(parts[0]), self.shape(p)),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for i in 0..m {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(
            Op::ConcatLastAxis { parts: parts.to_vec() },
            Tensor::matrix(m, total, out)?,
            "concat_last_axis",
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.data(x).iter().cloned().sum::<T>();
        self.push(Op::Sum { x }, Tensor::scalar(s), "sum")
    }

    /// Mean squared error over all elements of two same-shape tensors.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Shape {
                op: "mse",
                detail: format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            });
        }
        let inv_n = T::one() / T::from_usize(self.value(pred).numel()).unwrap();
        let s = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            * inv_n;
        self.push(Op::Mse { pred, target }, Tensor::scalar(s), "mse")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits recorded ops in reverse
    /// execution order exactly once; afterwards every `requires_grad`
    /// leaf holds a gradient (zeros when unreachable from the loss).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for rec in self.records.iter().rev() {
            let gout = match grads[rec.out.0].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(&rec.op, rec.out, &gout, &mut grads);
            // Keep the output gradient available for inspection on
            // requires_grad intermediates.
            grads[rec.out.0] = Some(gout);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                node.grad = Some(match grads[i].take() {
                    Some(g) => g,
                    None => vec![T::zero(); node.numel()],
                });
            }
        }
        Ok(())
    }

    fn backprop(&self, op: &Op<T>, out: TensorId, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                {
                    let ga = acc(grads, a.0, m * k);
                    // dA += dC B^T
                    T::gemm(false, true, m, n, k, T::one(), gout, self.data(*b), T::one(), ga);
                }
                {
                    let gb = acc(grads, b.0, k * n);
                    // dB += A^T dC
                    T::gemm(true, false, k, m, n, T::one(), self.data(*a), gout, T::one(), gb);
                }
            }
            Op::Transpose { x } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let gx = acc(grads, x.0, m * n);
                for i in 0..n {
                    for j in 0..m {
                        gx[j * n + i] += gout[i * m + j];
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    let g = acc(grads, id.0, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                {
                    let ga = acc(grads, a.0, gout.len());
                    for ((gi, &go), &bv) in ga.iter_mut().zip(gout).zip(bd) {
                        *gi += go * bv;
                    }
                }
                {
                    let gb = acc(grads, b.0, gout.len());
                    for ((gi, &go), &av) in gb.iter_mut().zip(gout).zip(ad) {
                        *gi += go * av;
                    }
                }
            }
            Op::MulScalar { x, c } => {
                let gx = acc(grads, x.0, gout.len());
                for (gi, &go) in gx.iter_mut().zip(gout) {
                    *gi += go * *c;
                }
            }
            Op::Scale { x, s } => {
                let sv = self.data(*s)[0];
                let xd = self.data(*x);
                {
                    let gx = acc(grads, x.0, gout.len());
                    for (gi, &go) in gx.iter_mut().zip(gout) {
                        *gi += go * sv;
                    }
                }
                {
                    let gs = acc(grads, s.0, 1);
                    gs[0] += gout.iter().zip(xd).map(|(&go, &xv)| go * xv).sum::<T>();
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.value(*x).dims2().unwrap();
                let (_, n) = self.value(*w).dims2().unwrap();
                {
                    let gx = acc(grads, x.0, m * k);
                    T::gemm(false, true, m, n, k, T::one(), gout, self.data(*w), T::one(), gx);
                }
                {
                    let gw = acc(grads, w.0, k * n);
                    T::gemm(true, false, k, m, n, T::one(), self.data(*x), gout, T::one(), gw);
                }
                {
                    let gb = acc(grads, b.0, n);
                    for row in gout.chunks_exact(n) {
                        for (gi, &go) in gb.iter_mut().zip(row) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = self.data(out);
                let gx = acc(grads, x.0, gout.len());
                for ((gi, &go), &yv) in gx.iter_mut().zip(gout).zip(y) {
                    *gi += go * yv * (T::one() - yv);
                }
            }
            Op::Gelu { x } => {
                let xd = self.data(*x);
                let gx = acc(grads, x.0, gout.len());
                for ((gi, &go), &xv) in gx.iter_mut().zip(gout).zip(xd) {
                    *gi += go * gelu_grad(xv);
                }
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let y = self.data(out);
                let gx = acc(grads, x.0, m * n);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gout[i * n..(i + 1) * n];
                    let dot = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum::<T>();
                    let gxr = &mut gx[i * n..(i + 1) * n];
                    for j in 0..n {
                        gxr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let xd = self.data(*x);
                let g = self.data(*gain);
                let inv_n = T::one() / T::from_usize(n).unwrap();
                {
                    let gx = acc(grads, x.0, m * n);
                    for i in 0..m {
                        let row = &xd[i * n..(i + 1) * n];
                        let gr = &gout[i * n..(i + 1) * n];
                        let mean = row.iter().cloned().sum::<T>() * inv_n;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                        let inv = T::one() / (var + *eps).sqrt();
                        // dxhat, then the standard compact layer-norm backward
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..n {
                            let xh = (row[j] - mean) * inv;
                            let dxh = gr[j] * g[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let gxr = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            let xh = (row[j] - mean) * inv;
                            let dxh = gr[j] * g[j];
                            gxr[j] += inv
                                * inv_n
                                * (T::from_usize(n).unwrap() * dxh - sum_dxh - xh * sum_dxh_xh);
                        }
                    }
                }
                {
                    let gg = acc(grads, gain.0, n);
                    for i in 0..m {
                        let row = &xd[i * n..(i + 1) * n];
                        let gr = &gout[i * n..(i + 1) * n];
                        let mean = row.iter().cloned().sum::<T>() * inv_n;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                        let inv = T::one() / (var + *eps).sqrt();
                        for j in 0..n {
                            gg[j] += gr[j] * (row[j] - mean) * inv;
                        }
                    }
                }
                {
                    let gb = acc(grads, bias.0, n);
                    for row in gout.chunks_exact(n) {
                        for (gi, &go) in gb.iter_mut().zip(row) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::MeanPoolRows { x } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let inv_m = T::one() / T::from_usize(m).unwrap();
                let gx = acc(grads, x.0, m * n);
                for row in gx.chunks_exact_mut(n) {
                    for (gi, &go) in row.iter_mut().zip(gout) {
                        *gi += go * inv_m;
                    }
                }
            }
            Op::ConcatLastAxis { parts } => {
                let (m, total) = self.value(out).dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    let gp = acc(grads, p.0, m * w);
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += gout[i * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum { x } => {
                let go = gout[0];
                let numel = self.value(*x).numel();
                let gx = acc(grads, x.0, numel);
                for gi in gx.iter_mut() {
                    *gi += go;
                }
            }
            Op::Mse { pred, target } => {
                let go = gout[0];
                let n = self.value(*pred).numel();
                let two_inv_n = T::from_f64_c(2.0) / T::from_usize(n).unwrap();
                let (pd, td) = (self.data(*pred), self.data(*target));
                {
                    let gp = acc(grads, pred.0, n);
                    for ((gi, &p), &t) in gp.iter_mut().zip(pd).zip(td) {
                        *gi += go * two_inv_n * (p - t);
                    }
                }
                {
                    let gt = acc(grads, target.0, n);
                    for ((gi, &p), &t) in gt.iter_mut().zip(pd).zip(td) {
                        *gi -= go * two_inv_n * (p - t);
                    }
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, numel: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); numel])
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// tanh-form GELU; smooth, so analytic and finite-difference derivatives agree.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val<T: Scalar>(x: T) -> T {
    let c = T::from_f64_c(GELU_C);
    let a = T::from_f64_c(GELU_A);
    let half = T::from_f64_c(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_c(GELU_C);
    let a = T::from_f64_c(GELU_A);
    let half = T::from_f64_c(0.5);
    let three = T::from_f64_c(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    /// Scalar triple-loop matrix product, the independent oracle for matmul.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn lcg(seed: &mut u64) -> f64 {
        // Simple deterministic generator for oracle tests.
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let i2 = t.constant(T64::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.constant(T64::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.matmul(i2, m).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_zeroes_row() {
        let mut t = tape();
        let p = t.constant(T64::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let m = t.constant(T64::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = t.matmul(p, m).unwrap();
        assert_eq!(t.data(y), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut seed = 42u64;
        let a: Vec<f64> = (0..12).map(|_| lcg(&mut seed)).collect();
        let b: Vec<f64> = (0..8).map(|_| lcg(&mut seed)).collect();
        let expect = matmul_oracle(&a, &b, 3, 4, 2);
        let mut t = tape();
        let ai = t.constant(T64::matrix(3, 4, a).unwrap());
        let bi = t.constant(T64::matrix(4, 2, b).unwrap());
        let y = t.matmul(ai, bi).unwrap();
        for (got, want) in t.data(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = tape();
        let a = t.constant(T64::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.constant(T64::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "message: {msg}");
    }

    #[test]
    fn softmax_uniform_under_equal_logits() {
        let mut t = tape();
        let x = t.constant(T64::matrix(1, 3, vec![0.0; 3]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        for &v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_saturation_is_stable() {
        let mut t = tape();
        let x = t.constant(T64::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        assert!(t.data(y)[0] >= 1.0 - 1e-12);
        assert!(t.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        // Independent high-precision evaluation of exp-normalize.
        let logits = [1.0f64, 2.0, 3.0];
        let exps: Vec<f64> = logits.iter().map(|&v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|&e| e / sum).collect();

        let mut t = tape();
        let x = t.constant(T64::matrix(1, 3, logits.to_vec()).unwrap());
        let y = t.softmax_rows(x).unwrap();
        for (got, want) in t.data(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_large_logits() {
        let mut seed = 7u64;
        for _ in 0..20 {
            let data: Vec<f64> = (0..12).map(|_| lcg(&mut seed) * 1e3).collect();
            let mut t = tape();
            let x = t.constant(T64::matrix(3, 4, data).unwrap());
            let y = t.softmax_rows(x).unwrap();
            for row in t.data(y).chunks_exact(4) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            }
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut t = tape();
        let x = t.constant(T64::vector(vec![0.0, 2.0, -3.7, 11.0]));
        let y = t.sigmoid(x).unwrap();
        let yd = t.data(y).to_vec();
        assert_eq!(yd[0], 0.5);
        let xn = t.constant(T64::vector(vec![0.0, -2.0, 3.7, -11.0]));
        let yn = t.sigmoid(xn).unwrap();
        for (a, b) in yd.iter().zip(t.data(yn)) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_matches_reference_value() {
        // 1/(1+e^-2) evaluated independently.
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((expect - 0.8807970779778823).abs() < 1e-15);
        let mut t = tape();
        let x = t.constant(T64::scalar(2.0));
        let y = t.sigmoid(x).unwrap();
        assert!((t.data(y)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = tape();
        let x = t.constant(T64::matrix(1, 4, vec![3.5; 4]).unwrap());
        let g = t.constant(T64::vector(vec![1.0; 4]));
        let b = t.constant(T64::vector(vec![0.0; 4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in t.data(y) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_centers_rows() {
        let mut seed = 3u64;
        let data: Vec<f64> = (0..8).map(|_| lcg(&mut seed) * 5.0).collect();
        let mut t = tape();
        let x = t.constant(T64::matrix(2, 4, data).unwrap());
        let g = t.constant(T64::vector(vec![1.0; 4]));
        let b = t.constant(T64::vector(vec![0.0; 4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for row in t.data(y).chunks_exact(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let row = [1.0f64, 2.0, 3.0];
        let eps = 1e-5;
        // Direct formula evaluated independently.
        let mean = 2.0;
        let var = ((1.0f64 - 2.0).powi(2) + 0.0 + (3.0f64 - 2.0).powi(2)) / 3.0;
        let expect: Vec<f64> = row.iter().map(|&v| (v - mean) / (var + eps).sqrt()).collect();

        let mut t = tape();
        let x = t.constant(T64::matrix(1, 3, row.to_vec()).unwrap());
        let g = t.constant(T64::vector(vec![1.0; 3]));
        let b = t.constant(T64::vector(vec![0.0; 3]));
        let y = t.layer_norm(x, g, b, eps).unwrap();
        for (got, want) in t.data(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_pool_single_row_is_identity() {
        let mut t = tape();
        let x = t.constant(T64::matrix(1, 3, vec![4.0, 5.0, 6.0]).unwrap());
        let y = t.mean_pool_rows(x).unwrap();
        assert_eq!(t.data(y), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn gelu_zero_is_zero() {
        let mut t = tape();
        let x = t.constant(T64::scalar(0.0));
        let y = t.gelu(x).unwrap();
        assert_eq!(t.data(y)[0], 0.0);
    }

    #[test]
    fn linear_identity() {
        let mut t = tape();
        let x = t.constant(T64::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = t.constant(T64::matrix(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ).unwrap());
        let b = t.constant(T64::vector(vec![0.0; 3]));
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = tape();
        let x = t.param(T64::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_sum_is_x() {
        let data = vec![1.5, -0.25, 2.0, 0.0];
        let mut t = tape();
        let x = t.param(T64::matrix(2, 2, data.clone()).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let loss = t.mul_scalar(s, 0.5).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), data.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = tape();
        let x = t.param(T64::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn non_finite_output_is_an_error_naming_the_op() {
        let mut t = tape();
        let x = t.constant(T64::scalar(1e308));
        let err = t.mul(x, x).unwrap_err();
        match err {
            Error::NonFinite { op, .. } => assert_eq!(op, "mul"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let run = || {
            let mut seed = 99u64;
            let data: Vec<f64> = (0..12).map(|_| lcg(&mut seed)).collect();
            let w: Vec<f64> = (0..12).map(|_| lcg(&mut seed)).collect();
            let mut t = tape();
            let x = t.param(T64::matrix(3, 4, data).unwrap());
            let wi = t.param(T64::matrix(4, 3, w).unwrap());
            let y = t.matmul(x, wi).unwrap();
            let a = t.gelu(y).unwrap();
            let sm = t.softmax_rows(a).unwrap();
            let loss = t.sum(sm).unwrap();
            t.backward(loss).unwrap();
            (
                t.data(loss).to_vec(),
                t.grad(x).unwrap().to_vec(),
                t.grad(wi).unwrap().to_vec(),
            )
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1, l2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn concat_then_split_grads() {
        let mut t = tape();
        let a = t.param(T64::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.param(T64::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let y = t.concat_last_axis(&[a, b]).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(t.grad(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut t = tape();
        let x = t.param(T64::scalar(1.0));
        let unused = t.param(T64::matrix(1, 2, vec![7.0, 8.0]).unwrap());
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn mse_basics() {
        let mut t = tape();
        let p = t.param(T64::vector(vec![3.0, 5.0]));
        let y = t.constant(T64::vector(vec![1.0, 3.0]));
        let loss = t.mse(p, y).unwrap();
        assert!((t.data(loss)[0] - 4.0).abs() < 1e-15);
        t.backward(loss).unwrap();
        // 2(p-t)/n = 2*2/2 = 2
        assert_eq!(t.grad(p).unwrap(), &[2.0, 2.0]);
    }
}
