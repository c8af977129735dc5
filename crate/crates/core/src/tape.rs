//! Wengert tape: every operation appends a record during the forward pass;
//! `backward` replays the records in reverse, accumulating gradients into
//! each node. Graph construction and backward are single-threaded per tape;
//! independent tapes may run on different threads. Op-internal loops go
//! through [`crate::kernels`], which keeps reduction order fixed.

use crate::kernels;
use crate::scalar::{s, Scalar};
use crate::tensor::{numel, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Sqrt,
    Recip,
}

#[derive(Debug)]
enum Record {
    Binary { kind: BinaryKind, a: usize, b: usize, out: usize },
    Unary { kind: UnaryKind, x: usize, out: usize },
    /// y = mul·x + add
    Affine { x: usize, out: usize, mul: f64 },
    MatMul { a: usize, b: usize, out: usize },
    Transpose { x: usize, out: usize },
    Conv2d { input: usize, kernel: usize, out: usize, geom: kernels::ConvGeom },
    Softmax { x: usize, out: usize, axis: usize },
    LogSoftmax { x: usize, out: usize, axis: usize },
    L2NormLast { x: usize, out: usize },
    GatherRows { x: usize, out: usize, indices: Vec<usize> },
    TakePerRow { x: usize, out: usize, indices: Vec<usize> },
    ScaleRows { x: usize, scale: usize, out: usize },
    SliceRows { x: usize, out: usize, start: usize },
    SliceCols { x: usize, out: usize, start: usize },
    ConcatRows { xs: Vec<usize>, out: usize },
    ConcatCols { a: usize, b: usize, out: usize },
    Reshape { x: usize, out: usize },
    SumAll { x: usize, out: usize },
    SumAxis0 { x: usize, out: usize },
    StopGradient,
    /// Straight-through top-k indicator: forward is the 0/1 mask, backward
    /// passes the upstream gradient to the score input unchanged.
    StMask { scores: usize, out: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
}

/// Records operations eagerly and replays them in reverse on [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    records: Vec<Record>,
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

    fn push_node(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, grad: Vec::new(), requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients (inputs, masks, labels).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.push_node(shape, data, false)
    }

    /// Leaf that accumulates gradients (parameters).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.push_node(shape, data, true)
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.push_node(vec![1], vec![v], false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node holds a valid tensor")
    }

    /// Gradient slice of a node; empty until `backward` has run.
    pub fn grad(&self, v: Var) -> &[T] {
        &self.nodes[v.0].grad
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        if node.grad.is_empty() {
            Tensor::zeros(node.shape.clone())
        } else {
            Tensor::new(node.shape.clone(), node.grad.clone()).expect("grad matches shape")
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn out_of(&mut self, shape: Vec<usize>, value: Vec<T>, inputs: &[usize]) -> Var {
        let requires = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(shape, value, requires)
    }

    // ── Element-wise ops ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match kind {
            BinaryKind::Add => map2_bcast(va, vb, |x, y| x + y),
            BinaryKind::Sub => map2_bcast(va, vb, |x, y| x - y),
            BinaryKind::Mul => map2_bcast(va, vb, |x, y| x * y),
        };
        let out = self.out_of(out_shape, value, &[a.0, b.0]);
        self.records.push(Record::Binary { kind, a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Recip, x)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let value = match kind {
            UnaryKind::Relu => kernels::map1(vx, |v| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::Sigmoid => kernels::map1(vx, sigmoid_stable),
            UnaryKind::Tanh => kernels::map1(vx, |v| v.tanh()),
            UnaryKind::Sqrt => kernels::map1(vx, |v| v.sqrt()),
            UnaryKind::Recip => kernels::map1(vx, |v| T::one() / v),
        };
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_of(shape, value, &[x.0]);
        self.records.push(Record::Unary { kind, x: x.0, out: out.0 });
        out
    }

    /// y = c·x
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// y = x + c
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let (m, a) = (s::<T>(mul), s::<T>(add));
        let value = kernels::map1(&self.nodes[x.0].value, |v| m * v + a);
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_of(shape, value, &[x.0]);
        self.records.push(Record::Affine { x: x.0, out: out.0, mul });
        out
    }

    // ── Linear algebra ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("expected [m×k]·[k×n], got {sa:?} · {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let out = self.out_of(vec![m, n], value, &[a.0, b.0]);
        self.records.push(Record::MatMul { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(TensorError::shape("transpose", format!("expected 2-d, got {sx:?}")));
        }
        let (m, n) = (sx[0], sx[1]);
        let value = transpose_copy(&self.nodes[x.0].value, m, n);
        let out = self.out_of(vec![n, m], value, &[x.0]);
        self.records.push(Record::Transpose { x: x.0, out: out.0 });
        Ok(out)
    }

    /// 2-D convolution over `[h, w, c_in]` or `[batch, h, w, c_in]` input with
    /// a `[kh, kw, c_in, c_out]` kernel. Same-padding output is the
    /// ceil-division of the input extent by the stride, zero padding split
    /// symmetrically with the extra row on the high side.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::arg("conv2d", "stride must be positive"));
        }
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        if sk.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel must be [kh,kw,c_in,c_out], got {sk:?}"),
            ));
        }
        let (batched, batch, in_h, in_w, c_in) = match si.len() {
            3 => (false, 1, si[0], si[1], si[2]),
            4 => (true, si[0], si[1], si[2], si[3]),
            _ => {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("input must be [h,w,c] or [b,h,w,c], got {si:?}"),
                ))
            }
        };
        if sk[2] != c_in {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {c_in}", sk[2]),
            ));
        }
        let (kh, kw, c_out) = (sk[0], sk[1], sk[3]);
        let (out_h, pad_top) = conv_extent(in_h, kh, stride, padding)?;
        let (out_w, pad_left) = conv_extent(in_w, kw, stride, padding)?;
        let geom = kernels::ConvGeom {
            batch,
            in_h,
            in_w,
            c_in,
            kh,
            kw,
            c_out,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        };
        let value = kernels::conv2d_forward(&self.nodes[input.0].value, &self.nodes[kernel.0].value, &geom);
        let out_shape = if batched {
            vec![batch, out_h, out_w, c_out]
        } else {
            vec![out_h, out_w, c_out]
        };
        let out = self.out_of(out_shape, value, &[input.0, kernel.0]);
        self.records.push(Record::Conv2d { input: input.0, kernel: kernel.0, out: out.0, geom });
        Ok(out)
    }

    // ── Normalization and reductions ──────────────────────────────────

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::arg(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let value = softmax_values(&self.nodes[x.0].value, &shape, axis, false);
        let out = self.out_of(shape, value, &[x.0]);
        self.records.push(Record::Softmax { x: x.0, out: out.0, axis });
        Ok(out)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::arg(
                "log_softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let value = softmax_values(&self.nodes[x.0].value, &shape, axis, true);
        let out = self.out_of(shape, value, &[x.0]);
        self.records.push(Record::LogSoftmax { x: x.0, out: out.0, axis });
        Ok(out)
    }

    /// Per-row L2 norm over the last axis: `[.., d] -> [..]`. The all-zero
    /// row uses subgradient 0.
    pub fn l2_norm_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() < 2 {
            return Err(TensorError::shape(
                "l2_norm_last",
                format!("need at least 2 axes, got {shape:?}"),
            ));
        }
        let d = *shape.last().unwrap();
        let rows = numel(&shape) / d;
        let vx = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            value.push(kernels::dot(row, row).sqrt());
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        let out = self.out_of(out_shape, value, &[x.0]);
        self.records.push(Record::L2NormLast { x: x.0, out: out.0 });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = kernels::sum_seq(&self.nodes[x.0].value);
        let out = self.out_of(vec![1], vec![v], &[x.0]);
        self.records.push(Record::SumAll { x: x.0, out: out.0 });
        out
    }

    /// Sums over the first axis in ascending index order: `[n, ..] -> [1, ..]`.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() < 2 {
            return Err(TensorError::shape(
                "sum_axis0",
                format!("need at least 2 axes, got {shape:?}"),
            ));
        }
        let rest = numel(&shape[1..]);
        let vx = &self.nodes[x.0].value;
        let mut value = vec![T::zero(); rest];
        for r in 0..shape[0] {
            for j in 0..rest {
                value[j] += vx[r * rest + j];
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = 1;
        let out = self.out_of(out_shape, value, &[x.0]);
        self.records.push(Record::SumAxis0 { x: x.0, out: out.0 });
        Ok(out)
    }

    // ── Indexing and layout ───────────────────────────────────────────

    /// Copies the given rows of `x` (viewed as `[n, last]`, `n` the product
    /// of all leading extents) into a `[k, last]` tensor. Backward scatters
    /// gradients into the selected rows and leaves every other row exactly
    /// zero; duplicate indices accumulate.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap();
        let n = numel(&shape) / d;
        if indices.is_empty() {
            return Err(TensorError::arg("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::arg(
                "gather_rows",
                format!("index {bad} out of range for {n} rows"),
            ));
        }
        let vx = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            value.extend_from_slice(&vx[i * d..(i + 1) * d]);
        }
        let out = self.out_of(vec![indices.len(), d], value, &[x.0]);
        self.records.push(Record::GatherRows { x: x.0, out: out.0, indices: indices.to_vec() });
        Ok(out)
    }

    /// Picks one element per row of a 2-d tensor: `out[i] = x[i, idx[i]]`.
    pub fn take_per_row(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::shape("take_per_row", format!("expected 2-d, got {shape:?}")));
        }
        let (n, m) = (shape[0], shape[1]);
        if indices.len() != n {
            return Err(TensorError::arg(
                "take_per_row",
                format!("need {n} indices, got {}", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(TensorError::arg(
                "take_per_row",
                format!("column {bad} out of range for {m} columns"),
            ));
        }
        let vx = &self.nodes[x.0].value;
        let value: Vec<T> = indices.iter().enumerate().map(|(i, &j)| vx[i * m + j]).collect();
        let out = self.out_of(vec![n, 1], value, &[x.0]);
        self.records.push(Record::TakePerRow { x: x.0, out: out.0, indices: indices.to_vec() });
        Ok(out)
    }

    /// Scales row `i` of `x` by `scale[i]`; `scale` has shape `[n]` or `[n,1]`.
    /// Rows with an exactly-zero scale are written as exact zeros (no `-0.0`),
    /// so masking matches gather-style hard selection bitwise.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let n = shape[0];
        let rest = numel(&shape) / n;
        let ss = &self.nodes[scale.0].shape;
        if numel(ss) != n {
            return Err(TensorError::shape(
                "scale_rows",
                format!("scale {ss:?} does not match {n} rows"),
            ));
        }
        let (vx, vs) = (&self.nodes[x.0].value, &self.nodes[scale.0].value);
        let mut value = Vec::with_capacity(vx.len());
        for i in 0..n {
            let si = vs[i];
            if si == T::zero() {
                value.extend(std::iter::repeat(T::zero()).take(rest));
            } else {
                value.extend(vx[i * rest..(i + 1) * rest].iter().map(|&v| v * si));
            }
        }
        let out = self.out_of(shape, value, &[x.0, scale.0]);
        self.records.push(Record::ScaleRows { x: x.0, scale: scale.0, out: out.0 });
        Ok(out)
    }

    /// Contiguous row range `[start, start+len)` of the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let n = shape[0];
        if len == 0 || start + len > n {
            return Err(TensorError::arg(
                "slice_rows",
                format!("range {start}..{} out of {n} rows", start + len),
            ));
        }
        let rest = numel(&shape) / n;
        let value = self.nodes[x.0].value[start * rest..(start + len) * rest].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = self.out_of(out_shape, value, &[x.0]);
        self.records.push(Record::SliceRows { x: x.0, out: out.0, start });
        Ok(out)
    }

    /// Contiguous column range of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::shape("slice_cols", format!("expected 2-d, got {shape:?}")));
        }
        let (n, m) = (shape[0], shape[1]);
        if len == 0 || start + len > m {
            return Err(TensorError::arg(
                "slice_cols",
                format!("range {start}..{} out of {m} columns", start + len),
            ));
        }
        let vx = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(n * len);
        for i in 0..n {
            value.extend_from_slice(&vx[i * m + start..i * m + start + len]);
        }
        let out = self.out_of(vec![n, len], value, &[x.0]);
        self.records.push(Record::SliceCols { x: x.0, out: out.0, start });
        Ok(out)
    }

    /// Stacks tensors along the first axis; trailing shapes must match.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::arg("concat_rows", "no inputs"));
        }
        let first = self.nodes[xs[0].0].shape.clone();
        let mut rows = 0;
        for v in xs {
            let sv = &self.nodes[v.0].shape;
            if sv[1..] != first[1..] || sv.len() != first.len() {
                return Err(TensorError::shape(
                    "concat_rows",
                    format!("trailing shape mismatch: {first:?} vs {sv:?}"),
                ));
            }
            rows += sv[0];
        }
        let mut value = Vec::with_capacity(rows * numel(&first[1..]));
        for v in xs {
            value.extend_from_slice(&self.nodes[v.0].value);
        }
        let mut out_shape = first;
        out_shape[0] = rows;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let out = self.out_of(out_shape, value, &ids);
        self.records.push(Record::ConcatRows { xs: ids, out: out.0 });
        Ok(out)
    }

    /// Concatenates two 2-d tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::shape(
                "concat_cols",
                format!("expected [n×p],[n×q], got {sa:?}, {sb:?}"),
            ));
        }
        let (n, ma, mb) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            value.extend_from_slice(&va[i * ma..(i + 1) * ma]);
            value.extend_from_slice(&vb[i * mb..(i + 1) * mb]);
        }
        let out = self.out_of(vec![n, ma + mb], value, &[a.0, b.0]);
        self.records.push(Record::ConcatCols { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[x.0].value.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.nodes[x.0].shape),
            ));
        }
        let value = self.nodes[x.0].value.clone();
        let out = self.out_of(shape, value, &[x.0]);
        self.records.push(Record::Reshape { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Identity forward; contributes zero gradient to its input.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let value = self.nodes[x.0].value.clone();
        // The output is a gradient boundary: nothing upstream of it needs grads.
        let out = self.push_node(shape, value, false);
        self.records.push(Record::StopGradient);
        out
    }

    /// Straight-through top-k gate. Forward emits the exact 0/1 indicator of
    /// the k largest scores (ties broken by ascending index); backward passes
    /// the upstream gradient to `scores` unchanged, so every cell keeps a
    /// dense gradient path.
    pub fn st_topk_mask(&mut self, scores: Var, k: usize) -> Result<Var> {
        let shape = self.nodes[scores.0].shape.clone();
        let n = numel(&shape);
        let kept = top_k_indices(&self.nodes[scores.0].value, k)?;
        let mut value = vec![T::zero(); n];
        for &i in &kept {
            value[i] = T::one();
        }
        let out = self.out_of(shape, value, &[scores.0]);
        self.records.push(Record::StMask { scores: scores.0, out: out.0 });
        Ok(out)
    }

    /// Indices of the k largest entries of a node's flattened values.
    pub fn topk(&self, x: Var, k: usize) -> Result<Vec<usize>> {
        top_k_indices(&self.nodes[x.0].value, k)
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Accumulates ∂loss/∂node into every node's grad buffer. Repeated calls
    /// without [`Tape::reset_grads`] accumulate further.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        // This pass's gradients live in a scratch buffer and merge into the
        // persistent per-node grads at the end, so repeated backward calls
        // add exactly one ∂loss/∂node each.
        let mut pass: Vec<Vec<T>> = self
            .nodes
            .iter()
            .map(|n| vec![T::zero(); n.value.len()])
            .collect();
        pass[loss.0][0] = T::one();
        for idx in (0..self.records.len()).rev() {
            self.backward_record(&mut pass, idx);
        }
        for (node, p) in self.nodes.iter_mut().zip(pass) {
            if node.grad.is_empty() {
                node.grad = p;
            } else {
                for (g, v) in node.grad.iter_mut().zip(p) {
                    *g += v;
                }
            }
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            for g in &mut node.grad {
                *g = T::zero();
            }
        }
    }

    fn backward_record(&self, pass: &mut [Vec<T>], idx: usize) {
        // Records run in reverse creation order, so when a record runs, its
        // output gradient in `pass` is final.
        match &self.records[idx] {

            Record::Binary { kind, a, b, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let (a, b, kind) = (*a, *b, *kind);
                if self.nodes[a].requires_grad {
                    let mut ga = std::mem::take(&mut pass[a]);
                    match kind {
                        BinaryKind::Add => accumulate_bcast(&mut ga, &up, |u, _| u, &[]),
                        BinaryKind::Sub => accumulate_bcast(&mut ga, &up, |u, _| u, &[]),
                        BinaryKind::Mul => {
                            let vb = &self.nodes[b].value;
                            mul_backward_into(&mut ga, &up, vb);
                        }
                    }
                    pass[a] = ga;
                }
                if self.nodes[b].requires_grad {
                    let mut gb = std::mem::take(&mut pass[b]);
                    match kind {
                        BinaryKind::Add => accumulate_bcast(&mut gb, &up, |u, _| u, &[]),
                        BinaryKind::Sub => accumulate_bcast(&mut gb, &up, |u, _| u.neg(), &[]),
                        BinaryKind::Mul => {
                            let va = &self.nodes[a].value;
                            mul_backward_into(&mut gb, &up, va);
                        }
                    }
                    pass[b] = gb;
                }
                pass[*out] = up;
            }
            Record::Unary { kind, x, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let (x, kind, out) = (*x, *kind, *out);
                if self.nodes[x].requires_grad {
                    let mut gx = std::mem::take(&mut pass[x]);
                    match kind {
                        UnaryKind::Relu => {
                            let vx = &self.nodes[x].value;
                            for i in 0..gx.len() {
                                if vx[i] > T::zero() {
                                    gx[i] += up[i];
                                }
                            }
                        }
                        UnaryKind::Sigmoid => {
                            let vy = &self.nodes[out].value;
                            for i in 0..gx.len() {
                                gx[i] += up[i] * vy[i] * (T::one() - vy[i]);
                            }
                        }
                        UnaryKind::Tanh => {
                            let vy = &self.nodes[out].value;
                            for i in 0..gx.len() {
                                gx[i] += up[i] * (T::one() - vy[i] * vy[i]);
                            }
                        }
                        UnaryKind::Sqrt => {
                            let vy = &self.nodes[out].value;
                            for i in 0..gx.len() {
                                if vy[i] > T::zero() {
                                    gx[i] += up[i] / (s::<T>(2.0) * vy[i]);
                                }
                            }
                        }
                        UnaryKind::Recip => {
                            let vy = &self.nodes[out].value;
                            for i in 0..gx.len() {
                                gx[i] += up[i].neg() * vy[i] * vy[i];
                            }
                        }
                    }
                    pass[x] = gx;
                }
                pass[out] = up;
            }
            Record::Affine { x, out, mul } => {
                let up = std::mem::take(&mut pass[*out]);
                let (x, m) = (*x, s::<T>(*mul));
                if self.nodes[x].requires_grad {
                    let mut gx = std::mem::take(&mut pass[x]);
                    for i in 0..gx.len() {
                        gx[i] += up[i] * m;
                    }
                    pass[x] = gx;
                }
                pass[*out] = up;
            }
            Record::MatMul { a, b, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    let da = kernels::matmul_nt(&up, &self.nodes[b].value, m, n, k);
                    let mut ga = std::mem::take(&mut pass[a]);
                    for i in 0..ga.len() {
                        ga[i] += da[i];
                    }
                    pass[a] = ga;
                }
                if self.nodes[b].requires_grad {
                    let db = kernels::matmul_tn(&self.nodes[a].value, &up, m, k, n);
                    let mut gb = std::mem::take(&mut pass[b]);
                    for i in 0..gb.len() {
                        gb[i] += db[i];
                    }
                    pass[b] = gb;
                }
                pass[*out] = up;
            }
            Record::Transpose { x, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let x = *x;
                if self.nodes[x].requires_grad {
                    let (m, n) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let upt = transpose_copy(&up, n, m);
                    let mut gx = std::mem::take(&mut pass[x]);
                    for i in 0..gx.len() {
                        gx[i] += upt[i];
                    }
                    pass[x] = gx;
                }
                pass[*out] = up;
            }
            Record::Conv2d { input, kernel, out, geom } => {
                let up = std::mem::take(&mut pass[*out]);
                let (input, kernel) = (*input, *kernel);
                if self.nodes[input].requires_grad {
                    let d_in = kernels::conv2d_backward_input(&up, &self.nodes[kernel].value, geom);
                    let mut gi = std::mem::take(&mut pass[input]);
                    for i in 0..gi.len() {
                        gi[i] += d_in[i];
                    }
                    pass[input] = gi;
                }
                if self.nodes[kernel].requires_grad {
                    let d_k = kernels::conv2d_backward_kernel(&self.nodes[input].value, &up, geom);
                    let mut gk = std::mem::take(&mut pass[kernel]);
                    for i in 0..gk.len() {
                        gk[i] += d_k[i];
                    }
                    pass[kernel] = gk;
                }
                pass[*out] = up;
            }
            Record::Softmax { x, out, axis } => {
                let up = std::mem::take(&mut pass[*out]);
                let (x, out, axis) = (*x, *out, *axis);
                if self.nodes[x].requires_grad {
                    let mut gx = std::mem::take(&mut pass[x]);
                    let shape = self.nodes[x].shape.clone();
                    let vy = &self.nodes[out].value;
                    for_each_line(&shape, axis, |line| {
                        let mut inner = T::zero();
                        for &i in line {
                            inner += up[i] * vy[i];
                        }
                        for &i in line {
                            gx[i] += vy[i] * (up[i] - inner);
                        }
                    });
                    pass[x] = gx;
                }
                pass[out] = up;
            }
            Record::LogSoftmax { x, out, axis } => {
                let up = std::mem::take(&mut pass[*out]);
                let (x, out, axis) = (*x, *out, *axis);
                if self.nodes[x].requires_grad {
                    let mut gx = std::mem::take(&mut pass[x]);
                    let shape = self.nodes[x].shape.clone();
                    let vy = &self.nodes[out].value;
                    for_each_line(&shape, axis, |line| {
                        let mut total = T::zero();
                        for &i in line {
                            total += up[i];
                        }
                        for &i in line {
                            gx[i] += up[i] - vy[i].exp() * total;
                        }
                    });
                    pass[x] = gx;
                }
                pass[out] = up;
            }
            Record::L2NormLast { x, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let (x, out) = (*x, *out);
                if self.nodes[x].requires_grad {
                    let mut gx = std::mem::take(&mut pass[x]);
                    let d = *self.nodes[x].shape.last().unwrap();
                    let vy = &self.nodes[out].value;
                    let vx = &self.nodes[x].value;
                    for (r, &norm) in vy.iter().enumerate() {
                        if norm > T::zero() {
                            for j in 0..d {
                                gx[r * d + j] += up[r] * (vx[r * d + j] / norm);
                            }
                        }
                    }
                    pass[x] = gx;
                }
                pass[out] = up;
            }
            Record::GatherRows { x, out, indices } => {
                let up = std::mem::take(&mut pass[*out]);
                let x = *x;
                if self.nodes[x].requires_grad {
                    let d = *self.nodes[x].shape.last().unwrap();
                    let mut gx = std::mem::take(&mut pass[x]);
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gx[i * d + j] += up[r * d + j];
                        }
                    }
                    pass[x] = gx;
                }
                pass[*out] = up;
            }
            Record::TakePerRow { x, out, indices } => {
                let up = std::mem::take(&mut pass[*out]);
                let x = *x;
                if self.nodes[x].requires_grad {
                    let m = self.nodes[x].shape[1];
                    let mut gx = std::mem::take(&mut pass[x]);
                    for (i, &j) in indices.iter().enumerate() {
                        gx[i * m + j] += up[i];
                    }
                    pass[x] = gx;
                }
                pass[*out] = up;
            }
            Record::ScaleRows { x, scale, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let (x, scale) = (*x, *scale);
                let n = self.nodes[x].shape[0];
                let rest = self.nodes[x].value.len() / n;
                if self.nodes[x].requires_grad {
                    let mut gx = std::mem::take(&mut pass[x]);
                    let vs = &self.nodes[scale].value;
                    for i in 0..n {
                        let si = vs[i];
                        for j in 0..rest {
                            gx[i * rest + j] += up[i * rest + j] * si;
                        }
                    }
                    pass[x] = gx;
                }
                if self.nodes[scale].requires_grad {
                    let mut gs = std::mem::take(&mut pass[scale]);
                    let vx = &self.nodes[x].value;
                    for i in 0..n {
                        gs[i] += kernels::dot(&up[i * rest..(i + 1) * rest], &vx[i * rest..(i + 1) * rest]);
                    }
                    pass[scale] = gs;
                }
                pass[*out] = up;
            }
            Record::SliceRows { x, out, start } => {
                let up = std::mem::take(&mut pass[*out]);
                let x = *x;
                if self.nodes[x].requires_grad {
                    let n = self.nodes[x].shape[0];
                    let rest = self.nodes[x].value.len() / n;
                    let mut gx = std::mem::take(&mut pass[x]);
                    for (i, &u) in up.iter().enumerate() {
                        gx[start * rest + i] += u;
                    }
                    pass[x] = gx;
                }
                pass[*out] = up;
            }
            Record::SliceCols { x, out, start } => {
                let up = std::mem::take(&mut pass[*out]);
                let x = *x;
                if self.nodes[x].requires_grad {
                    let m = self.nodes[x].shape[1];
                    let len = self.nodes[*out].shape[1];
                    let n = self.nodes[x].shape[0];
                    let mut gx = std::mem::take(&mut pass[x]);
                    for i in 0..n {
                        for j in 0..len {
                            gx[i * m + start + j] += up[i * len + j];
                        }
                    }
                    pass[x] = gx;
                }
                pass[*out] = up;
            }
            Record::ConcatRows { xs, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let mut offset = 0;
                for &xi in xs {
                    let len = self.nodes[xi].value.len();
                    if self.nodes[xi].requires_grad {
                        let mut gx = std::mem::take(&mut pass[xi]);
                        for i in 0..len {
                            gx[i] += up[offset + i];
                        }
                        pass[xi] = gx;
                    }
                    offset += len;
                }
                pass[*out] = up;
            }
            Record::ConcatCols { a, b, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let (a, b) = (*a, *b);
                let n = self.nodes[a].shape[0];
                let ma = self.nodes[a].shape[1];
                let mb = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    let mut ga = std::mem::take(&mut pass[a]);
                    for i in 0..n {
                        for j in 0..ma {
                            ga[i * ma + j] += up[i * (ma + mb) + j];
                        }
                    }
                    pass[a] = ga;
                }
                if self.nodes[b].requires_grad {
                    let mut gb = std::mem::take(&mut pass[b]);
                    for i in 0..n {
                        for j in 0..mb {
                            gb[i * mb + j] += up[i * (ma + mb) + ma + j];
                        }
                    }
                    pass[b] = gb;
                }
                pass[*out] = up;
            }
            Record::Reshape { x, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let x = *x;
                if self.nodes[x].requires_grad {
                    let mut gx = std::mem::take(&mut pass[x]);
                    for i in 0..gx.len() {
                        gx[i] += up[i];
                    }
                    pass[x] = gx;
                }
                pass[*out] = up;
            }
            Record::SumAll { x, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let x = *x;
                if self.nodes[x].requires_grad {
                    let u = up[0];
                    let mut gx = std::mem::take(&mut pass[x]);
                    for g in &mut gx {
                        *g += u;
                    }
                    pass[x] = gx;
                }
                pass[*out] = up;
            }
            Record::SumAxis0 { x, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let x = *x;
                if self.nodes[x].requires_grad {
                    let n = self.nodes[x].shape[0];
                    let rest = self.nodes[x].value.len() / n;
                    let mut gx = std::mem::take(&mut pass[x]);
                    for i in 0..n {
                        for j in 0..rest {
                            gx[i * rest + j] += up[j];
                        }
                    }
                    pass[x] = gx;
                }
                pass[*out] = up;
            }
            Record::StopGradient => {}
            Record::StMask { scores, out } => {
                let up = std::mem::take(&mut pass[*out]);
                let scores = *scores;
                if self.nodes[scores].requires_grad {
                    let mut gs = std::mem::take(&mut pass[scores]);
                    for i in 0..gs.len() {
                        gs[i] += up[i];
                    }
                    pass[scores] = gs;
                }
                pass[*out] = up;
            }
        }
    }
}

// ── Value-level helpers ───────────────────────────────────────────────────

/// Indices of the k largest entries, sorted by descending value with ties
/// broken by ascending flat index. Discrete: carries no gradient.
pub fn top_k_indices<T: Scalar>(values: &[T], k: usize) -> Result<Vec<usize>> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(TensorError::arg(
            "top_k_indices",
            format!("k = {k} out of range for {n} entries"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_unstable_by(|&i, &j| {
        values[j]
            .as_f64()
            .total_cmp(&values[i].as_f64())
            .then(i.cmp(&j))
    });
    idx.truncate(k);
    Ok(idx)
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn transpose_copy<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Strips leading extents of size 1.
fn strip_ones(shape: &[usize]) -> &[usize] {
    let mut s = shape;
    while s.len() > 1 && s[0] == 1 {
        s = &s[1..];
    }
    if s == [1] {
        &[]
    } else {
        s
    }
}

/// Broadcast rule: a shape may broadcast along any leading extent of size 1,
/// i.e. after stripping leading 1s, one shape must be a suffix of the other.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (sa, sb) = (strip_ones(a), strip_ones(b));
    let (long, short) = if sa.len() >= sb.len() { (sa, sb) } else { (sb, sa) };
    if !long.ends_with(short) {
        return Err(TensorError::shape(
            "broadcast",
            format!("{a:?} and {b:?} differ beyond leading size-1 extents"),
        ));
    }
    if numel(a) >= numel(b) {
        Ok(a.to_vec())
    } else {
        Ok(b.to_vec())
    }
}

fn map2_bcast<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Send + Sync) -> Vec<T> {
    if a.len() == b.len() {
        kernels::map2(a, b, f)
    } else if a.len() > b.len() {
        let nb = b.len();
        let mut out = Vec::with_capacity(a.len());
        for chunk in a.chunks_exact(nb) {
            out.extend(chunk.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)));
        }
        out
    } else {
        let na = a.len();
        let mut out = Vec::with_capacity(b.len());
        for chunk in b.chunks_exact(na) {
            out.extend(a.iter().zip(chunk.iter()).map(|(&x, &y)| f(x, y)));
        }
        out
    }
}

/// Adds `f(upstream, ())` into `grad`, reducing over broadcast repeats when
/// the gradient buffer is smaller than the upstream buffer.
fn accumulate_bcast<T: Scalar>(grad: &mut [T], up: &[T], f: impl Fn(T, ()) -> T, _unused: &[T]) {
    if grad.len() == up.len() {
        for (g, &u) in grad.iter_mut().zip(up.iter()) {
            *g += f(u, ());
        }
    } else {
        let n = grad.len();
        for chunk in up.chunks_exact(n) {
            for (g, &u) in grad.iter_mut().zip(chunk.iter()) {
                *g += f(u, ());
            }
        }
    }
}

/// Gradient of `a·b` into `grad(a)` where `other = value(b)`, handling the
/// three broadcast layouts.
fn mul_backward_into<T: Scalar>(grad: &mut [T], up: &[T], other: &[T]) {
    if grad.len() == up.len() && other.len() == up.len() {
        for i in 0..grad.len() {
            grad[i] += up[i] * other[i];
        }
    } else if grad.len() == up.len() {
        // other is the broadcast (smaller) side
        let n = other.len();
        for (block, chunk) in grad.chunks_exact_mut(n).zip(up.chunks_exact(n)) {
            for j in 0..n {
                block[j] += chunk[j] * other[j];
            }
        }
    } else {
        // grad is the broadcast side: reduce over repeats
        let n = grad.len();
        for (chunk, ochunk) in up.chunks_exact(n).zip(other.chunks_exact(n)) {
            for j in 0..n {
                grad[j] += chunk[j] * ochunk[j];
            }
        }
    }
}

/// Softmax / log-softmax along an axis with max subtraction.
fn softmax_values<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for_each_line(shape, axis, |line| {
        let mut max = x[line[0]];
        for &i in line {
            if x[i] > max {
                max = x[i];
            }
        }
        let mut sum = T::zero();
        for &i in line {
            sum += (x[i] - max).exp();
        }
        if log {
            let log_sum = sum.ln();
            for &i in line {
                out[i] = x[i] - max - log_sum;
            }
        } else {
            for &i in line {
                out[i] = (x[i] - max).exp() / sum;
            }
        }
    });
    out
}

/// Invokes `f` with the flat indices of every 1-d line along `axis`.
fn for_each_line(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let m = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut line = vec![0usize; m];
    for o in 0..outer {
        for i in 0..inner {
            for (a, slot) in line.iter_mut().enumerate() {
                *slot = (o * m + a) * inner + i;
            }
            f(&line);
        }
    }
}

fn conv_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if k > input {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("kernel extent {k} exceeds input extent {input}"),
                ));
            }
            Ok(((input - k) / stride + 1, 0))
        }
    }
}
