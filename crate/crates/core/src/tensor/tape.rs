use rand::Rng;

use super::kernels::{self, ConvGeom, Layout};
use super::Tensor;
use crate::error::TensorError;

/// Floor applied to row norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Dropout(Var, Vec<f64>),
    MatMul(Var, Var),
    AddBias(Var, Var),
    ChannelScale { x: Var, s: Var, shared: bool },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Transpose(Var),
    Diag(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    CosineRows { a: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep is a valid topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Interprets a rank-2 or rank-3 tensor as `(batch, channels, len)`.
fn as_bcl(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [c, l] => Some((1, c, l)),
        [b, c, l] => Some((b, c, l)),
        _ => None,
    }
}

fn bcl_shape(rank: usize, b: usize, c: usize, l: usize) -> Vec<usize> {
    if rank == 2 {
        vec![c, l]
    } else {
        vec![b, c, l]
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass. Populated for every leaf with
    /// `requires_grad` that the loss depends on; interior gradients are
    /// released during the sweep.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clears gradients so that [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v + k, Op::AddScalar(x))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        if t.shape() != c.shape() {
            return Err(mismatch("mul_const", t, c));
        }
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, c.data().to_vec()), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// `max(x, min)` elementwise; returns the number of clamped entries.
    /// Clamped entries pass no gradient.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> (Var, usize) {
        let clamped = self.nodes[x.0]
            .value
            .data()
            .iter()
            .filter(|&&v| v < min)
            .count();
        (self.unary(x, |v| v.max(min), Op::ClampMin(x, min)), clamped)
    }

    /// Inverted dropout. Identity (the same handle) unless `train` is set
    /// and `p > 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::Dropout(x, mask), rg)
    }

    /// `[R×K] · [K×C]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (&[r, k], &[k2, c]) = (ta.shape(), tb.shape()) else {
            return Err(mismatch("matmul", ta, tb));
        };
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; r * c];
        kernels::gemm(
            r,
            k,
            c,
            ta.data(),
            Layout::Normal,
            tb.data(),
            Layout::Normal,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::MatMul(a, b), rg))
    }

    /// Adds `bias[C]` to every row of `x[.., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let c = *tx.shape().last().unwrap();
        if tb.numel() != c || tb.rank() != 1 {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Scales every channel of `x[B,C,L]` (or `[C,L]`) by `s`, which is
    /// either per sample `[B,C]` or shared across the batch `[C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        let Some((b, c, l)) = as_bcl(tx) else {
            return Err(invalid("channel_scale", tx, "expected rank 2 or 3"));
        };
        let shared = match *ts.shape() {
            [n] if n == c => true,
            [bb, cc] if bb == b && cc == c => false,
            _ => return Err(mismatch("channel_scale", tx, ts)),
        };
        let mut data = tx.data().to_vec();
        for (row_idx, row) in data.chunks_mut(l).enumerate() {
            let k = if shared {
                ts.data()[row_idx % c]
            } else {
                ts.data()[row_idx]
            };
            row.iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ChannelScale { x, s, shared }, rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = &self.nodes[inputs[0].0].value;
        if axis >= first.rank() {
            return Err(invalid("concat", first, format!("axis {axis} out of range")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in inputs {
            let t = &self.nodes[v.0].value;
            let compatible = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", first, t));
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        if axis >= t.rank() {
            return Err(invalid("reduce", t, format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &t.data()[(o * n + a) * inner..][..inner];
                let dst = &mut data[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(x, axis, false)
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(x, axis, true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        let &[r, c] = t.shape() else {
            return Err(invalid("transpose", t, "expected rank 2"));
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), rg))
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        let n = match *t.shape() {
            [r, c] if r == c => r,
            _ => return Err(invalid("diag", t, "expected a square matrix")),
        };
        let data = (0..n).map(|i| t.data()[i * n + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Diag(x), rg))
    }

    /// Divides each row by `max(‖row‖, 1e-12)`.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        let &[_, c] = t.shape() else {
            return Err(invalid("normalize_rows", t, "expected rank 2"));
        };
        let norms: Vec<f64> = t
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut data = t.data().to_vec();
        for (row, &n) in data.chunks_mut(c).zip(&norms) {
            let d = n.max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= d);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// Row-wise cosine similarity of two `[N×D]` matrices, giving `[N]`.
    /// Norms are floored at 1e-12, so an all-zero row yields 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() || ta.rank() != 2 {
            return Err(mismatch("cosine_rows", ta, tb));
        }
        let c = ta.shape()[1];
        let data = ta
            .data()
            .chunks(c)
            .zip(tb.data().chunks(c))
            .map(|(x, y)| cosine(x, y))
            .collect();
        let value = Tensor::from_parts(vec![ta.shape()[0]], data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::CosineRows { a, b }, rg))
    }

    /// 1-D cross-correlation. `x` is `[C_in, L]` or `[B, C_in, L]`, `w` is
    /// `[C_out, C_in, k]`, `bias` is `[C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[bias.0].value,
        );
        let Some((batch, ci, len)) = as_bcl(tx) else {
            return Err(invalid("conv1d", tx, "expected [C, L] or [B, C, L]"));
        };
        let &[co, wci, k] = tw.shape() else {
            return Err(invalid("conv1d", tw, "weights must be [C_out, C_in, k]"));
        };
        if wci != ci {
            return Err(mismatch("conv1d", tx, tw));
        }
        if tb.shape() != [co] {
            return Err(mismatch("conv1d", tw, tb));
        }
        if stride == 0 {
            return Err(invalid("conv1d", tx, "stride must be at least 1"));
        }
        if len + 2 * padding < k {
            return Err(invalid(
                "conv1d",
                tx,
                format!("kernel {k} exceeds padded length {}", len + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            batch,
            in_channels: ci,
            out_channels: co,
            len,
            kernel: k,
            stride,
            padding,
        };
        let out = kernels::conv1d_forward(tx.data(), tw.data(), tb.data(), &geom);
        let shape = bcl_shape(tx.rank(), batch, co, geom.out_len());
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv1d {
                x,
                w,
                b: bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed 1-D convolution without padding. `w` is `[C_in, C_out, k]`;
    /// output length is `(L-1)·stride + k`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[bias.0].value,
        );
        let Some((batch, ci, len)) = as_bcl(tx) else {
            return Err(invalid("conv_transpose1d", tx, "expected [C, L] or [B, C, L]"));
        };
        let &[wci, co, k] = tw.shape() else {
            return Err(invalid(
                "conv_transpose1d",
                tw,
                "weights must be [C_in, C_out, k]",
            ));
        };
        if wci != ci {
            return Err(mismatch("conv_transpose1d", tx, tw));
        }
        if tb.shape() != [co] {
            return Err(mismatch("conv_transpose1d", tw, tb));
        }
        if stride == 0 {
            return Err(invalid("conv_transpose1d", tx, "stride must be at least 1"));
        }
        let geom = ConvGeom {
            batch,
            in_channels: ci,
            out_channels: co,
            len,
            kernel: k,
            stride,
            padding: 0,
        };
        let out = kernels::conv_transpose1d_forward(tx.data(), tw.data(), tb.data(), &geom);
        let shape = bcl_shape(tx.rank(), batch, co, geom.transposed_out_len());
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ConvTranspose1d {
                x,
                w,
                b: bias,
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling over the last axis. Ties go to the lowest
    /// index.
    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        let Some((b, c, len)) = as_bcl(t) else {
            return Err(invalid("maxpool1d", t, "expected [C, L] or [B, C, L]"));
        };
        if window == 0 || len % window != 0 {
            return Err(TensorError::PoolLength { len, window });
        }
        let out_len = len / window;
        let mut data = Vec::with_capacity(t.numel() / window);
        let mut argmax = Vec::with_capacity(t.numel() / window);
        for (w_idx, win) in t.data().chunks(window).enumerate() {
            let mut best = 0;
            for (i, &v) in win.iter().enumerate().skip(1) {
                if v > win[best] {
                    best = i;
                }
            }
            data.push(win[best]);
            argmax.push(w_idx * window + best);
        }
        let shape = bcl_shape(t.rank(), b, c, out_len);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MaxPool { x, argmax }, rg))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (v, contrib) in self.local_grads(i, &g) {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut self.grads[v.0], contrib);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let mut out = Vec::new();
                if rg(*a) {
                    out.push((*a, g.iter().zip(tb).map(|(g, y)| g * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().zip(ta).map(|(g, x)| g * x).collect()));
                }
                out
            }
            Op::Scale(x, k) => vec![(*x, g.iter().map(|v| v * k).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::MulConst(x, c) => vec![(*x, g.iter().zip(c).map(|(g, c)| g * c).collect())],
            Op::Relu(x) => {
                let tx = val(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(tx)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                vec![(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }
            Op::Exp(x) => {
                let y = node.value.data();
                vec![(*x, g.iter().zip(y).map(|(g, y)| g * y).collect())]
            }
            Op::Log(x) => {
                let tx = val(*x).data();
                vec![(*x, g.iter().zip(tx).map(|(g, v)| g / v).collect())]
            }
            Op::ClampMin(x, min) => {
                let tx = val(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(tx)
                        .map(|(g, v)| if v < min { 0.0 } else { *g })
                        .collect(),
                )]
            }
            Op::Dropout(x, mask) => vec![(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = Vec::new();
                if rg(*a) {
                    let mut da = vec![0.0; r * k];
                    kernels::gemm(
                        r,
                        c,
                        k,
                        g,
                        Layout::Normal,
                        tb.data(),
                        Layout::Transposed,
                        &mut da,
                        false,
                    );
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * c];
                    kernels::gemm(
                        k,
                        r,
                        c,
                        ta.data(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        &mut db,
                        false,
                    );
                    out.push((*b, db));
                }
                out
            }
            Op::AddBias(x, b) => {
                let c = val(*b).numel();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::ChannelScale { x, s, shared } => {
                let (tx, ts) = (val(*x), val(*s));
                let l = *tx.shape().last().unwrap();
                let c = if *shared {
                    ts.numel()
                } else {
                    ts.shape()[1]
                };
                let mut dx = vec![0.0; tx.numel()];
                let mut ds = vec![0.0; ts.numel()];
                for (row_idx, (grow, xrow)) in g.chunks(l).zip(tx.data().chunks(l)).enumerate() {
                    let si = if *shared { row_idx % c } else { row_idx };
                    let k = ts.data()[si];
                    let drow = &mut dx[row_idx * l..][..l];
                    drow.iter_mut().zip(grow).for_each(|(d, g)| *d = g * k);
                    ds[si] += grow.iter().zip(xrow).map(|(g, x)| g * x).sum::<f64>();
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut grads: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (v, gbuf) in inputs.iter().zip(grads.iter_mut()) {
                        let chunk = val(*v).shape()[*axis] * inner;
                        gbuf.extend_from_slice(&g[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                inputs.iter().copied().zip(grads).collect()
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let tx = val(*x);
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let k = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let src = &g[o * inner..][..inner];
                    for a in 0..n {
                        let dst = &mut dx[(o * n + a) * inner..][..inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * k);
                    }
                }
                vec![(*x, dx)]
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Diag(x) => {
                let n = val(*x).shape()[0];
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    dx[i * n + i] = g[i];
                }
                vec![(*x, dx)]
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let (gr, yr) = (&g[r * c..][..c], &y[r * c..][..c]);
                    let dr = &mut dx[r * c..][..c];
                    if n > NORM_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..c {
                            dr[j] = gr[j] / NORM_EPS;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::CosineRows { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.shape()[1];
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for (r, &gr) in g.iter().enumerate() {
                    let (x, y) = (&ta.data()[r * c..][..c], &tb.data()[r * c..][..c]);
                    let (dxr, dyr) = (&mut da[r * c..][..c], &mut db[r * c..][..c]);
                    cosine_grad(x, y, gr, dxr, dyr);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Conv1d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv1d_backward(val(*x).data(), val(*w).data(), g, geom);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::ConvTranspose1d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv_transpose1d_backward(val(*x).data(), val(*w).data(), g, geom);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(*x).numel()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    dx[idx] += gv;
                }
                vec![(*x, dx)]
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
        None => *slot = Some(contrib),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Guarded cosine similarity of two vectors.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    dot / (norm(x).max(NORM_EPS) * norm(y).max(NORM_EPS))
}

fn cosine_grad(x: &[f64], y: &[f64], g: f64, dx: &mut [f64], dy: &mut [f64]) {
    let (nx, ny) = (norm(x), norm(y));
    let (dnx, dny) = (nx.max(NORM_EPS), ny.max(NORM_EPS));
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let cos = dot / (dnx * dny);
    for j in 0..x.len() {
        let mut gx = y[j] / (dnx * dny);
        if nx > NORM_EPS {
            gx -= cos * x[j] / (nx * nx);
        }
        let mut gy = x[j] / (dnx * dny);
        if ny > NORM_EPS {
            gy -= cos * y[j] / (ny * ny);
        }
        dx[j] = g * gx;
        dy[j] = g * gy;
    }
}
