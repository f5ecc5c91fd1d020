//! Dense f64 tensors and the forward implementations of the primitive ops.
//!
//! Tensors are immutable values: every op allocates a fresh output buffer and
//! returns a new handle. Any op that would produce a NaN or Inf fails with
//! [`Error::NonFinite`] instead of letting the value propagate. When a
//! gradient recording span is active (see [`crate::tape`]) each op appends one
//! entry to the tape; otherwise ops leave no trace.
//!
//! Supported primitives: matmul (plain, batched, and transposed-right
//! variants), add with trailing-shape broadcast, elementwise mul, scalar
//! scale, ReLU, GeLU (tanh form), softmax, layer-norm, cross-entropy, and
//! mean reductions. `reshape` and `slice_rows` are data plumbing for batching;
//! they do not participate in differentiation.

use std::cell::Cell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::meter::Buffer;
use crate::tape::{self, BackOp, Saved};

pub(crate) const LN_EPS: f64 = 1e-5;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type TensorId = u64;

pub(crate) struct TensorInner {
    pub(crate) id: TensorId,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Buffer>,
    pub(crate) requires_grad: bool,
    /// (tape epoch, node index) of the op that produced this tensor, if it
    /// was produced under a recording span that is still current.
    pub(crate) node: Cell<Option<(u64, usize)>>,
}

/// Handle to an immutable f64 tensor. Cloning is cheap (reference count).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_buffer(shape: Vec<usize>, buf: Buffer, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Rc::new(buf),
                requires_grad,
                node: Cell::new(None),
            }),
        }
    }

    /// Build a tensor from row-major data. Fails if the element count does
    /// not match the shape or any value is non-finite.
    pub fn new(vals: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if vals.len() != numel_of(shape) {
            return Err(Error::Dimension {
                op: "new",
                msg: format!("{} values for shape {:?}", vals.len(), shape),
            });
        }
        check_finite("new", &vals)?;
        Ok(Tensor::from_buffer(
            shape.to_vec(),
            Buffer::from_vec(vals),
            false,
        ))
    }

    /// A leaf parameter: like [`Tensor::new`] but marked to receive gradients.
    pub fn param(vals: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::new(vals, shape)?.with_requires_grad())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_buffer(shape.to_vec(), Buffer::zeros(numel_of(shape)), false)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(vec![v], &[])
    }

    /// Mark this tensor as a gradient leaf for subsequent recorded ops.
    pub fn with_requires_grad(self) -> Tensor {
        if self.inner.requires_grad {
            return self;
        }
        Tensor {
            inner: Rc::new(TensorInner {
                id: self.inner.id,
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                requires_grad: true,
                node: Cell::new(self.inner.node.get()),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> &[f64] {
        self.inner.data.as_slice()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Extract the single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Dimension {
                op: "item",
                msg: format!("shape {:?} is not scalar", self.shape()),
            });
        }
        Ok(self.data()[0])
    }

    pub(crate) fn from_op(shape: Vec<usize>, vals: Vec<f64>) -> Tensor {
        Tensor::from_buffer(shape, Buffer::from_vec(vals), false)
    }

    // ── shape plumbing (not differentiated) ─────────────────────────────

    /// Reinterpret the same storage under a new shape. Shares the buffer, so
    /// no bytes are allocated. This is leaf plumbing for shaping input
    /// batches; reshaping a tensor that participates in gradient recording
    /// would silently detach it, so that case is rejected.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(), shape),
            });
        }
        if self.requires_grad() || (tape::is_recording() && tape::has_current_node(self)) {
            return Err(Error::state(
                "reshape is not differentiable; it cannot be applied to a tensor in the gradient graph",
            ));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: Rc::clone(&self.inner.data),
                requires_grad: false,
                node: Cell::new(None),
            }),
        })
    }

    /// Copy rows `start..end` along the first axis into a fresh leaf tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(Error::Dimension {
                op: "slice_rows",
                msg: "scalar has no rows".into(),
            });
        }
        let rows = self.shape()[0];
        if start > end || end > rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                msg: format!("rows {start}..{end} out of 0..{rows}"),
            });
        }
        let stride: usize = self.shape()[1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[0] = end - start;
        let vals = self.data()[start * stride..end * stride].to_vec();
        Ok(Tensor::from_op(shape, vals))
    }

    // ── primitive ops ───────────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        matmul_impl(self, rhs, false)
    }

    /// Matmul with the right operand transposed on its last two axes.
    pub fn matmul_tb(&self, rhs: &Tensor) -> Result<Tensor> {
        matmul_impl(self, rhs, true)
    }

    /// Elementwise sum. The right operand may have a shape equal to a
    /// trailing suffix of the left shape, in which case it broadcasts over
    /// the leading axes.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let ls = self.shape();
        let rs = rhs.shape();
        if rs.len() > ls.len() || &ls[ls.len() - rs.len()..] != rs {
            return Err(Error::Dimension {
                op: "add",
                msg: format!("{ls:?} + {rs:?}"),
            });
        }
        let rn = rhs.numel().max(1);
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0; a.len()];
        for (i, o) in out.iter_mut().enumerate() {
            *o = a[i] + b[i % rn];
        }
        check_finite("add", &out)?;
        let t = Tensor::from_op(ls.to_vec(), out);
        tape::record(&[self, rhs], &t, || BackOp::Add {
            lhs_len: self.numel(),
            rhs_len: rhs.numel(),
        });
        Ok(t)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dimension {
                op: "mul",
                msg: format!("{:?} * {:?}", self.shape(), rhs.shape()),
            });
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        check_finite("mul", &out)?;
        let t = Tensor::from_op(self.shape().to_vec(), out);
        tape::record(&[self, rhs], &t, || BackOp::Mul {
            a: Saved::of(self),
            b: Saved::of(rhs),
        });
        Ok(t)
    }

    /// Multiply every element by a finite constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        check_finite("scale", &out)?;
        let t = Tensor::from_op(self.shape().to_vec(), out);
        tape::record(&[self], &t, || BackOp::Scale { c });
        Ok(t)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_op(self.shape().to_vec(), out);
        tape::record(&[self], &t, || BackOp::Relu {
            input: Saved::of(self),
        });
        Ok(t)
    }

    /// GeLU in the tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|&v| gelu_val(v)).collect();
        check_finite("gelu", &out)?;
        let t = Tensor::from_op(self.shape().to_vec(), out);
        tape::record(&[self], &t, || BackOp::Gelu {
            input: Saved::of(self),
        });
        Ok(t)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(Error::Dimension {
                op: "softmax",
                msg: "scalar input".into(),
            });
        }
        let width = *self.shape().last().unwrap();
        if width == 0 {
            return Err(Error::Dimension {
                op: "softmax",
                msg: "zero-width last axis".into(),
            });
        }
        let mut out = vec![0.0; self.numel()];
        for (row_in, row_out) in self.data().chunks(width).zip(out.chunks_mut(width)) {
            softmax_row(row_in, row_out);
        }
        check_finite("softmax", &out)?;
        let t = Tensor::from_op(self.shape().to_vec(), out);
        tape::record(&[self], &t, || BackOp::Softmax {
            output: Saved::of(&t),
        });
        Ok(t)
    }

    /// Normalize each slice of the last axis to zero mean and unit variance
    /// (no learned affine).
    pub fn layer_norm(&self) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(Error::Dimension {
                op: "layer_norm",
                msg: "scalar input".into(),
            });
        }
        let width = *self.shape().last().unwrap();
        if width == 0 {
            return Err(Error::Dimension {
                op: "layer_norm",
                msg: "zero-width last axis".into(),
            });
        }
        let rows = self.numel() / width;
        let mut out = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.data()[r * width..(r + 1) * width];
            let mean = x.iter().sum::<f64>() / width as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
        }
        check_finite("layer_norm", &out)?;
        let t = Tensor::from_op(self.shape().to_vec(), out);
        tape::record(&[self], &t, || BackOp::LayerNorm {
            output: Saved::of(&t),
            inv_std: Saved::from_vec(inv_std, vec![rows]),
            width,
        });
        Ok(t)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::Dimension {
                op: "mean_all",
                msg: "empty tensor".into(),
            });
        }
        let n = self.numel() as f64;
        let m = self.data().iter().sum::<f64>() / n;
        check_finite("mean_all", &[m])?;
        let t = Tensor::from_op(vec![], vec![m]);
        tape::record(&[self], &t, || BackOp::MeanAll {
            in_len: self.numel(),
        });
        Ok(t)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::Dimension {
                op: "mean_axis",
                msg: format!("axis {axis} for shape {:?}", self.shape()),
            });
        }
        let len = self.shape()[axis];
        if len == 0 {
            return Err(Error::Dimension {
                op: "mean_axis",
                msg: "zero-length axis".into(),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += x[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        for v in &mut out {
            *v *= scale;
        }
        check_finite("mean_axis", &out)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::from_op(shape, out);
        tape::record(&[self], &t, || BackOp::MeanAxis {
            in_shape: self.shape().to_vec(),
            axis,
        });
        Ok(t)
    }

    /// Row index of the maximum in each row of a 2-D tensor; ties go to the
    /// lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.ndim() != 2 {
            return Err(Error::Dimension {
                op: "argmax_rows",
                msg: format!("need 2-D, got {:?}", self.shape()),
            });
        }
        let width = self.shape()[1];
        Ok(self
            .data()
            .chunks(width)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

fn gelu_val(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Average cross-entropy between row logits and integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(Error::Dimension {
            op: "cross_entropy",
            msg: format!("logits must be 2-D, got {:?}", logits.shape()),
        });
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if n == 0 || c == 0 {
        return Err(Error::Dimension {
            op: "cross_entropy",
            msg: "empty logits".into(),
        });
    }
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "cross_entropy",
            msg: format!("{} labels for {} rows", labels.len(), n),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::data(format!("label {bad} out of range for {c} classes")));
    }
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for (i, row) in logits.data().chunks(c).enumerate() {
        let p = &mut probs[i * c..(i + 1) * c];
        softmax_row(row, p);
        loss -= p[labels[i]].max(f64::MIN_POSITIVE).ln();
    }
    loss /= n as f64;
    check_finite("cross_entropy", &[loss])?;
    let t = Tensor::from_op(vec![], vec![loss]);
    tape::record(&[logits], &t, || BackOp::CrossEntropy {
        probs: Saved::from_vec(probs, vec![n, c]),
        labels: Rc::from(labels.to_vec().into_boxed_slice()),
    });
    Ok(t)
}

// ── matmul ──────────────────────────────────────────────────────────────

/// `out[m x p] += A[m x n] * B[n x p]`, with optional stored transposes.
/// When `ta` the A data is laid out n x m; when `tb` the B data is p x n.
pub(crate) fn matmul_kernel(
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    m: usize,
    n: usize,
    p: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        for k in 0..n {
            let aik = if ta { a[k * m + i] } else { a[i * n + k] };
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[i * p..(i + 1) * p];
            if tb {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o += aik * b[j * n + k];
                }
            } else {
                let brow = &b[k * p..(k + 1) * p];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }
}

fn matmul_impl(a: &Tensor, b: &Tensor, tb: bool) -> Result<Tensor> {
    let op: &'static str = if tb { "matmul_tb" } else { "matmul" };
    let (ashape, bshape) = (a.shape(), b.shape());
    let dim_err = |msg: String| Error::Dimension { op, msg };
    if ashape.len() < 2 || bshape.len() < 2 || ashape.len() > 3 || bshape.len() > 3 {
        return Err(dim_err(format!("{ashape:?} x {bshape:?}")));
    }
    if bshape.len() == 3 && ashape.len() == 2 {
        return Err(dim_err(format!(
            "batched right operand with 2-D left: {ashape:?} x {bshape:?}"
        )));
    }
    let batch = if ashape.len() == 3 { ashape[0] } else { 1 };
    let (m, n) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
    // Logical B is n x p regardless of storage transpose.
    let (bn, p) = if tb {
        (bshape[bshape.len() - 1], bshape[bshape.len() - 2])
    } else {
        (bshape[bshape.len() - 2], bshape[bshape.len() - 1])
    };
    if bn != n {
        return Err(dim_err(format!("inner dims {n} vs {bn} ({ashape:?} x {bshape:?})")));
    }
    if bshape.len() == 3 && bshape[0] != batch {
        return Err(dim_err(format!("batch dims {batch} vs {}", bshape[0])));
    }
    let b_batched = bshape.len() == 3;
    let mut out = vec![0.0; batch * m * p];
    for s in 0..batch {
        let a_s = &a.data()[s * m * n..(s + 1) * m * n];
        let b_s = if b_batched {
            &b.data()[s * n * p..(s + 1) * n * p]
        } else {
            b.data()
        };
        matmul_kernel(a_s, false, b_s, tb, m, n, p, &mut out[s * m * p..(s + 1) * m * p]);
    }
    check_finite(op, &out)?;
    let out_shape = if ashape.len() == 3 {
        vec![batch, m, p]
    } else {
        vec![m, p]
    };
    let t = Tensor::from_op(out_shape, out);
    tape::record(&[a, b], &t, || BackOp::Matmul {
        a: Saved::of(a),
        b: Saved::of(b),
        transpose_b: tb,
    });
    Ok(t)
}
