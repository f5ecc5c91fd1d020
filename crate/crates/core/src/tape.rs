//! Reverse-mode differentiation over a thread-local op tape.
//!
//! Recording is opt-in: outside a [`with_grad`] span ops compute values only
//! and the tape stays empty, which is what makes forward-only code paths
//! provably gradient-free (see the tape counters in [`crate::meter`]). Inside
//! a span, each op appends one node holding the operand buffers its derivative
//! needs. [`backward`] replays the nodes once in reverse record order,
//! accumulates adjoints, and consumes the tape, releasing every retained
//! buffer.
//!
//! A span owns its tape: nesting [`with_grad`] extends the same tape, and
//! [`with_grad_disabled`] suppresses recording (and forbids `backward`) for
//! its extent regardless of enclosing spans. All state is per-thread; a
//! training or selection run is single-threaded by construction.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::meter::{self, Buffer};
use crate::tensor::{gelu_grad, matmul_kernel, Tensor, TensorId};

thread_local! {
    static TAPE: RefCell<TapeState> = RefCell::new(TapeState::default());
}

#[derive(Default)]
struct TapeState {
    grad_depth: u32,
    disable_depth: u32,
    /// Bumped whenever the tape is cleared so stale tensor->node links from
    /// earlier spans are ignored.
    epoch: u64,
    nodes: Vec<Node>,
    leaves: HashMap<TensorId, usize>,
}

/// Operand buffer retained by the tape for the backward pass. Retention is
/// tracked by the allocation meter's tape counters.
pub(crate) struct Saved {
    data: Rc<Buffer>,
    shape: Vec<usize>,
    bytes: u64,
}

impl Saved {
    pub fn of(t: &Tensor) -> Saved {
        let bytes = t.inner.data.byte_len();
        meter::tape_retain(bytes);
        Saved {
            data: Rc::clone(&t.inner.data),
            shape: t.inner.shape.clone(),
            bytes,
        }
    }

    pub fn from_vec(vals: Vec<f64>, shape: Vec<usize>) -> Saved {
        let buf = Buffer::from_vec(vals);
        let bytes = buf.byte_len();
        meter::tape_retain(bytes);
        Saved {
            data: Rc::new(buf),
            shape,
            bytes,
        }
    }

    fn vals(&self) -> &[f64] {
        self.data.as_slice()
    }
}

impl Drop for Saved {
    fn drop(&mut self) {
        meter::tape_release(self.bytes);
    }
}

pub(crate) enum BackOp {
    Leaf {
        id: TensorId,
        shape: Vec<usize>,
    },
    Matmul {
        a: Saved,
        b: Saved,
        transpose_b: bool,
    },
    Add {
        lhs_len: usize,
        rhs_len: usize,
    },
    Mul {
        a: Saved,
        b: Saved,
    },
    Scale {
        c: f64,
    },
    Relu {
        input: Saved,
    },
    Gelu {
        input: Saved,
    },
    Softmax {
        output: Saved,
    },
    LayerNorm {
        output: Saved,
        inv_std: Saved,
        width: usize,
    },
    CrossEntropy {
        probs: Saved,
        labels: Rc<[usize]>,
    },
    MeanAll {
        in_len: usize,
    },
    MeanAxis {
        in_shape: Vec<usize>,
        axis: usize,
    },
}

struct Node {
    op: BackOp,
    /// Tape indices of differentiable operands, in the op's operand order.
    /// `None` marks a constant operand that receives no adjoint.
    inputs: Vec<Option<usize>>,
}

/// True when ops called right now would be recorded.
pub fn is_recording() -> bool {
    TAPE.with(|t| {
        let st = t.borrow();
        st.grad_depth > 0 && st.disable_depth == 0
    })
}

/// True if `t` was produced by an op on the live tape.
pub(crate) fn has_current_node(t: &Tensor) -> bool {
    match t.inner.node.get() {
        Some((epoch, _)) => TAPE.with(|s| s.borrow().epoch == epoch),
        None => false,
    }
}

/// Number of op nodes (excluding leaves) currently on the tape.
pub fn op_count() -> usize {
    TAPE.with(|t| {
        t.borrow()
            .nodes
            .iter()
            .filter(|n| !matches!(n.op, BackOp::Leaf { .. }))
            .count()
    })
}

/// Run `f` with gradient recording enabled. The tape lives exactly as long
/// as the outermost span; leaving it discards any unconsumed nodes.
pub fn with_grad<R>(f: impl FnOnce() -> R) -> R {
    struct SpanGuard;
    impl Drop for SpanGuard {
        fn drop(&mut self) {
            TAPE.with(|t| {
                let mut st = t.borrow_mut();
                st.grad_depth -= 1;
                if st.grad_depth == 0 {
                    st.nodes.clear();
                    st.leaves.clear();
                    st.epoch += 1;
                }
            });
        }
    }
    TAPE.with(|t| t.borrow_mut().grad_depth += 1);
    let _guard = SpanGuard;
    f()
}

/// Run `f` with recording suppressed, even inside an enclosing [`with_grad`].
pub fn with_grad_disabled<R>(f: impl FnOnce() -> R) -> R {
    struct DisableGuard;
    impl Drop for DisableGuard {
        fn drop(&mut self) {
            TAPE.with(|t| t.borrow_mut().disable_depth -= 1);
        }
    }
    TAPE.with(|t| t.borrow_mut().disable_depth += 1);
    let _guard = DisableGuard;
    f()
}

fn resolve_input(st: &mut TapeState, t: &Tensor) -> Option<usize> {
    if let Some((epoch, idx)) = t.inner.node.get() {
        if epoch == st.epoch {
            return Some(idx);
        }
    }
    if !t.inner.requires_grad {
        return None;
    }
    if let Some(&idx) = st.leaves.get(&t.inner.id) {
        t.inner.node.set(Some((st.epoch, idx)));
        return Some(idx);
    }
    let idx = st.nodes.len();
    st.nodes.push(Node {
        op: BackOp::Leaf {
            id: t.inner.id,
            shape: t.inner.shape.clone(),
        },
        inputs: vec![],
    });
    st.leaves.insert(t.inner.id, idx);
    t.inner.node.set(Some((st.epoch, idx)));
    Some(idx)
}

/// Called by every op after computing its output. Appends a node when
/// recording is active and at least one operand is differentiable.
pub(crate) fn record(inputs: &[&Tensor], out: &Tensor, make: impl FnOnce() -> BackOp) {
    TAPE.with(|t| {
        let mut st = t.borrow_mut();
        if st.grad_depth == 0 || st.disable_depth > 0 {
            return;
        }
        let resolved: Vec<Option<usize>> = inputs.iter().map(|x| resolve_input(&mut st, x)).collect();
        if resolved.iter().all(Option::is_none) {
            return;
        }
        let idx = st.nodes.len();
        st.nodes.push(Node {
            op: make(),
            inputs: resolved,
        });
        out.inner.node.set(Some((st.epoch, idx)));
    });
}

/// Gradients of one scalar loss with respect to the leaf tensors that fed it.
#[derive(Debug)]
pub struct Gradients {
    map: HashMap<TensorId, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.inner.id)
    }

    /// Gradient of `t`, or zeros if `t` did not influence the loss.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        match self.map.get(&t.inner.id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Reverse-sweep the tape from `loss`, returning leaf gradients. The tape is
/// consumed: every retained operand buffer is released before this returns.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let (nodes, loss_idx) = TAPE.with(|t| -> Result<(Vec<Node>, usize)> {
        let mut st = t.borrow_mut();
        if st.grad_depth == 0 {
            return Err(Error::state(
                "backward requires an active gradient recording span",
            ));
        }
        if st.disable_depth > 0 {
            return Err(Error::state(
                "backward called inside a gradient-disabled span",
            ));
        }
        if st.nodes.is_empty() {
            return Err(Error::state("gradient tape is empty"));
        }
        let loss_idx = match loss.inner.node.get() {
            Some((epoch, idx)) if epoch == st.epoch => idx,
            _ => {
                return Err(Error::state(
                    "loss was not produced under the current recording span",
                ))
            }
        };
        let nodes = std::mem::take(&mut st.nodes);
        st.leaves.clear();
        st.epoch += 1;
        Ok((nodes, loss_idx))
    })?;

    let mut adjoints: Vec<Option<Buffer>> = (0..nodes.len()).map(|_| None).collect();
    adjoints[loss_idx] = Some(Buffer::from_vec(vec![1.0]));
    let mut grads: HashMap<TensorId, Tensor> = HashMap::new();

    for idx in (0..nodes.len()).rev() {
        let Some(adj) = adjoints[idx].take() else {
            continue;
        };
        let node = &nodes[idx];
        if let BackOp::Leaf { id, shape } = &node.op {
            grads.insert(*id, Tensor::from_op(shape.clone(), adj.as_slice().to_vec()));
            continue;
        }
        let contribs = backprop(&node.op, adj.as_slice());
        debug_assert_eq!(contribs.len(), node.inputs.len());
        for (slot, contrib) in node.inputs.iter().zip(contribs) {
            if let (Some(i), Some(c)) = (slot, contrib) {
                match &mut adjoints[*i] {
                    Some(acc) => {
                        for (a, v) in acc.as_mut_slice().iter_mut().zip(&c) {
                            *a += v;
                        }
                    }
                    empty => *empty = Some(Buffer::from_vec(c)),
                }
            }
        }
    }
    drop(nodes);
    Ok(Gradients { map: grads })
}

/// Adjoint of each operand given the output adjoint. Entries align with the
/// node's `inputs` slots; constant slots are skipped by the caller.
fn backprop(op: &BackOp, adj: &[f64]) -> Vec<Option<Vec<f64>>> {
    match op {
        BackOp::Leaf { .. } => unreachable!("leaves are handled by the sweep"),
        BackOp::Matmul { a, b, transpose_b } => backprop_matmul(a, b, *transpose_b, adj),
        BackOp::Add { lhs_len, rhs_len } => {
            let d_lhs = adj.to_vec();
            let mut d_rhs = vec![0.0; *rhs_len];
            for i in 0..*lhs_len {
                d_rhs[i % *rhs_len] += adj[i];
            }
            vec![Some(d_lhs), Some(d_rhs)]
        }
        BackOp::Mul { a, b } => {
            let d_a: Vec<f64> = adj.iter().zip(b.vals()).map(|(g, v)| g * v).collect();
            let d_b: Vec<f64> = adj.iter().zip(a.vals()).map(|(g, v)| g * v).collect();
            vec![Some(d_a), Some(d_b)]
        }
        BackOp::Scale { c } => vec![Some(adj.iter().map(|g| g * c).collect())],
        BackOp::Relu { input } => vec![Some(
            adj.iter()
                .zip(input.vals())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        BackOp::Gelu { input } => vec![Some(
            adj.iter()
                .zip(input.vals())
                .map(|(g, x)| g * gelu_grad(*x))
                .collect(),
        )],
        BackOp::Softmax { output } => {
            let width = *output.shape.last().unwrap();
            let mut d = vec![0.0; output.vals().len()];
            for ((y_row, g_row), d_row) in output
                .vals()
                .chunks(width)
                .zip(adj.chunks(width))
                .zip(d.chunks_mut(width))
            {
                let dot: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                for ((dv, y), g) in d_row.iter_mut().zip(y_row).zip(g_row) {
                    *dv = y * (g - dot);
                }
            }
            vec![Some(d)]
        }
        BackOp::LayerNorm {
            output,
            inv_std,
            width,
        } => {
            let w = *width;
            let mut d = vec![0.0; output.vals().len()];
            for (r, inv) in inv_std.vals().iter().enumerate() {
                let y = &output.vals()[r * w..(r + 1) * w];
                let g = &adj[r * w..(r + 1) * w];
                let g_mean: f64 = g.iter().sum::<f64>() / w as f64;
                let gy_mean: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum::<f64>() / w as f64;
                for ((dv, gv), yv) in d[r * w..(r + 1) * w].iter_mut().zip(g).zip(y) {
                    *dv = inv * (gv - g_mean - yv * gy_mean);
                }
            }
            vec![Some(d)]
        }
        BackOp::CrossEntropy { probs, labels } => {
            let n = labels.len();
            let c = probs.vals().len() / n;
            let g = adj[0] / n as f64;
            let mut d = probs.vals().to_vec();
            for (i, &label) in labels.iter().enumerate() {
                d[i * c + label] -= 1.0;
            }
            for v in &mut d {
                *v *= g;
            }
            vec![Some(d)]
        }
        BackOp::MeanAll { in_len } => {
            let g = adj[0] / *in_len as f64;
            vec![Some(vec![g; *in_len])]
        }
        BackOp::MeanAxis { in_shape, axis } => {
            let len = in_shape[*axis];
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let mut d = vec![0.0; outer * len * inner];
            let scale = 1.0 / len as f64;
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        d[base + i] = adj[o * inner + i] * scale;
                    }
                }
            }
            vec![Some(d)]
        }
    }
}

fn backprop_matmul(a: &Saved, b: &Saved, tb: bool, adj: &[f64]) -> Vec<Option<Vec<f64>>> {
    let a_batched = a.shape.len() == 3;
    let b_batched = b.shape.len() == 3;
    let batch = if a_batched { a.shape[0] } else { 1 };
    let (m, n) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
    let p = if tb {
        b.shape[b.shape.len() - 2]
    } else {
        b.shape[b.shape.len() - 1]
    };
    let mut d_a = vec![0.0; a.vals().len()];
    let mut d_b = vec![0.0; b.vals().len()];
    for s in 0..batch {
        let adj_s = &adj[s * m * p..(s + 1) * m * p];
        let a_s = &a.vals()[s * m * n..(s + 1) * m * n];
        let b_s = if b_batched {
            &b.vals()[s * n * p..(s + 1) * n * p]
        } else {
            b.vals()
        };
        let d_a_s = &mut d_a[s * m * n..(s + 1) * m * n];
        if tb {
            // out = A B^T with B stored p x n: dA = dOut B, dB = dOut^T A
            matmul_kernel(adj_s, false, b_s, false, m, p, n, d_a_s);
        } else {
            // dA = dOut B^T
            matmul_kernel(adj_s, false, b_s, true, m, p, n, d_a_s);
        }
        let d_b_s = if b_batched {
            &mut d_b[s * n * p..(s + 1) * n * p]
        } else {
            &mut d_b[..]
        };
        if tb {
            matmul_kernel(adj_s, true, a_s, false, p, m, n, d_b_s);
        } else {
            matmul_kernel(a_s, true, adj_s, false, n, m, p, d_b_s);
        }
    }
    vec![Some(d_a), Some(d_b)]
}
