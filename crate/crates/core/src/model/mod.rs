//! Network definitions with stable per-parameter addressing.
//!
//! A [`Model`] is an ordered list of eligible linear layers plus a head
//! linear. Eligible layers carry an activation tap on their input: arming the
//! taps never changes the computation, it only exposes each layer's input
//! batch to an observer. The head is excluded from selection budgets and is
//! always trainable, so it is never tapped.
//!
//! Every scalar parameter has exactly one [`ParameterAddress`] and a lossless
//! flat `u64` encoding used for files and tie-breaking. The initial parameter
//! vector is snapshotted at construction; the model's identity hash covers
//! the architecture plus that snapshot, which is what mask and statistics
//! files embed to prevent cross-model application.

mod build;
mod checkpoint;

pub use build::{Arch, ParamSet};

use crate::error::{Error, Result};
use crate::tensor::{cross_entropy, Tensor};

/// `in_index` value that addresses a layer's bias for a given output neuron.
/// Biases are treated as weights whose input is the constant 1.
pub const BIAS_SENTINEL: u32 = 0x00FF_FFFF;

const OUT_LIMIT: u32 = 0x00FF_FFFF;

/// Identifies one scalar parameter: layer, output neuron, and either an input
/// neuron or [`BIAS_SENTINEL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParameterAddress {
    pub layer_id: u16,
    pub out_index: u32,
    pub in_index: u32,
}

impl ParameterAddress {
    pub fn weight(layer_id: u16, out_index: u32, in_index: u32) -> ParameterAddress {
        debug_assert!(out_index <= OUT_LIMIT && in_index < BIAS_SENTINEL);
        ParameterAddress {
            layer_id,
            out_index,
            in_index,
        }
    }

    pub fn bias(layer_id: u16, out_index: u32) -> ParameterAddress {
        debug_assert!(out_index <= OUT_LIMIT);
        ParameterAddress {
            layer_id,
            out_index,
            in_index: BIAS_SENTINEL,
        }
    }

    pub fn is_bias(&self) -> bool {
        self.in_index == BIAS_SENTINEL
    }

    /// Canonical flat encoding: layer, then output neuron, then input slot,
    /// with the bias slot ordered after all weights of its neuron. The
    /// numeric order of flat addresses is the canonical tie-break order.
    pub fn to_flat(self) -> u64 {
        ((self.layer_id as u64) << 48) | ((self.out_index as u64) << 24) | self.in_index as u64
    }

    pub fn from_flat(flat: u64) -> ParameterAddress {
        ParameterAddress {
            layer_id: (flat >> 48) as u16,
            out_index: ((flat >> 24) & 0x00FF_FFFF) as u32,
            in_index: (flat & 0x00FF_FFFF) as u32,
        }
    }
}

impl std::fmt::Display for ParameterAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_bias() {
            write!(f, "layer{}[out{}].bias", self.layer_id, self.out_index)
        } else {
            write!(
                f,
                "layer{}[out{}][in{}]",
                self.layer_id, self.out_index, self.in_index
            )
        }
    }
}

/// Fully-connected layer. `weight` is stored `[fan_in, fan_out]` row-major,
/// so the scalar for (out j, in k) lives at `k * fan_out + j`.
#[derive(Debug)]
pub struct LinearLayer {
    pub layer_id: u16,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn weight_index(&self, out_index: u32, in_index: u32) -> usize {
        in_index as usize * self.fan_out + out_index as usize
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Observer for eligible-layer inputs during a tapped forward pass. `input`
/// has shape `[.., fan_in]`; every leading index combination is one
/// observation row.
pub trait TapSink {
    fn observe(&mut self, layer_id: u16, input: &Tensor) -> Result<()>;
}

/// Which parameter tensor an update targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRef {
    Linear(usize),
    Head,
}

/// Initial parameter values, kept for frozen-slice verification and update
/// sparsity accounting. Plain storage, not metered tensor data.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// One (weight, bias) pair per eligible layer, then the head last.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug)]
pub struct Model {
    arch: Arch,
    linears: Vec<LinearLayer>,
    head: LinearLayer,
    theta0: Snapshot,
    hash: String,
}

impl Model {
    pub(crate) fn from_parts(
        arch: Arch,
        linears: Vec<LinearLayer>,
        head: LinearLayer,
        theta0: Snapshot,
        hash: String,
    ) -> Model {
        Model {
            arch,
            linears,
            head,
            theta0,
            hash,
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    /// Eligible (tapped, budget-covered) layers in forward order.
    pub fn linears(&self) -> &[LinearLayer] {
        &self.linears
    }

    pub fn head(&self) -> &LinearLayer {
        &self.head
    }

    pub fn layer(&self, r: LayerRef) -> &LinearLayer {
        match r {
            LayerRef::Linear(i) => &self.linears[i],
            LayerRef::Head => &self.head,
        }
    }

    /// Identity hash of architecture + initial parameters, embedded in every
    /// derived file.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn theta0(&self) -> &Snapshot {
        &self.theta0
    }

    pub fn input_numel(&self) -> usize {
        match &self.arch {
            Arch::Mlp { dims } => dims[0],
            Arch::MiniTransformer {
                d_model, seq_len, ..
            } => d_model * seq_len,
        }
    }

    pub fn n_classes(&self) -> usize {
        match &self.arch {
            Arch::Mlp { dims } => *dims.last().unwrap(),
            Arch::MiniTransformer { n_classes, .. } => *n_classes,
        }
    }

    /// Scalar parameters eligible for selection (all non-head weights and
    /// biases).
    pub fn eligible_param_count(&self) -> u64 {
        self.linears.iter().map(|l| l.param_count() as u64).sum()
    }

    pub fn total_param_count(&self) -> u64 {
        self.eligible_param_count() + self.head.param_count() as u64
    }

    /// All eligible addresses in canonical flat order.
    pub fn eligible_addresses(&self) -> Vec<ParameterAddress> {
        let mut out = Vec::with_capacity(self.eligible_param_count() as usize);
        for l in &self.linears {
            for j in 0..l.fan_out as u32 {
                for k in 0..l.fan_in as u32 {
                    out.push(ParameterAddress::weight(l.layer_id, j, k));
                }
                out.push(ParameterAddress::bias(l.layer_id, j));
            }
        }
        out
    }

    /// Resolve an address to its layer and flat data index. Head addresses
    /// resolve too; selection-facing callers must restrict themselves to
    /// eligible layers.
    pub fn locate(&self, addr: ParameterAddress) -> Result<(LayerRef, bool, usize)> {
        let (layer_ref, layer) = if (addr.layer_id as usize) < self.linears.len() {
            let i = addr.layer_id as usize;
            (LayerRef::Linear(i), &self.linears[i])
        } else if addr.layer_id as usize == self.linears.len() {
            (LayerRef::Head, &self.head)
        } else {
            return Err(Error::contract(format!(
                "address {addr} does not exist in this model"
            )));
        };
        if addr.out_index as usize >= layer.fan_out {
            return Err(Error::contract(format!(
                "address {addr}: output index out of range"
            )));
        }
        if addr.is_bias() {
            return Ok((layer_ref, true, addr.out_index as usize));
        }
        if addr.in_index as usize >= layer.fan_in {
            return Err(Error::contract(format!(
                "address {addr}: input index out of range"
            )));
        }
        Ok((layer_ref, false, layer.weight_index(addr.out_index, addr.in_index)))
    }

    /// Current value of the parameter at `addr`.
    pub fn param_at(&self, addr: ParameterAddress) -> Result<f64> {
        let (layer_ref, is_bias, idx) = self.locate(addr)?;
        let layer = self.layer(layer_ref);
        Ok(if is_bias {
            layer.bias.data()[idx]
        } else {
            layer.weight.data()[idx]
        })
    }

    /// Replace a weight tensor's values. The shape must match; the tensor is
    /// rebuilt because tensors are immutable.
    pub fn set_weight_data(&mut self, r: LayerRef, vals: Vec<f64>) -> Result<()> {
        let layer = match r {
            LayerRef::Linear(i) => &mut self.linears[i],
            LayerRef::Head => &mut self.head,
        };
        if vals.len() != layer.fan_in * layer.fan_out {
            return Err(Error::contract(format!(
                "weight data length {} for layer of {}x{}",
                vals.len(),
                layer.fan_in,
                layer.fan_out
            )));
        }
        layer.weight = Tensor::param(vals, &[layer.fan_in, layer.fan_out])?;
        Ok(())
    }

    pub fn set_bias_data(&mut self, r: LayerRef, vals: Vec<f64>) -> Result<()> {
        let layer = match r {
            LayerRef::Linear(i) => &mut self.linears[i],
            LayerRef::Head => &mut self.head,
        };
        if vals.len() != layer.fan_out {
            return Err(Error::contract(format!(
                "bias data length {} for fan-out {}",
                vals.len(),
                layer.fan_out
            )));
        }
        layer.bias = Tensor::param(vals, &[layer.fan_out])?;
        Ok(())
    }

    /// Number of non-head parameters whose current value differs bitwise
    /// from the initial snapshot.
    pub fn l0_delta_nonhead(&self) -> u64 {
        let mut count = 0u64;
        for (i, l) in self.linears.iter().enumerate() {
            let (w0, b0) = &self.theta0.layers[i];
            count += l
                .weight
                .data()
                .iter()
                .zip(w0)
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count() as u64;
            count += l
                .bias
                .data()
                .iter()
                .zip(b0)
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count() as u64;
        }
        count
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_with(batch, None)
    }

    /// Forward pass with armed taps. Produces bit-identical outputs to
    /// [`Model::forward`]; the sink only observes.
    pub fn forward_tapped(&self, batch: &Tensor, sink: &mut dyn TapSink) -> Result<Tensor> {
        self.forward_with(batch, Some(sink))
    }

    fn forward_with(&self, batch: &Tensor, mut sink: Option<&mut dyn TapSink>) -> Result<Tensor> {
        match &self.arch {
            Arch::Mlp { .. } => self.forward_mlp(batch, &mut sink),
            Arch::MiniTransformer {
                d_model, seq_len, ..
            } => self.forward_transformer(batch, *d_model, *seq_len, &mut sink),
        }
    }

    fn tap(
        sink: &mut Option<&mut dyn TapSink>,
        layer_id: u16,
        input: &Tensor,
    ) -> Result<()> {
        if let Some(s) = sink {
            s.observe(layer_id, input)?;
        }
        Ok(())
    }

    fn forward_mlp(&self, batch: &Tensor, sink: &mut Option<&mut dyn TapSink>) -> Result<Tensor> {
        if batch.ndim() != 2 || batch.shape()[1] != self.input_numel() {
            return Err(Error::Dimension {
                op: "forward",
                msg: format!(
                    "batch shape {:?}, expected [N, {}]",
                    batch.shape(),
                    self.input_numel()
                ),
            });
        }
        let mut x = batch.clone();
        for l in &self.linears {
            Self::tap(sink, l.layer_id, &x)?;
            x = x.matmul(&l.weight)?.add(&l.bias)?.relu()?;
        }
        x.matmul(&self.head.weight)?.add(&self.head.bias)
    }

    fn forward_transformer(
        &self,
        batch: &Tensor,
        d_model: usize,
        seq_len: usize,
        sink: &mut Option<&mut dyn TapSink>,
    ) -> Result<Tensor> {
        let mut x = match batch.ndim() {
            2 if batch.shape()[1] == d_model * seq_len => {
                batch.reshape(&[batch.shape()[0], seq_len, d_model])?
            }
            3 if batch.shape()[1] == seq_len && batch.shape()[2] == d_model => batch.clone(),
            _ => {
                return Err(Error::Dimension {
                    op: "forward",
                    msg: format!(
                        "batch shape {:?}, expected [N, {seq_len}, {d_model}] or [N, {}]",
                        batch.shape(),
                        seq_len * d_model
                    ),
                })
            }
        };
        let (wq, wk, wv, wo, f1, f2) = (
            &self.linears[0],
            &self.linears[1],
            &self.linears[2],
            &self.linears[3],
            &self.linears[4],
            &self.linears[5],
        );

        // Intermediates are dropped the moment the dataflow allows; without
        // a tape the live set stays a few tensors wide, which is exactly
        // what the allocation meter reports for forward-only selection.
        let h = x.layer_norm()?;
        Self::tap(sink, wq.layer_id, &h)?;
        Self::tap(sink, wk.layer_id, &h)?;
        Self::tap(sink, wv.layer_id, &h)?;
        let q = h.matmul(&wq.weight)?.add(&wq.bias)?;
        let k = h.matmul(&wk.weight)?.add(&wk.bias)?;
        let v = h.matmul(&wv.weight)?.add(&wv.bias)?;
        drop(h);
        let attn = q
            .matmul_tb(&k)?
            .scale(1.0 / (d_model as f64).sqrt())?
            .softmax()?;
        drop(q);
        drop(k);
        let ctx = attn.matmul(&v)?;
        drop(attn);
        drop(v);
        Self::tap(sink, wo.layer_id, &ctx)?;
        let o = ctx.matmul(&wo.weight)?.add(&wo.bias)?;
        drop(ctx);
        x = x.add(&o)?;
        drop(o);

        let h2 = x.layer_norm()?;
        Self::tap(sink, f1.layer_id, &h2)?;
        let mut ff = h2.matmul(&f1.weight)?;
        drop(h2);
        ff = ff.add(&f1.bias)?;
        ff = ff.gelu()?;
        Self::tap(sink, f2.layer_id, &ff)?;
        ff = ff.matmul(&f2.weight)?;
        ff = ff.add(&f2.bias)?;
        x = x.add(&ff)?;
        drop(ff);

        let pooled = x.mean_axis(1)?;
        drop(x);
        pooled.matmul(&self.head.weight)?.add(&self.head.bias)
    }

    /// Cross-entropy of the model's logits against labels, for one batch.
    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let logits = self.forward(batch)?;
        cross_entropy(&logits, labels)
    }
}
