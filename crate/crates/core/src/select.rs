//! Importance scoring and budgeted mask construction.
//!
//! Scores come either from forward-pass activation statistics (FPS: weight
//! magnitude times an activation aggregate, or the aggregate alone) or from
//! accumulated gradient magnitudes (GPS). Selection distributes an exact
//! budget of `k` parameters uniformly over units (output neurons or layers),
//! with floor-division quotas and a residual round that goes to the globally
//! best unselected candidates. Ties break toward the lowest canonical flat
//! address, which makes every mask deterministic.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::meter::Buffer;
use crate::model::{Model, ParameterAddress};
use crate::stats::ActivationStats;
use crate::tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

/// How a mask's scores were produced. Stored in mask files so downstream
/// stages can refuse mismatched artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    WeightedL1,
    WeightedL2,
    ActivationL1,
    ActivationL2,
    GradientMagnitude,
    Random,
    BiasOnly,
    HeadOnly,
}

impl Variant {
    pub fn fps(norm: Norm, use_weight_magnitude: bool) -> Variant {
        match (norm, use_weight_magnitude) {
            (Norm::L1, true) => Variant::WeightedL1,
            (Norm::L2, true) => Variant::WeightedL2,
            (Norm::L1, false) => Variant::ActivationL1,
            (Norm::L2, false) => Variant::ActivationL2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::WeightedL1 => "l1",
            Variant::WeightedL2 => "l2",
            Variant::ActivationL1 => "l1-act",
            Variant::ActivationL2 => "l2-act",
            Variant::GradientMagnitude => "grad",
            Variant::Random => "random",
            Variant::BiasOnly => "bias",
            Variant::HeadOnly => "head",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        Ok(match s {
            "l1" => Variant::WeightedL1,
            "l2" => Variant::WeightedL2,
            "l1-act" => Variant::ActivationL1,
            "l2-act" => Variant::ActivationL2,
            "grad" => Variant::GradientMagnitude,
            "random" => Variant::Random,
            "bias" => Variant::BiasOnly,
            "head" => Variant::HeadOnly,
            other => return Err(Error::data(format!("unknown variant tag `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    NeuronLevel,
    LayerLevel,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::NeuronLevel => "neuron-level",
            Scheme::LayerLevel => "layer-level",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scheme> {
        Ok(match s {
            "neuron-level" => Scheme::NeuronLevel,
            "layer-level" => Scheme::LayerLevel,
            other => return Err(Error::data(format!("unknown scheme `{other}`"))),
        })
    }
}

/// Update budget: a fraction of the eligible parameters or an absolute count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetSpec {
    Fraction(f64),
    Absolute(u64),
}

impl BudgetSpec {
    /// Concrete k for a model with `eligible_total` scoreable parameters.
    /// Fractions round to the nearest count and are clamped into [1, total].
    pub fn resolve(&self, eligible_total: u64) -> Result<u64> {
        if eligible_total == 0 {
            return Err(Error::contract("no eligible parameters to budget over"));
        }
        match self {
            BudgetSpec::Fraction(p) => {
                if !p.is_finite() || *p <= 0.0 || *p > 1.0 {
                    return Err(Error::contract(format!(
                        "budget fraction must be in (0, 1], got {p}"
                    )));
                }
                let k = (p * eligible_total as f64).round() as u64;
                Ok(k.clamp(1, eligible_total))
            }
            BudgetSpec::Absolute(k) => {
                if *k == 0 || *k > eligible_total {
                    return Err(Error::contract(format!(
                        "absolute budget {k} outside [1, {eligible_total}]"
                    )));
                }
                Ok(*k)
            }
        }
    }
}

#[derive(Debug)]
struct LayerScores {
    layer_id: u16,
    fan_in: usize,
    fan_out: usize,
    /// Weight scores at `in * fan_out + out`, then one bias score per neuron.
    values: Buffer,
}

/// Non-negative importance per eligible parameter, keyed by address.
#[derive(Debug)]
pub struct ImportanceScore {
    model_hash: String,
    variant: Variant,
    layers: Vec<LayerScores>,
}

impl ImportanceScore {
    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn eligible_total(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| ((l.fan_in + 1) * l.fan_out) as u64)
            .sum()
    }

    pub fn unit_count(&self) -> u64 {
        self.layers.iter().map(|l| l.fan_out as u64).sum()
    }

    pub fn score(&self, addr: ParameterAddress) -> Result<f64> {
        let l = self
            .layers
            .iter()
            .find(|l| l.layer_id == addr.layer_id)
            .ok_or_else(|| Error::contract(format!("no scores for layer {}", addr.layer_id)))?;
        let out = addr.out_index as usize;
        if out >= l.fan_out {
            return Err(Error::contract(format!("address {addr} outside scored layer")));
        }
        let idx = if addr.is_bias() {
            l.fan_in * l.fan_out + out
        } else {
            let inp = addr.in_index as usize;
            if inp >= l.fan_in {
                return Err(Error::contract(format!("address {addr} outside scored layer")));
            }
            inp * l.fan_out + out
        };
        Ok(l.values.as_slice()[idx])
    }

    /// Assemble scores directly from per-layer value vectors. Used to build
    /// synthetic instances; validates shapes and non-negativity.
    pub fn from_parts(
        model_hash: &str,
        variant: Variant,
        parts: Vec<(u16, usize, usize, Vec<f64>, Vec<f64>)>,
    ) -> Result<ImportanceScore> {
        let mut layers = Vec::with_capacity(parts.len());
        for (layer_id, fan_in, fan_out, weight_scores, bias_scores) in parts {
            if weight_scores.len() != fan_in * fan_out || bias_scores.len() != fan_out {
                return Err(Error::contract(format!(
                    "layer {layer_id} score vectors do not match {fan_in}x{fan_out}"
                )));
            }
            let mut values = Buffer::zeros(fan_in * fan_out + fan_out);
            let v = values.as_mut_slice();
            for (i, s) in weight_scores.iter().chain(bias_scores.iter()).enumerate() {
                if !s.is_finite() || *s < 0.0 {
                    return Err(Error::contract(format!(
                        "scores must be finite and non-negative, got {s}"
                    )));
                }
                v[i] = *s;
            }
            layers.push(LayerScores {
                layer_id,
                fan_in,
                fan_out,
                values,
            });
        }
        Ok(ImportanceScore {
            model_hash: model_hash.to_string(),
            variant,
            layers,
        })
    }
}

/// Forward-pass scores: `|w| * agg(input activation)` per weight when
/// `use_weight_magnitude`, the aggregate alone otherwise. Biases take the
/// constant input 1, so their aggregate is exactly 1.
pub fn score_fps(
    model: &Model,
    stats: &ActivationStats,
    norm: Norm,
    use_weight_magnitude: bool,
) -> Result<ImportanceScore> {
    if stats.model_hash() != model.hash() {
        return Err(Error::contract(format!(
            "statistics were collected on model {}, scoring model {}",
            stats.model_hash(),
            model.hash()
        )));
    }
    let mut layers = Vec::with_capacity(model.linears().len());
    for (li, l) in model.linears().iter().enumerate() {
        let agg = match norm {
            Norm::L1 => stats.mean_abs(li)?,
            Norm::L2 => stats.rms(li)?,
        };
        let mut values = Buffer::zeros(l.param_count());
        let v = values.as_mut_slice();
        let w = l.weight.data();
        for (in_i, a) in agg.iter().enumerate() {
            for out_j in 0..l.fan_out {
                let idx = in_i * l.fan_out + out_j;
                v[idx] = if use_weight_magnitude { w[idx].abs() * a } else { *a };
            }
        }
        let b = l.bias.data();
        for out_j in 0..l.fan_out {
            v[l.fan_in * l.fan_out + out_j] =
                if use_weight_magnitude { b[out_j].abs() } else { 1.0 };
        }
        layers.push(LayerScores {
            layer_id: l.layer_id,
            fan_in: l.fan_in,
            fan_out: l.fan_out,
            values,
        });
    }
    Ok(ImportanceScore {
        model_hash: model.hash().to_string(),
        variant: Variant::fps(norm, use_weight_magnitude),
        layers,
    })
}

/// Gradient-magnitude scores: `|dL/dw|` accumulated per batch over the
/// dataset (optionally capped at `max_batches`). Runs under gradient
/// recording; this is the memory-hungry path the forward-only scorer is
/// compared against.
pub fn score_gps<F>(
    model: &Model,
    features: &Tensor,
    labels: &[usize],
    batch_size: usize,
    max_batches: Option<usize>,
    mut loss_fn: F,
) -> Result<ImportanceScore>
where
    F: FnMut(&Model, &Tensor, &[usize]) -> Result<Tensor>,
{
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let n = features.shape()[0];
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "score_gps".into(),
            msg: format!("{n} feature rows but {} labels", labels.len()),
        });
    }
    let mut accum: Vec<Buffer> = model
        .linears()
        .iter()
        .map(|l| Buffer::zeros(l.param_count()))
        .collect();
    let limit = max_batches.unwrap_or(usize::MAX).max(1);
    let mut start = 0;
    let mut batches = 0;
    while start < n && batches < limit {
        let end = (start + batch_size).min(n);
        let bx = features.slice_rows(start, end)?;
        let bl = &labels[start..end];
        let grads = tape::with_grad(|| -> Result<tape::Gradients> {
            let loss = loss_fn(model, &bx, bl)?;
            tape::backward(&loss)
        })?;
        for (l, acc) in model.linears().iter().zip(accum.iter_mut()) {
            let gw = grads.wrt(&l.weight);
            let gb = grads.wrt(&l.bias);
            let a = acc.as_mut_slice();
            for (i, g) in gw.data().iter().enumerate() {
                a[i] += g.abs();
            }
            let off = l.fan_in * l.fan_out;
            for (j, g) in gb.data().iter().enumerate() {
                a[off + j] += g.abs();
            }
        }
        start = end;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::contract("empty dataset for gradient scoring"));
    }
    let layers = model
        .linears()
        .iter()
        .zip(accum)
        .map(|(l, values)| LayerScores {
            layer_id: l.layer_id,
            fan_in: l.fan_in,
            fan_out: l.fan_out,
            values,
        })
        .collect();
    Ok(ImportanceScore {
        model_hash: model.hash().to_string(),
        variant: Variant::GradientMagnitude,
        layers,
    })
}

/// Ranking order for candidates: higher score first, then lower address.
fn better(a: &(f64, u64), b: &(f64, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Split the `m` best candidates off the pool via partial selection. The
/// remainder feeds the residual round.
fn split_top(mut cands: Vec<(f64, u64)>, m: usize) -> (Vec<(f64, u64)>, Vec<(f64, u64)>) {
    if m == 0 {
        return (Vec::new(), cands);
    }
    if m >= cands.len() {
        return (cands, Vec::new());
    }
    cands.select_nth_unstable_by(m - 1, better);
    let rest = cands.split_off(m);
    (cands, rest)
}

fn unit_candidates(l: &LayerScores, out_j: usize) -> Vec<(f64, u64)> {
    let v = l.values.as_slice();
    let mut cands = Vec::with_capacity(l.fan_in + 1);
    for in_i in 0..l.fan_in {
        cands.push((
            v[in_i * l.fan_out + out_j],
            ParameterAddress::weight(l.layer_id, out_j as u32, in_i as u32).to_flat(),
        ));
    }
    cands.push((
        v[l.fan_in * l.fan_out + out_j],
        ParameterAddress::bias(l.layer_id, out_j as u32).to_flat(),
    ));
    cands
}

/// Per output neuron: the neuron's top `floor(k / #neurons)` candidates
/// (its incoming weights plus its bias), then residual picks from the
/// globally best leftovers. Exactly `k` addresses.
pub fn select_neuron_level(scores: &ImportanceScore, budget: &BudgetSpec) -> Result<SelectionMask> {
    let total = scores.eligible_total();
    let k = budget.resolve(total)?;
    let units = scores.unit_count();
    if k < units {
        return Err(Error::contract(format!(
            "budget {k} cannot give every one of {units} neurons a pick"
        )));
    }
    let m = (k / units) as usize;
    let mut selected: Vec<u64> = Vec::with_capacity(k as usize);
    let mut leftovers: Vec<(f64, u64)> = Vec::new();
    for l in &scores.layers {
        for out_j in 0..l.fan_out {
            let cands = unit_candidates(l, out_j);
            let (top, rest) = split_top(cands, m.min(l.fan_in + 1));
            selected.extend(top.into_iter().map(|c| c.1));
            leftovers.extend(rest);
        }
    }
    let residual = k as usize - selected.len();
    let (extra, _) = split_top(leftovers, residual);
    selected.extend(extra.into_iter().map(|c| c.1));
    SelectionMask::from_flats(scores, Scheme::NeuronLevel, k, selected)
}

/// Per eligible layer: the layer's top `floor(k / #layers)` candidates from
/// all of its weights and biases pooled together, then residual picks from
/// the globally best leftovers. Individual neurons may receive nothing.
pub fn select_layer_level(scores: &ImportanceScore, budget: &BudgetSpec) -> Result<SelectionMask> {
    let total = scores.eligible_total();
    let k = budget.resolve(total)?;
    let n_layers = scores.layers.len() as u64;
    if k < n_layers {
        return Err(Error::contract(format!(
            "budget {k} cannot give every one of {n_layers} layers a pick"
        )));
    }
    let q = (k / n_layers) as usize;
    let mut selected: Vec<u64> = Vec::with_capacity(k as usize);
    let mut leftovers: Vec<(f64, u64)> = Vec::new();
    for l in &scores.layers {
        let mut pool = Vec::with_capacity((l.fan_in + 1) * l.fan_out);
        for out_j in 0..l.fan_out {
            pool.extend(unit_candidates(l, out_j));
        }
        let quota = q.min(pool.len());
        let (top, rest) = split_top(pool, quota);
        selected.extend(top.into_iter().map(|c| c.1));
        leftovers.extend(rest);
    }
    let residual = k as usize - selected.len();
    let (extra, _) = split_top(leftovers, residual);
    selected.extend(extra.into_iter().map(|c| c.1));
    SelectionMask::from_flats(scores, Scheme::LayerLevel, k, selected)
}

pub fn select(scores: &ImportanceScore, scheme: Scheme, budget: &BudgetSpec) -> Result<SelectionMask> {
    match scheme {
        Scheme::NeuronLevel => select_neuron_level(scores, budget),
        Scheme::LayerLevel => select_layer_level(scores, budget),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    Random { seed: u64 },
    BiasOnly,
    LinearHeadOnly,
}

/// Score-free reference masks. `Random` draws `k` eligible addresses without
/// replacement, `BiasOnly` takes every bias including the head's, and
/// `LinearHeadOnly` is empty (the head is trainable regardless of any mask).
pub fn select_baseline(
    kind: BaselineKind,
    model: &Model,
    budget: &BudgetSpec,
) -> Result<SelectionMask> {
    match kind {
        BaselineKind::Random { seed } => {
            let addrs = model.eligible_addresses();
            let k = budget.resolve(addrs.len() as u64)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picks = rand::seq::index::sample(&mut rng, addrs.len(), k as usize);
            let mut chosen: Vec<ParameterAddress> = picks.iter().map(|i| addrs[i]).collect();
            chosen.sort_unstable();
            Ok(SelectionMask {
                model_hash: model.hash().to_string(),
                scheme: None,
                variant: Variant::Random,
                k,
                addresses: chosen,
            })
        }
        BaselineKind::BiasOnly => {
            let mut chosen = Vec::new();
            for l in model.linears().iter().chain(std::iter::once(model.head())) {
                for j in 0..l.fan_out {
                    chosen.push(ParameterAddress::bias(l.layer_id, j as u32));
                }
            }
            chosen.sort_unstable();
            Ok(SelectionMask {
                model_hash: model.hash().to_string(),
                scheme: None,
                variant: Variant::BiasOnly,
                k: chosen.len() as u64,
                addresses: chosen,
            })
        }
        BaselineKind::LinearHeadOnly => Ok(SelectionMask {
            model_hash: model.hash().to_string(),
            scheme: None,
            variant: Variant::HeadOnly,
            k: 0,
            addresses: Vec::new(),
        }),
    }
}

/// A budgeted set of parameter addresses, sorted by canonical flat encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    model_hash: String,
    scheme: Option<Scheme>,
    variant: Variant,
    k: u64,
    addresses: Vec<ParameterAddress>,
}

impl SelectionMask {
    fn from_flats(
        scores: &ImportanceScore,
        scheme: Scheme,
        k: u64,
        mut flats: Vec<u64>,
    ) -> Result<SelectionMask> {
        flats.sort_unstable();
        let before = flats.len();
        flats.dedup();
        if flats.len() != before || flats.len() as u64 != k {
            return Err(Error::state(format!(
                "selection produced {} unique addresses for budget {k}",
                flats.len()
            )));
        }
        Ok(SelectionMask {
            model_hash: scores.model_hash.clone(),
            scheme: Some(scheme),
            variant: scores.variant,
            k,
            addresses: flats.into_iter().map(ParameterAddress::from_flat).collect(),
        })
    }

    /// Build a mask directly from an address list (oracle masks, tests,
    /// hand-picked subsets). Addresses are validated against the model,
    /// sorted, and must be distinct; `k` becomes their count.
    pub fn from_addresses(
        model: &Model,
        variant: Variant,
        mut addresses: Vec<ParameterAddress>,
    ) -> Result<SelectionMask> {
        addresses.sort_unstable();
        if addresses.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("duplicate addresses in mask"));
        }
        for addr in &addresses {
            model.locate(*addr)?;
        }
        Ok(SelectionMask {
            model_hash: model.hash().to_string(),
            scheme: None,
            variant,
            k: addresses.len() as u64,
            addresses,
        })
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn scheme(&self) -> Option<Scheme> {
        self.scheme
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn addresses(&self) -> &[ParameterAddress] {
        &self.addresses
    }

    pub fn len(&self) -> usize {
        self.addresses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addresses.is_empty()
    }

    pub fn contains(&self, addr: ParameterAddress) -> bool {
        self.addresses.binary_search(&addr).is_ok()
    }

    /// Check applicability to a concrete model: identity hash and every
    /// address resolving to a real parameter.
    pub fn validate_for(&self, model: &Model) -> Result<()> {
        if self.model_hash != model.hash() {
            return Err(Error::contract(format!(
                "mask was built for model {}, not {}",
                self.model_hash,
                model.hash()
            )));
        }
        for addr in &self.addresses {
            model.locate(*addr)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("selection-mask v1\n");
        out.push_str(&format!("tool {}\n", env!("CARGO_PKG_VERSION")));
        out.push_str(&format!("model {}\n", self.model_hash));
        let scheme = match self.scheme {
            Some(s) => s.to_string(),
            None => "unstructured".to_string(),
        };
        out.push_str(&format!("scheme {scheme}\n"));
        out.push_str(&format!("variant {}\n", self.variant));
        out.push_str(&format!("k {}\n", self.k));
        for addr in &self.addresses {
            out.push_str(&format!("{}\n", addr.to_flat()));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SelectionMask> {
        let text = fs::read_to_string(path)?;
        let display = path.display().to_string();
        let mut offset = 0u64;
        let mut lines = text.lines();
        let mut field = |what: &str| -> Result<(String, u64)> {
            let line = lines.next().ok_or_else(|| Error::Parse {
                path: display.clone(),
                offset,
                msg: format!("file ended while reading {what}"),
            })?;
            let at = offset;
            offset += line.len() as u64 + 1;
            Ok((line.to_string(), at))
        };
        let (header, at) = field("header")?;
        if header != "selection-mask v1" {
            return Err(Error::Parse {
                path: display,
                offset: at,
                msg: "expected `selection-mask v1` header".into(),
            });
        }
        let mut tagged = |tag: &str| -> Result<(String, u64)> {
            let (line, at) = field(tag)?;
            match line.strip_prefix(&format!("{tag} ")) {
                Some(rest) => Ok((rest.to_string(), at)),
                None => Err(Error::Parse {
                    path: display.clone(),
                    offset: at,
                    msg: format!("expected `{tag} ...`"),
                }),
            }
        };
        let _tool = tagged("tool")?;
        let (model_hash, _) = tagged("model")?;
        let (scheme_str, at) = tagged("scheme")?;
        let scheme = match scheme_str.as_str() {
            "unstructured" => None,
            s => Some(s.parse::<Scheme>().map_err(|_| Error::Parse {
                path: display.clone(),
                offset: at,
                msg: format!("unknown scheme `{s}`"),
            })?),
        };
        let (variant_str, at) = tagged("variant")?;
        let variant = variant_str.parse::<Variant>().map_err(|_| Error::Parse {
            path: display.clone(),
            offset: at,
            msg: format!("unknown variant `{variant_str}`"),
        })?;
        let (k_str, at) = tagged("k")?;
        let k: u64 = k_str.parse().map_err(|_| Error::Parse {
            path: display.clone(),
            offset: at,
            msg: format!("bad budget `{k_str}`"),
        })?;
        let mut addresses = Vec::with_capacity(k as usize);
        for _ in 0..k {
            let (line, at) = field("address")?;
            let flat: u64 = line.parse().map_err(|_| Error::Parse {
                path: display.clone(),
                offset: at,
                msg: format!("bad address `{line}`"),
            })?;
            addresses.push(ParameterAddress::from_flat(flat));
        }
        if !addresses.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::data(format!(
                "mask file {display} addresses are not strictly increasing"
            )));
        }
        Ok(SelectionMask {
            model_hash,
            scheme,
            variant,
            k,
            addresses,
        })
    }
}
