//! Architecture definitions, seeded initialization, and model construction.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LinearLayer, Model, Snapshot, BIAS_SENTINEL};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Supported architectures.
///
/// `Mlp { dims }` is a ReLU net whose last linear is the head: `dims`
/// includes input width and class count, so `[4, 3, 2]` is one eligible
/// 4-to-3 layer plus a 3-to-2 head.
///
/// `MiniTransformer` is a single pre-norm block with one attention head
/// (query/key/value/output projections), a GeLU feedforward pair, mean
/// pooling over the sequence, and a classification head. Its six projection
/// and feedforward linears are the eligible layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Arch {
    Mlp {
        dims: Vec<usize>,
    },
    MiniTransformer {
        d_model: usize,
        d_ff: usize,
        n_classes: usize,
        seq_len: usize,
    },
}

/// Raw parameter values in eligible-then-head order, used to build a model
/// with prescribed values (teacher construction, checkpoint loading).
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// (fan_in, fan_out) of every linear including the head, in forward order.
fn layer_dims(arch: &Arch) -> Result<Vec<(usize, usize)>> {
    match arch {
        Arch::Mlp { dims } => {
            if dims.len() < 2 {
                return Err(Error::contract(format!(
                    "mlp needs at least [input, classes] dims, got {dims:?}"
                )));
            }
            if dims.iter().any(|d| *d == 0) {
                return Err(Error::contract(format!("mlp dims contain zero width: {dims:?}")));
            }
            if *dims.last().unwrap() < 2 {
                return Err(Error::contract("mlp needs at least 2 output classes"));
            }
            Ok(dims.windows(2).map(|w| (w[0], w[1])).collect())
        }
        Arch::MiniTransformer {
            d_model,
            d_ff,
            n_classes,
            seq_len,
        } => {
            if *d_model == 0 || *d_ff == 0 || *seq_len == 0 {
                return Err(Error::contract(
                    "transformer dims must be nonzero (d_model, d_ff, seq_len)",
                ));
            }
            if *n_classes < 2 {
                return Err(Error::contract("transformer needs at least 2 output classes"));
            }
            Ok(vec![
                (*d_model, *d_model), // query
                (*d_model, *d_model), // key
                (*d_model, *d_model), // value
                (*d_model, *d_model), // attention output
                (*d_model, *d_ff),    // feedforward in
                (*d_ff, *d_model),    // feedforward out
                (*d_model, *n_classes), // head
            ])
        }
    }
}

fn check_address_limits(dims: &[(usize, usize)]) -> Result<()> {
    for (fan_in, fan_out) in dims {
        if *fan_in >= BIAS_SENTINEL as usize || *fan_out > 0x00FF_FFFF {
            return Err(Error::contract(format!(
                "layer {fan_in}x{fan_out} exceeds the addressable size"
            )));
        }
    }
    if dims.len() > u16::MAX as usize {
        return Err(Error::contract("too many layers to address"));
    }
    Ok(())
}

/// Identity hash: architecture description plus the full initial parameter
/// vector, truncated SHA-256 in hex.
fn model_hash(arch: &Arch, dims: &[(usize, usize)], params: &ParamSet) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(arch).expect("arch serializes").as_bytes());
    for (i, ((fan_in, fan_out), (w, b))) in dims.iter().zip(&params.layers).enumerate() {
        hasher.update((i as u32).to_le_bytes());
        hasher.update((*fan_in as u32).to_le_bytes());
        hasher.update((*fan_out as u32).to_le_bytes());
        for v in w {
            hasher.update(v.to_le_bytes());
        }
        for v in b {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl Model {
    /// Build a model with seeded uniform initialization in
    /// `+-sqrt(6 / (fan_in + fan_out))` per layer. The same seed always
    /// yields bit-identical parameters.
    pub fn build(arch: &Arch, seed: u64) -> Result<Model> {
        let dims = layer_dims(arch)?;
        check_address_limits(&dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len());
        for (fan_in, fan_out) in &dims {
            let limit = (6.0 / (*fan_in as f64 + *fan_out as f64)).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            let b: Vec<f64> = (0..*fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
            layers.push((w, b));
        }
        Model::from_param_set(arch, ParamSet { layers })
    }

    /// Convenience constructor for [`Arch::Mlp`].
    pub fn mlp(dims: &[usize], seed: u64) -> Result<Model> {
        Model::build(
            &Arch::Mlp {
                dims: dims.to_vec(),
            },
            seed,
        )
    }

    /// Convenience constructor for [`Arch::MiniTransformer`].
    pub fn mini_transformer(
        d_model: usize,
        d_ff: usize,
        n_classes: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<Model> {
        Model::build(
            &Arch::MiniTransformer {
                d_model,
                d_ff,
                n_classes,
                seq_len,
            },
            seed,
        )
    }

    /// Build a model from prescribed parameter values. The snapshot and
    /// identity hash are taken from these values.
    pub fn from_param_set(arch: &Arch, params: ParamSet) -> Result<Model> {
        let dims = layer_dims(arch)?;
        check_address_limits(&dims)?;
        if params.layers.len() != dims.len() {
            return Err(Error::contract(format!(
                "{} parameter pairs for {} layers",
                params.layers.len(),
                dims.len()
            )));
        }
        for (i, ((fan_in, fan_out), (w, b))) in dims.iter().zip(&params.layers).enumerate() {
            if w.len() != fan_in * fan_out || b.len() != *fan_out {
                return Err(Error::contract(format!(
                    "layer {i} expects {}x{} weights and {} biases, got {} and {}",
                    fan_in,
                    fan_out,
                    fan_out,
                    w.len(),
                    b.len()
                )));
            }
        }
        let hash = model_hash(arch, &dims, &params);
        let theta0 = Snapshot {
            layers: params.layers.clone(),
        };
        let mut linears = Vec::with_capacity(dims.len() - 1);
        let mut head = None;
        let last = dims.len() - 1;
        for (i, ((fan_in, fan_out), (w, b))) in dims.iter().zip(params.layers).enumerate() {
            let layer = LinearLayer {
                layer_id: i as u16,
                fan_in: *fan_in,
                fan_out: *fan_out,
                weight: Tensor::param(w, &[*fan_in, *fan_out])?,
                bias: Tensor::param(b, &[*fan_out])?,
            };
            if i == last {
                head = Some(layer);
            } else {
                linears.push(layer);
            }
        }
        Ok(Model::from_parts(
            arch.clone(),
            linears,
            head.expect("head layer exists"),
            theta0,
            hash,
        ))
    }

    /// Current parameter values in eligible-then-head order.
    pub fn param_set(&self) -> ParamSet {
        let mut layers: Vec<(Vec<f64>, Vec<f64>)> = self
            .linears()
            .iter()
            .map(|l| (l.weight.to_vec(), l.bias.to_vec()))
            .collect();
        layers.push((self.head().weight.to_vec(), self.head().bias.to_vec()));
        ParamSet { layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParameterAddress, TapSink};

    #[test]
    fn small_mlp_has_expected_parameter_counts() {
        let m = Model::mlp(&[4, 3, 2], 7).unwrap();
        assert_eq!(m.total_param_count(), 23);
        assert_eq!(m.eligible_param_count(), 15);
        assert_eq!(m.linears().len(), 1);
        assert_eq!(m.head().fan_in, 3);
        assert_eq!(m.head().fan_out, 2);
    }

    #[test]
    fn mnist_sized_mlp_parameter_count() {
        let m = Model::mlp(&[784, 256, 10], 0).unwrap();
        assert_eq!(m.total_param_count(), 203_530);
    }

    #[test]
    fn same_seed_reproduces_bit_identical_parameters() {
        let a = Model::mlp(&[8, 6, 3], 42).unwrap();
        let b = Model::mlp(&[8, 6, 3], 42).unwrap();
        assert_eq!(a.hash(), b.hash());
        for (la, lb) in a.linears().iter().zip(b.linears()) {
            let bits = |t: &crate::tensor::Tensor| {
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(&la.weight), bits(&lb.weight));
            assert_eq!(bits(&la.bias), bits(&lb.bias));
        }
        let c = Model::mlp(&[8, 6, 3], 43).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn init_respects_fan_based_bound() {
        let m = Model::mlp(&[30, 20, 5], 3).unwrap();
        let limit = (6.0 / 50.0f64).sqrt();
        assert!(m.linears()[0]
            .weight
            .data()
            .iter()
            .all(|v| v.abs() < limit));
        // values fill a reasonable part of the range rather than collapsing
        let max = m.linears()[0]
            .weight
            .data()
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max > limit * 0.8, "max |w| = {max}, limit {limit}");
    }

    #[test]
    fn degenerate_dims_are_contract_errors() {
        assert_eq!(Model::mlp(&[4], 0).unwrap_err().category(), "contract");
        assert_eq!(Model::mlp(&[4, 0, 2], 0).unwrap_err().category(), "contract");
        assert_eq!(Model::mlp(&[4, 3, 1], 0).unwrap_err().category(), "contract");
        assert_eq!(
            Model::mini_transformer(0, 4, 2, 3, 0).unwrap_err().category(),
            "contract"
        );
    }

    #[test]
    fn transformer_has_six_eligible_layers_and_classifier_logits() {
        let m = Model::mini_transformer(8, 16, 3, 5, 11).unwrap();
        assert_eq!(m.linears().len(), 6);
        assert_eq!(m.head().fan_out, 3);
        let batch = Tensor::new(
            (0..2 * 5 * 8).map(|i| (i as f64 * 0.37).sin()).collect(),
            &[2, 5, 8],
        )
        .unwrap();
        let logits = m.forward(&batch).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        // flat input layout is accepted too and matches
        let flat = batch.reshape(&[2, 40]).unwrap();
        assert_eq!(m.forward(&flat).unwrap().to_vec(), logits.to_vec());
    }

    #[test]
    fn mlp_forward_with_zero_weights_yields_bias_logits() {
        let mut m = Model::mlp(&[3, 4, 2], 5).unwrap();
        m.set_weight_data(crate::model::LayerRef::Linear(0), vec![0.0; 12])
            .unwrap();
        m.set_bias_data(crate::model::LayerRef::Linear(0), vec![0.0; 4])
            .unwrap();
        m.set_weight_data(crate::model::LayerRef::Head, vec![0.0; 8])
            .unwrap();
        m.set_bias_data(crate::model::LayerRef::Head, vec![0.25, -0.75])
            .unwrap();
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        assert_eq!(m.forward(&x).unwrap().to_vec(), vec![0.25, -0.75]);
    }

    #[test]
    fn identity_head_passes_hidden_through() {
        // 2-2 head with identity weights and zero bias: logits == relu(h)
        let mut m = Model::mlp(&[2, 2, 2], 9).unwrap();
        m.set_weight_data(crate::model::LayerRef::Head, vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        m.set_bias_data(crate::model::LayerRef::Head, vec![0.0, 0.0]).unwrap();
        let x = Tensor::new(vec![0.5, -0.5], &[1, 2]).unwrap();
        let l0 = &m.linears()[0];
        let mut hidden = vec![0.0, 0.0];
        for j in 0..2 {
            let mut acc = l0.bias.data()[j];
            for k in 0..2 {
                acc += x.data()[k] * l0.weight.data()[k * 2 + j];
            }
            hidden[j] = acc.max(0.0);
        }
        assert_eq!(m.forward(&x).unwrap().to_vec(), hidden);
    }

    struct Recorder {
        seen: Vec<(u16, Vec<f64>)>,
    }
    impl TapSink for Recorder {
        fn observe(&mut self, layer_id: u16, input: &Tensor) -> crate::error::Result<()> {
            self.seen.push((layer_id, input.to_vec()));
            Ok(())
        }
    }

    #[test]
    fn taps_are_transparent_and_match_a_reference_loop() {
        let m = Model::mlp(&[4, 3, 3, 2], 21).unwrap();
        let x = Tensor::new(
            vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9, 1.5, -2.0],
            &[2, 4],
        )
        .unwrap();
        let plain = m.forward(&x).unwrap();
        let mut rec = Recorder { seen: vec![] };
        let tapped = m.forward_tapped(&x, &mut rec).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&plain.to_vec()), bits(&tapped.to_vec()), "taps changed outputs");

        // reference loop: recompute each layer input with scalar arithmetic
        assert_eq!(rec.seen.len(), 2);
        let mut cur: Vec<Vec<f64>> = (0..2).map(|r| x.to_vec()[r * 4..(r + 1) * 4].to_vec()).collect();
        for (li, l) in m.linears().iter().enumerate() {
            let (id, observed) = &rec.seen[li];
            assert_eq!(*id, l.layer_id);
            let flat: Vec<f64> = cur.iter().flatten().cloned().collect();
            for (a, b) in observed.iter().zip(&flat) {
                assert!((a - b).abs() < 1e-12, "tap {li}: {a} vs reference {b}");
            }
            cur = cur
                .iter()
                .map(|row| {
                    (0..l.fan_out)
                        .map(|j| {
                            let mut acc = l.bias.data()[j];
                            for k in 0..l.fan_in {
                                acc += row[k] * l.weight.data()[k * l.fan_out + j];
                            }
                            acc.max(0.0)
                        })
                        .collect()
                })
                .collect();
        }
    }

    #[test]
    fn address_bijection_covers_every_parameter_once() {
        let m = Model::mlp(&[4, 3, 2], 2).unwrap();
        let addrs = m.eligible_addresses();
        assert_eq!(addrs.len() as u64, m.eligible_param_count());
        let mut flats: Vec<u64> = addrs.iter().map(|a| a.to_flat()).collect();
        let unique_before = flats.len();
        flats.sort_unstable();
        flats.dedup();
        assert_eq!(flats.len(), unique_before, "duplicate flat addresses");
        for addr in addrs {
            let (r, is_bias, idx) = m.locate(addr).unwrap();
            assert_eq!(r, crate::model::LayerRef::Linear(addr.layer_id as usize));
            assert_eq!(is_bias, addr.is_bias());
            let layer = m.layer(r);
            let len = if is_bias {
                layer.bias.numel()
            } else {
                layer.weight.numel()
            };
            assert!(idx < len);
        }
        // head addresses resolve as well
        let head_addr = ParameterAddress::bias(1, 0);
        assert_eq!(m.locate(head_addr).unwrap().0, crate::model::LayerRef::Head);
        // out-of-model addresses are contract errors
        assert!(m.locate(ParameterAddress::weight(9, 0, 0)).is_err());
        assert!(m.locate(ParameterAddress::weight(0, 5, 0)).is_err());
    }

    #[test]
    fn snapshot_is_immune_to_updates() {
        let mut m = Model::mlp(&[3, 3, 2], 8).unwrap();
        let w0 = m.theta0().layers[0].0.clone();
        let mut w = m.linears()[0].weight.to_vec();
        w[0] += 1.0;
        m.set_weight_data(crate::model::LayerRef::Linear(0), w).unwrap();
        assert_eq!(m.theta0().layers[0].0, w0);
        assert_eq!(m.l0_delta_nonhead(), 1);
    }

    #[test]
    fn param_set_round_trip_preserves_hash() {
        let m = Model::mini_transformer(4, 8, 2, 3, 77).unwrap();
        let rebuilt = Model::from_param_set(m.arch(), m.param_set()).unwrap();
        assert_eq!(m.hash(), rebuilt.hash());
    }
}
