//! Masked fine-tuning and evaluation.
//!
//! The optimizer is SGD with momentum. Gradients are computed densely but
//! only masked indices (plus the head, when trainable) are ever applied, so
//! frozen parameters stay bit-identical to the snapshot rather than merely
//! close. Weight decay also touches masked parameters only; the head is
//! trained without decay.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::meter::Buffer;
use crate::model::{LayerRef, Model};
use crate::select::SelectionMask;
use crate::tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    /// Learning rate at a given optimizer step, with `total` steps overall.
    pub fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_schedule() -> Schedule {
    Schedule::Cosine
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// The head is normally trained in full alongside the mask; switching
    /// this off freezes it, which makes an empty mask a strict no-op.
    #[serde(default = "default_true")]
    pub head_trainable: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::contract(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub curves: Vec<CurvePoint>,
    pub final_train_loss: f64,
    pub val_accuracy: f64,
    /// Count of non-head parameters that differ from the snapshot.
    pub realized_l0: u64,
}

struct TrainSlot {
    layer: LayerRef,
    /// Trained data indices into the weight and bias vectors; `full` slots
    /// (the head) train everything and skip weight decay.
    weight_idx: Vec<usize>,
    bias_idx: Vec<usize>,
    full: bool,
    vw: Buffer,
    vb: Buffer,
}

fn build_slots(model: &Model, mask: &SelectionMask, head_trainable: bool) -> Result<Vec<TrainSlot>> {
    let n_linears = model.linears().len();
    let mut weight_idx: Vec<Vec<usize>> = vec![Vec::new(); n_linears];
    let mut bias_idx: Vec<Vec<usize>> = vec![Vec::new(); n_linears];
    for addr in mask.addresses() {
        let (layer_ref, is_bias, idx) = model.locate(*addr)?;
        match layer_ref {
            LayerRef::Linear(i) => {
                if is_bias {
                    bias_idx[i].push(idx);
                } else {
                    weight_idx[i].push(idx);
                }
            }
            // head addresses are covered by full-head training; a frozen
            // head stays frozen even if the mask names it
            LayerRef::Head => {}
        }
    }
    let mut slots = Vec::new();
    for (i, (w, b)) in weight_idx.into_iter().zip(bias_idx).enumerate() {
        if w.is_empty() && b.is_empty() {
            continue;
        }
        let layer = &model.linears()[i];
        slots.push(TrainSlot {
            layer: LayerRef::Linear(i),
            weight_idx: w,
            bias_idx: b,
            full: false,
            vw: Buffer::zeros(layer.weight.numel()),
            vb: Buffer::zeros(layer.bias.numel()),
        });
    }
    if head_trainable {
        let head = model.head();
        slots.push(TrainSlot {
            layer: LayerRef::Head,
            weight_idx: Vec::new(),
            bias_idx: Vec::new(),
            full: true,
            vw: Buffer::zeros(head.weight.numel()),
            vb: Buffer::zeros(head.bias.numel()),
        });
    }
    Ok(slots)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Fine-tune the masked subset (plus head) against cross-entropy.
pub fn finetune(
    model: &mut Model,
    mask: &SelectionMask,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    finetune_with_loss(model, mask, train, val, cfg, |m, b, l| m.loss(b, l))
}

/// [`finetune`] with a caller-supplied loss. The loss must be a scalar
/// tensor computed from the model's (recorded) forward pass.
pub fn finetune_with_loss<F>(
    model: &mut Model,
    mask: &SelectionMask,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut loss_fn: F,
) -> Result<TrainResult>
where
    F: FnMut(&Model, &Tensor, &[usize]) -> Result<Tensor>,
{
    cfg.validate()?;
    mask.validate_for(model)?;
    let mut slots = build_slots(model, mask, cfg.head_trainable)?;
    let n = train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let batch = train.gather(&order[start..end])?;
            let mut batch_loss = 0.0;
            let grads = tape::with_grad(|| -> Result<tape::Gradients> {
                let loss = loss_fn(model, batch.features(), batch.labels())?;
                batch_loss = loss.item()?;
                tape::backward(&loss)
            })
            .map_err(|e| diverged(e, epoch))?;
            loss_sum += batch_loss * (end - start) as f64;
            let lr = cfg.schedule.lr(cfg.learning_rate, step, total_steps);
            for slot in &mut slots {
                apply_step(model, slot, &grads, lr, cfg)?;
            }
            step += 1;
            start = end;
        }
        let train_loss = loss_sum / n as f64;
        let val_accuracy = evaluate(model, val).map_err(|e| diverged(e, epoch))?;
        curves.push(CurvePoint {
            epoch,
            train_loss,
            val_accuracy,
        });
    }
    let last = curves.last().expect("at least one epoch ran");
    Ok(TrainResult {
        final_train_loss: last.train_loss,
        val_accuracy: last.val_accuracy,
        realized_l0: model.l0_delta_nonhead(),
        curves,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        other => other,
    }
}

fn apply_step(
    model: &mut Model,
    slot: &mut TrainSlot,
    grads: &tape::Gradients,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let (new_w, new_b) = {
        let layer = model.layer(slot.layer);
        let gw = grads.wrt(&layer.weight);
        let gb = grads.wrt(&layer.bias);
        let vw = slot.vw.as_mut_slice();
        let vb = slot.vb.as_mut_slice();
        let update = |vals: &mut [f64], g: &[f64], v: &mut [f64], idx: usize, decay: f64| {
            let grad = g[idx] + decay * vals[idx];
            v[idx] = cfg.momentum * v[idx] + grad;
            vals[idx] -= lr * v[idx];
        };
        if slot.full {
            let mut w = layer.weight.to_vec();
            let mut b = layer.bias.to_vec();
            for i in 0..w.len() {
                update(&mut w, gw.data(), vw, i, 0.0);
            }
            for i in 0..b.len() {
                update(&mut b, gb.data(), vb, i, 0.0);
            }
            (Some(w), Some(b))
        } else {
            let w = if slot.weight_idx.is_empty() {
                None
            } else {
                let mut w = layer.weight.to_vec();
                for &i in &slot.weight_idx {
                    update(&mut w, gw.data(), vw, i, cfg.weight_decay);
                }
                Some(w)
            };
            let b = if slot.bias_idx.is_empty() {
                None
            } else {
                let mut b = layer.bias.to_vec();
                for &i in &slot.bias_idx {
                    update(&mut b, gb.data(), vb, i, cfg.weight_decay);
                }
                Some(b)
            };
            (w, b)
        }
    };
    if let Some(w) = new_w {
        model.set_weight_data(slot.layer, w)?;
    }
    if let Some(b) = new_b {
        model.set_bias_data(slot.layer, b)?;
    }
    Ok(())
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.n_classes() > model.n_classes() {
        return Err(Error::data(format!(
            "dataset labels cover {} classes but the model predicts {}",
            data.n_classes(),
            model.n_classes()
        )));
    }
    let n = data.len();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let logits = model.forward(&data.features().slice_rows(start, end)?)?;
        let preds = logits.argmax_rows()?;
        correct += preds
            .iter()
            .zip(&data.labels()[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ingest, DataSource, DatasetSpec};
    use crate::model::{Arch, ParameterAddress, ParamSet};
    use crate::select::{select_baseline, BaselineKind, BudgetSpec, Variant};

    fn blobs(seed: u64, n: usize, classes: usize, features: usize, sep: f64) -> crate::data::SplitDataset {
        ingest(
            &DatasetSpec {
                source: DataSource::SyntheticGaussianClasses {
                    n_classes: classes,
                    n_samples: n,
                    n_features: features,
                    separation: sep,
                },
                train_fraction: 0.7,
                val_fraction: 0.3,
                normalize: false,
                seed,
            },
            None,
        )
        .unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            schedule: Schedule::Cosine,
            head_trainable: true,
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_values() {
        let ok = quick_config();
        ok.validate().unwrap();
        for breaker in [
            |c: &mut TrainConfig| c.epochs = 0,
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.learning_rate = f64::NAN,
            |c: &mut TrainConfig| c.momentum = 1.0,
            |c: &mut TrainConfig| c.weight_decay = -0.1,
        ] {
            let mut bad = quick_config();
            breaker(&mut bad);
            assert_eq!(bad.validate().unwrap_err().category(), "contract");
        }
    }

    #[test]
    fn cosine_schedule_hand_values() {
        let s = Schedule::Cosine;
        assert_eq!(s.lr(0.4, 0, 100), 0.4);
        assert!((s.lr(0.4, 50, 100) - 0.2).abs() < 1e-15);
        assert!(s.lr(0.4, 99, 100) < 0.001);
        assert_eq!(Schedule::Constant.lr(0.4, 99, 100), 0.4);
    }

    #[test]
    fn single_step_quadratic_loss_matches_hand_sgd() {
        let arch = Arch::Mlp { dims: vec![1, 1, 2] };
        let params = ParamSet {
            layers: vec![
                (vec![1.0], vec![0.0]),
                (vec![1.0, 0.0], vec![0.0, 0.0]),
            ],
        };
        let mut m = Model::from_param_set(&arch, params).unwrap();
        let mask = SelectionMask::from_addresses(
            &m,
            Variant::WeightedL1,
            vec![ParameterAddress::weight(0, 0, 0)],
        )
        .unwrap();
        let data = Dataset::new(
            Tensor::new(vec![1.0], &[1, 1]).unwrap(),
            vec![0],
            2,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            schedule: Schedule::Constant,
            head_trainable: false,
        };
        let pick_first = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
        finetune_with_loss(&mut m, &mask, &data, &data, &cfg, |model, batch, _| {
            let logits = model.forward(batch)?;
            let masked = logits.mul(&pick_first)?;
            let sq = masked.mul(&masked)?;
            sq.mean_all()?.scale(2.0)
        })
        .unwrap();
        let w = m.linears()[0].weight.data()[0];
        assert!((w - 0.8).abs() < 1e-12, "w should step 1 -> 0.8, got {w}");
        assert_eq!(w.to_bits(), (1.0f64 - 0.1 * 2.0).to_bits());
        assert_eq!(m.linears()[0].bias.data()[0], 0.0, "unmasked bias moved");
        assert_eq!(m.head().weight.data(), &[1.0, 0.0], "frozen head moved");
    }

    #[test]
    fn empty_mask_with_frozen_head_is_a_strict_noop() {
        let splits = blobs(3, 40, 3, 5, 3.0);
        let mut m = Model::mlp(&[5, 6, 3], 7).unwrap();
        let before = m.param_set();
        let mask = select_baseline(
            BaselineKind::LinearHeadOnly,
            &m,
            &BudgetSpec::Fraction(1.0),
        )
        .unwrap();
        let mut cfg = quick_config();
        cfg.head_trainable = false;
        let result = finetune(&mut m, &mask, &splits.train, &splits.val, &cfg).unwrap();
        assert_eq!(result.realized_l0, 0);
        let after = m.param_set();
        for (a, b) in before.layers.iter().zip(&after.layers) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.0), bits(&b.0), "weights changed in a no-op run");
            assert_eq!(bits(&a.1), bits(&b.1), "biases changed in a no-op run");
        }
    }

    #[test]
    fn frozen_parameters_stay_bit_identical_to_the_snapshot() {
        let splits = blobs(5, 60, 4, 6, 2.5);
        let mut m = Model::mlp(&[6, 10, 4], 2).unwrap();
        let mask =
            select_baseline(BaselineKind::Random { seed: 11 }, &m, &BudgetSpec::Absolute(9))
                .unwrap();
        let mut cfg = quick_config();
        cfg.weight_decay = 0.01;
        let result = finetune(&mut m, &mask, &splits.train, &splits.val, &cfg).unwrap();
        let nonhead_masked = mask
            .addresses()
            .iter()
            .filter(|a| (a.layer_id as usize) < m.linears().len())
            .count() as u64;
        assert!(
            result.realized_l0 <= nonhead_masked,
            "realized l0 {} exceeds masked non-head count {nonhead_masked}",
            result.realized_l0
        );
        for addr in m.eligible_addresses() {
            if mask.contains(addr) {
                continue;
            }
            let now = m.param_at(addr).unwrap();
            let (layer_ref, is_bias, idx) = m.locate(addr).unwrap();
            let li = match layer_ref {
                LayerRef::Linear(i) => i,
                LayerRef::Head => unreachable!("eligible addresses exclude the head"),
            };
            let snap = &m.theta0().layers[li];
            let was = if is_bias { snap.1[idx] } else { snap.0[idx] };
            assert_eq!(
                now.to_bits(),
                was.to_bits(),
                "frozen parameter {addr} drifted"
            );
        }
    }

    #[test]
    fn full_mask_training_matches_an_independent_scalar_loop() {
        let splits = blobs(9, 20, 3, 4, 3.0);
        let train = &splits.train;
        let val = &splits.val;
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.05,
            seed: 4,
            schedule: Schedule::Cosine,
            head_trainable: true,
        };

        let mut tuned = Model::mlp(&[4, 5, 3], 21).unwrap();
        let mask = SelectionMask::from_addresses(
            &tuned,
            Variant::WeightedL1,
            tuned.eligible_addresses(),
        )
        .unwrap();
        finetune(&mut tuned, &mask, train, val, &cfg).unwrap();

        // reference: same gradients, but plain scalar bookkeeping for the
        // shuffle, schedule, momentum, and decay
        let mut reference = Model::mlp(&[4, 5, 3], 21).unwrap();
        let n = train.len();
        let batches_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = cfg.epochs * batches_per_epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let n_layers = reference.linears().len();
        let mut vels: Vec<(Vec<f64>, Vec<f64>)> = (0..=n_layers)
            .map(|i| {
                let l = if i < n_layers {
                    &reference.linears()[i]
                } else {
                    reference.head()
                };
                (vec![0.0; l.weight.numel()], vec![0.0; l.bias.numel()])
            })
            .collect();
        let mut step = 0usize;
        for _ in 0..cfg.epochs {
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut start = 0;
            while start < n {
                let end = (start + cfg.batch_size).min(n);
                let batch = train.gather(&order[start..end]).unwrap();
                let grads = tape::with_grad(|| {
                    let loss = reference.loss(batch.features(), batch.labels()).unwrap();
                    tape::backward(&loss).unwrap()
                });
                let t = step as f64 / total_steps as f64;
                let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                for li in 0..=n_layers {
                    let (layer_ref, decay) = if li < n_layers {
                        (LayerRef::Linear(li), cfg.weight_decay)
                    } else {
                        (LayerRef::Head, 0.0)
                    };
                    let (mut w, mut b, gw, gb) = {
                        let l = reference.layer(layer_ref);
                        (
                            l.weight.to_vec(),
                            l.bias.to_vec(),
                            grads.wrt(&l.weight).to_vec(),
                            grads.wrt(&l.bias).to_vec(),
                        )
                    };
                    for i in 0..w.len() {
                        let g = gw[i] + decay * w[i];
                        vels[li].0[i] = cfg.momentum * vels[li].0[i] + g;
                        w[i] -= lr * vels[li].0[i];
                    }
                    for i in 0..b.len() {
                        let g = gb[i] + decay * b[i];
                        vels[li].1[i] = cfg.momentum * vels[li].1[i] + g;
                        b[i] -= lr * vels[li].1[i];
                    }
                    reference.set_weight_data(layer_ref, w).unwrap();
                    reference.set_bias_data(layer_ref, b).unwrap();
                }
                step += 1;
                start = end;
            }
        }

        for (a, b) in tuned
            .param_set()
            .layers
            .iter()
            .zip(reference.param_set().layers.iter())
        {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.0), bits(&b.0), "weights diverged from the scalar loop");
            assert_eq!(bits(&a.1), bits(&b.1), "biases diverged from the scalar loop");
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let splits = blobs(13, 30, 3, 4, 3.0);
        let run = || {
            let mut m = Model::mlp(&[4, 6, 3], 1).unwrap();
            let mask = select_baseline(
                BaselineKind::Random { seed: 2 },
                &m,
                &BudgetSpec::Absolute(8),
            )
            .unwrap();
            let r = finetune(&mut m, &mask, &splits.train, &splits.val, &quick_config()).unwrap();
            (m.param_set(), r)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(ra.curves, rb.curves);
        for (a, b) in pa.layers.iter().zip(&pb.layers) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.0), bits(&b.0));
            assert_eq!(bits(&a.1), bits(&b.1));
        }
    }

    #[test]
    fn separable_blobs_converge_to_perfect_accuracy() {
        let splits = blobs(7, 60, 3, 4, 6.0);
        let mut m = Model::mlp(&[4, 8, 3], 5).unwrap();
        let mask = SelectionMask::from_addresses(
            &m,
            Variant::WeightedL1,
            m.eligible_addresses(),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 1,
            schedule: Schedule::Cosine,
            head_trainable: true,
        };
        let result = finetune(&mut m, &mask, &splits.train, &splits.val, &cfg).unwrap();
        assert_eq!(
            result.val_accuracy, 1.0,
            "well-separated blobs should be fully learnable, curves: {:?}",
            result.curves.last()
        );
        assert!(result.final_train_loss < result.curves[0].train_loss);
    }

    #[test]
    fn exploding_learning_rate_reports_divergence_with_epoch() {
        let splits = blobs(2, 24, 3, 4, 3.0);
        let mut m = Model::mlp(&[4, 6, 3], 3).unwrap();
        let mask = SelectionMask::from_addresses(
            &m,
            Variant::WeightedL1,
            m.eligible_addresses(),
        )
        .unwrap();
        let mut cfg = quick_config();
        cfg.epochs = 20;
        cfg.learning_rate = 1e30;
        cfg.schedule = Schedule::Constant;
        match finetune(&mut m, &mask, &splits.train, &splits.val, &cfg) {
            Err(Error::Diverged { epoch }) => assert!(epoch < 20),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mask_from_another_model_is_rejected_before_training() {
        let splits = blobs(1, 20, 2, 3, 3.0);
        let a = Model::mlp(&[3, 4, 2], 1).unwrap();
        let mut b = Model::mlp(&[3, 4, 2], 2).unwrap();
        let mask =
            select_baseline(BaselineKind::Random { seed: 0 }, &a, &BudgetSpec::Absolute(4))
                .unwrap();
        assert_eq!(
            finetune(&mut b, &mask, &splits.train, &splits.val, &quick_config())
                .unwrap_err()
                .category(),
            "contract"
        );
    }

    #[test]
    fn untrained_accuracy_on_random_labels_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let n = 2000;
        let vals: Vec<f64> = (0..n * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let data = Dataset::new(Tensor::new(vals, &[n, 6]).unwrap(), labels, 4).unwrap();
        let m = Model::mlp(&[6, 8, 4], 17).unwrap();
        let acc = evaluate(&m, &data).unwrap();
        assert!(
            (0.20..=0.30).contains(&acc),
            "labels independent of features should score about 1/4, got {acc}"
        );
        assert_eq!(evaluate(&m, &data).unwrap(), acc);
    }

    #[test]
    fn evaluation_rejects_labels_beyond_the_model_classes() {
        let m = Model::mlp(&[3, 4, 2], 1).unwrap();
        let data = Dataset::new(
            Tensor::new(vec![0.0; 9], &[3, 3]).unwrap(),
            vec![0, 1, 2],
            3,
        )
        .unwrap();
        assert_eq!(evaluate(&m, &data).unwrap_err().category(), "data");
    }

    #[test]
    fn curves_cover_every_epoch_in_order() {
        let splits = blobs(21, 30, 3, 4, 3.0);
        let mut m = Model::mlp(&[4, 5, 3], 9).unwrap();
        let mask = select_baseline(
            BaselineKind::Random { seed: 5 },
            &m,
            &BudgetSpec::Absolute(6),
        )
        .unwrap();
        let cfg = quick_config();
        let result = finetune(&mut m, &mask, &splits.train, &splits.val, &cfg).unwrap();
        assert_eq!(result.curves.len(), cfg.epochs);
        assert!(result.curves.iter().enumerate().all(|(i, c)| c.epoch == i));
        assert_eq!(result.final_train_loss, result.curves.last().unwrap().train_loss);
    }
}
