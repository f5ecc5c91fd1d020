//! Streaming activation statistics from forward passes.
//!
//! For every eligible layer the collector keeps two running sums per input
//! neuron: the sum of absolute activation values and the sum of squared
//! values. That is 16 bytes of accumulator state per tapped neuron; the
//! buffers are registered with the memory meter so the footprint shows up in
//! readings. Collection runs outside any gradient scope by construction and
//! is rejected if one is active.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::meter::Buffer;
use crate::model::{Model, TapSink};
use crate::tape;
use crate::tensor::Tensor;

#[derive(Debug)]
struct LayerStats {
    layer_id: u16,
    fan_in: usize,
    count: u64,
    sum_abs: Buffer,
    sum_sq: Buffer,
}

#[derive(Debug)]
pub struct ActivationStats {
    model_hash: String,
    layers: Vec<LayerStats>,
}

impl ActivationStats {
    /// Fresh accumulators for every eligible layer of `model`.
    pub fn new(model: &Model) -> ActivationStats {
        let layers = model
            .linears()
            .iter()
            .map(|l| LayerStats {
                layer_id: l.layer_id,
                fan_in: l.fan_in,
                count: 0,
                sum_abs: Buffer::zeros(l.fan_in),
                sum_sq: Buffer::zeros(l.fan_in),
            })
            .collect();
        ActivationStats {
            model_hash: model.hash().to_string(),
            layers,
        }
    }

    /// Run `features` through the model in batches and accumulate tap
    /// statistics. No gradient tape may be active.
    pub fn collect(model: &Model, features: &Tensor, batch_size: usize) -> Result<ActivationStats> {
        if batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if tape::is_recording() {
            return Err(Error::state(
                "activation statistics are forward-only; leave the gradient scope first",
            ));
        }
        let mut stats = ActivationStats::new(model);
        let n = features.shape()[0];
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let batch = features.slice_rows(start, end)?;
            model.forward_tapped(&batch, &mut stats)?;
            start = end;
        }
        Ok(stats)
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Activation rows observed by the given eligible layer so far.
    pub fn rows_seen(&self, layer: usize) -> u64 {
        self.layers[layer].count
    }

    /// Accumulator footprint: 16 bytes per tapped input neuron.
    pub fn tracked_bytes(&self) -> u64 {
        self.layers.iter().map(|l| 16 * l.fan_in as u64).sum()
    }

    /// Mean absolute activation per input neuron of the given eligible layer.
    pub fn mean_abs(&self, layer: usize) -> Result<Vec<f64>> {
        let l = self.summarizable(layer)?;
        let n = l.count as f64;
        Ok(l.sum_abs.as_slice().iter().map(|s| s / n).collect())
    }

    /// Root-mean-square activation per input neuron of the given eligible
    /// layer.
    pub fn rms(&self, layer: usize) -> Result<Vec<f64>> {
        let l = self.summarizable(layer)?;
        let n = l.count as f64;
        Ok(l.sum_sq.as_slice().iter().map(|s| (s / n).sqrt()).collect())
    }

    fn summarizable(&self, layer: usize) -> Result<&LayerStats> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::contract(format!("no eligible layer {layer}")))?;
        if l.count == 0 {
            return Err(Error::contract(format!(
                "layer {layer} has no observed activations to summarize"
            )));
        }
        Ok(l)
    }

    /// Fold another shard's accumulators into this one. Both must come from
    /// the same model.
    pub fn merge(&mut self, other: &ActivationStats) -> Result<()> {
        if self.model_hash != other.model_hash {
            return Err(Error::contract(format!(
                "cannot merge statistics for model {} into model {}",
                other.model_hash, self.model_hash
            )));
        }
        if self.layers.len() != other.layers.len() {
            return Err(Error::contract("layer count mismatch in merge"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.layer_id != b.layer_id || a.sum_abs.len() != b.sum_abs.len() {
                return Err(Error::contract("layer shape mismatch in merge"));
            }
            a.count += b.count;
            for (x, y) in a.sum_abs.as_mut_slice().iter_mut().zip(b.sum_abs.as_slice()) {
                *x += y;
            }
            for (x, y) in a.sum_sq.as_mut_slice().iter_mut().zip(b.sum_sq.as_slice()) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Write the accumulators as a line-oriented text file. Values use the
    /// shortest decimal form that parses back to the identical f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("activation-stats v1\n");
        out.push_str(&format!("model {}\n", self.model_hash));
        out.push_str(&format!("layers {}\n", self.layers.len()));
        for l in &self.layers {
            out.push_str(&format!("layer {} {} {}\n", l.layer_id, l.fan_in, l.count));
            for (a, s) in l.sum_abs.as_slice().iter().zip(l.sum_sq.as_slice()) {
                out.push_str(&format!("{a} {s}\n"));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ActivationStats> {
        let text = fs::read_to_string(path)?;
        let mut lines = Lines {
            path: path.display().to_string(),
            rest: &text,
            offset: 0,
            line_start: 0,
        };
        let header = lines.next_line("header")?;
        if header != "activation-stats v1" {
            return Err(lines.bad_prev("expected `activation-stats v1` header"));
        }
        let model_line = lines.next_line("model hash")?;
        let model_hash = model_line
            .strip_prefix("model ")
            .ok_or_else(|| lines.bad_prev("expected `model <hash>`"))?
            .to_string();
        let count_line = lines.next_line("layer count")?;
        let n_layers: usize = count_line
            .strip_prefix("layers ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| lines.bad_prev("expected `layers <count>`"))?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let head = lines.next_line("layer header")?;
            let mut parts = head
                .strip_prefix("layer ")
                .ok_or_else(|| lines.bad_prev("expected `layer <id> <fan_in> <count>`"))?
                .split_ascii_whitespace();
            let parse_field = |p: Option<&str>| p.and_then(|v| v.parse::<u64>().ok());
            let (id, fan_in, count) = match (
                parse_field(parts.next()),
                parse_field(parts.next()),
                parse_field(parts.next()),
            ) {
                (Some(i), Some(f), Some(c)) if parts.next().is_none() => (i, f, c),
                _ => return Err(lines.bad_prev("expected `layer <id> <fan_in> <count>`")),
            };
            if id > u16::MAX as u64 || fan_in == 0 || fan_in > 1 << 24 {
                return Err(lines.bad_prev("layer header out of range"));
            }
            let mut sum_abs = Buffer::zeros(fan_in as usize);
            let mut sum_sq = Buffer::zeros(fan_in as usize);
            for j in 0..fan_in as usize {
                let line = lines.next_line("accumulator pair")?;
                let mut vals = line.split_ascii_whitespace();
                let pair = match (vals.next(), vals.next(), vals.next()) {
                    (Some(a), Some(s), None) => a.parse::<f64>().ok().zip(s.parse::<f64>().ok()),
                    _ => None,
                };
                let (a, s) = pair
                    .ok_or_else(|| lines.bad_prev("expected `<sum_abs> <sum_sq>`"))?;
                sum_abs.as_mut_slice()[j] = a;
                sum_sq.as_mut_slice()[j] = s;
            }
            layers.push(LayerStats {
                layer_id: id as u16,
                fan_in: fan_in as usize,
                count,
                sum_abs,
                sum_sq,
            });
        }
        Ok(ActivationStats { model_hash, layers })
    }
}

impl TapSink for ActivationStats {
    fn observe(&mut self, layer_id: u16, input: &Tensor) -> Result<()> {
        let l = self
            .layers
            .iter_mut()
            .find(|l| l.layer_id == layer_id)
            .ok_or_else(|| Error::contract(format!("tap from unknown layer {layer_id}")))?;
        let width = *input.shape().last().unwrap_or(&0);
        if width != l.fan_in {
            return Err(Error::Dimension {
                op: "observe".into(),
                msg: format!("layer {layer_id} expects width {}, tap has {width}", l.fan_in),
            });
        }
        let rows = input.numel() / l.fan_in;
        let data = input.data();
        let abs = l.sum_abs.as_mut_slice();
        let sq = l.sum_sq.as_mut_slice();
        for r in 0..rows {
            let row = &data[r * width..(r + 1) * width];
            for (j, v) in row.iter().enumerate() {
                abs[j] += v.abs();
                sq[j] += v * v;
            }
        }
        l.count += rows as u64;
        Ok(())
    }
}

struct Lines<'a> {
    path: String,
    rest: &'a str,
    offset: u64,
    line_start: u64,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, what: &str) -> Result<&'a str> {
        if self.rest.is_empty() {
            return Err(Error::Parse {
                path: self.path.clone(),
                offset: self.offset,
                msg: format!("file ended while reading {what}"),
            });
        }
        self.line_start = self.offset;
        let (line, used) = match self.rest.find('\n') {
            Some(i) => (&self.rest[..i], i + 1),
            None => (self.rest, self.rest.len()),
        };
        self.rest = &self.rest[used..];
        self.offset += used as u64;
        Ok(line)
    }

    /// A parse error pointing at the start of the line just consumed.
    fn bad_prev(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: self.line_start,
            msg: msg.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meter;
    use crate::model::LayerRef;

    fn deterministic_features(rows: usize, cols: usize) -> Tensor {
        let vals = (0..rows * cols)
            .map(|i| ((i as f64 * 0.7311).sin() * 3.0) - 0.4)
            .collect();
        Tensor::new(vals, &[rows, cols]).unwrap()
    }

    #[test]
    fn first_layer_stats_match_hand_computation() {
        let m = Model::mlp(&[2, 3, 2], 4).unwrap();
        let x = Tensor::new(vec![3.0, 4.0, -3.0, 0.0], &[2, 2]).unwrap();
        let stats = ActivationStats::collect(&m, &x, 2).unwrap();
        assert_eq!(stats.rows_seen(0), 2);
        let mean_abs = stats.mean_abs(0).unwrap();
        assert!((mean_abs[0] - 3.0).abs() < 1e-15 && (mean_abs[1] - 2.0).abs() < 1e-15);
        let rms = stats.rms(0).unwrap();
        assert!((rms[0] - 3.0).abs() < 1e-15);
        assert!(
            (rms[1] - 2.8284271247461903).abs() < 1e-15,
            "rms of [4, 0] should be sqrt(8), got {}",
            rms[1]
        );
    }

    #[test]
    fn deeper_taps_see_post_relu_values() {
        let mut m = Model::mlp(&[2, 2, 2, 2], 4).unwrap();
        m.set_weight_data(LayerRef::Linear(0), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        m.set_bias_data(LayerRef::Linear(0), vec![0.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1.0, -2.0], &[1, 2]).unwrap();
        let stats = ActivationStats::collect(&m, &x, 1).unwrap();
        assert_eq!(stats.mean_abs(1).unwrap(), vec![1.0, 0.0]);
        assert_eq!(stats.rms(1).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn batch_size_does_not_change_statistics() {
        let m = Model::mlp(&[5, 4, 3], 6).unwrap();
        let x = deterministic_features(23, 5);
        let whole = ActivationStats::collect(&m, &x, 32).unwrap();
        for bs in [1, 7] {
            let chunked = ActivationStats::collect(&m, &x, bs).unwrap();
            for layer in 0..whole.layer_count() {
                let (a, b) = (whole.mean_abs(layer).unwrap(), chunked.mean_abs(layer).unwrap());
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-10, "batch {bs} drifted: {x} vs {y}");
                }
                let (a, b) = (whole.rms(layer).unwrap(), chunked.rms(layer).unwrap());
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-10, "batch {bs} drifted: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn sharding_and_merging_matches_a_single_pass() {
        let m = Model::mlp(&[4, 6, 3], 8).unwrap();
        let x = deterministic_features(23, 4);
        let whole = ActivationStats::collect(&m, &x, 8).unwrap();
        let mut first = ActivationStats::collect(&m, &x.slice_rows(0, 10).unwrap(), 8).unwrap();
        let second = ActivationStats::collect(&m, &x.slice_rows(10, 23).unwrap(), 8).unwrap();
        first.merge(&second).unwrap();
        assert_eq!(first.rows_seen(0), 23);
        for layer in 0..whole.layer_count() {
            for (a, b) in whole
                .mean_abs(layer)
                .unwrap()
                .iter()
                .zip(first.mean_abs(layer).unwrap())
            {
                assert!((a - b).abs() < 1e-10, "merged shards drifted: {a} vs {b}");
            }
        }
    }

    #[test]
    fn statistics_ignore_activation_sign() {
        let m = Model::mlp(&[3, 4, 2], 1).unwrap();
        let x = deterministic_features(11, 3);
        let neg = Tensor::new(x.to_vec().iter().map(|v| -v).collect(), &[11, 3]).unwrap();
        let a = ActivationStats::collect(&m, &x, 4).unwrap();
        let b = ActivationStats::collect(&m, &neg, 4).unwrap();
        assert_eq!(a.mean_abs(0).unwrap(), b.mean_abs(0).unwrap());
        assert_eq!(a.rms(0).unwrap(), b.rms(0).unwrap());
    }

    #[test]
    fn transformer_taps_cover_all_six_layers() {
        let m = Model::mini_transformer(4, 8, 2, 3, 5).unwrap();
        let x = deterministic_features(4, 12);
        let stats = ActivationStats::collect(&m, &x, 2).unwrap();
        assert_eq!(stats.layer_count(), 6);
        for layer in 0..6 {
            assert_eq!(
                stats.rows_seen(layer),
                12,
                "layer {layer} should see batch * seq_len rows"
            );
            assert!(stats.mean_abs(layer).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn merge_rejects_statistics_from_another_model() {
        let a = Model::mlp(&[3, 3, 2], 1).unwrap();
        let b = Model::mlp(&[3, 3, 2], 2).unwrap();
        let x = deterministic_features(5, 3);
        let mut sa = ActivationStats::collect(&a, &x, 5).unwrap();
        let sb = ActivationStats::collect(&b, &x, 5).unwrap();
        assert_eq!(sa.merge(&sb).unwrap_err().category(), "contract");
    }

    #[test]
    fn summaries_need_at_least_one_row() {
        let m = Model::mlp(&[3, 3, 2], 1).unwrap();
        let empty = ActivationStats::new(&m);
        assert_eq!(empty.mean_abs(0).unwrap_err().category(), "contract");
        assert_eq!(empty.rms(0).unwrap_err().category(), "contract");
    }

    #[test]
    fn collection_refuses_to_run_inside_a_gradient_scope() {
        let m = Model::mlp(&[3, 3, 2], 1).unwrap();
        let x = deterministic_features(4, 3);
        let err = crate::tape::with_grad(|| ActivationStats::collect(&m, &x, 2)).unwrap_err();
        assert_eq!(err.category(), "state");
    }

    #[test]
    fn collection_allocates_no_tape_bytes() {
        let m = Model::mlp(&[6, 5, 4, 3], 2).unwrap();
        let x = deterministic_features(16, 6);
        let span = meter::MeterSpan::begin();
        let stats = ActivationStats::collect(&m, &x, 4).unwrap();
        let reading = span.end();
        assert_eq!(reading.tape_peak_delta_bytes, 0, "forward-only pass touched the tape");
        assert!(stats.rows_seen(0) == 16);
    }

    #[test]
    fn accumulator_footprint_is_registered_with_the_meter() {
        let m = Model::mlp(&[4, 3, 2], 3).unwrap();
        let before = meter::reading().live_bytes;
        let stats = ActivationStats::new(&m);
        assert_eq!(stats.tracked_bytes(), 64, "16 bytes for each of 4 tapped neurons");
        assert_eq!(meter::reading().live_bytes, before + stats.tracked_bytes());
        drop(stats);
        assert_eq!(meter::reading().live_bytes, before);
    }

    #[test]
    fn stats_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.stats");
        let m = Model::mlp(&[5, 4, 4, 3], 9).unwrap();
        let x = deterministic_features(17, 5);
        let stats = ActivationStats::collect(&m, &x, 5).unwrap();
        stats.save(&path).unwrap();
        let loaded = ActivationStats::load(&path).unwrap();
        assert_eq!(loaded.model_hash(), stats.model_hash());
        assert_eq!(loaded.layer_count(), stats.layer_count());
        for layer in 0..stats.layer_count() {
            assert_eq!(loaded.rows_seen(layer), stats.rows_seen(layer));
            let bits = |v: Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(
                bits(loaded.mean_abs(layer).unwrap()),
                bits(stats.mean_abs(layer).unwrap()),
                "text round trip altered layer {layer}"
            );
            assert_eq!(
                bits(loaded.rms(layer).unwrap()),
                bits(stats.rms(layer).unwrap())
            );
        }
    }

    #[test]
    fn malformed_stats_files_name_the_failing_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.stats");
        std::fs::write(&path, "not a stats file\n").unwrap();
        match ActivationStats::load(&path).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other}"),
        }

        std::fs::write(
            &path,
            "activation-stats v1\nmodel abcd\nlayers 1\nlayer 0 2 5\n1.5 2.5\n",
        )
        .unwrap();
        match ActivationStats::load(&path).unwrap_err() {
            Error::Parse { offset, msg, .. } => {
                assert!(offset > 0, "truncation reported at offset 0");
                assert!(msg.contains("accumulator"), "message was: {msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn mismatched_tap_width_is_a_dimension_error() {
        let m = Model::mlp(&[3, 3, 2], 1).unwrap();
        let mut stats = ActivationStats::new(&m);
        let wide = Tensor::new(vec![1.0; 8], &[2, 4]).unwrap();
        assert_eq!(
            stats.observe(0, &wide).unwrap_err().category(),
            "dimension"
        );
    }
}
