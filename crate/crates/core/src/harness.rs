//! Strategy comparison driver.
//!
//! Runs several selection strategies against one shared model, dataset, and
//! budget, meters the selection stage of each, fine-tunes the result, and
//! collects everything into a [`RunReport`]. The selection stage starts
//! after the model and data exist and ends when the mask is produced;
//! tuning-stage allocations never count against selection metrics.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{ingest, Dataset, DatasetSpec, SplitDataset};
use crate::error::{Error, Result};
use crate::meter::MeterSpan;
use crate::model::{Arch, Model};
use crate::report::{save_curves, RowStatus, RunReport, StrategyRow};
use crate::select::{
    select, select_baseline, BaselineKind, BudgetSpec, Norm, Scheme, SelectionMask, Variant,
};
use crate::stats::ActivationStats;
use crate::train::{finetune, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Fps { variant: Variant, scheme: Scheme },
    Gps,
    Random,
    Bias,
    Linear,
}

/// Map an FPS variant tag to its aggregate norm and whether weight
/// magnitude multiplies the score.
pub fn fps_mode(variant: Variant) -> Result<(Norm, bool)> {
    match variant {
        Variant::WeightedL1 => Ok((Norm::L1, true)),
        Variant::WeightedL2 => Ok((Norm::L2, true)),
        Variant::ActivationL1 => Ok((Norm::L1, false)),
        Variant::ActivationL2 => Ok((Norm::L2, false)),
        other => Err(Error::contract(format!(
            "{other} is not an activation-statistics variant"
        ))),
    }
}

impl Strategy {
    /// Variant label used in report rows, available even when the run fails
    /// before a mask exists.
    pub fn variant_tag(&self) -> Variant {
        match self {
            Strategy::Fps { variant, .. } => *variant,
            Strategy::Gps => Variant::GradientMagnitude,
            Strategy::Random => Variant::Random,
            Strategy::Bias => Variant::BiasOnly,
            Strategy::Linear => Variant::HeadOnly,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Fps { variant, scheme } => {
                let scheme = match scheme {
                    Scheme::NeuronLevel => "neuron",
                    Scheme::LayerLevel => "layer",
                };
                write!(f, "fps-{variant}-{scheme}")
            }
            Strategy::Gps => f.write_str("gps"),
            Strategy::Random => f.write_str("random"),
            Strategy::Bias => f.write_str("bias"),
            Strategy::Linear => f.write_str("linear"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "gps" => return Ok(Strategy::Gps),
            "random" => return Ok(Strategy::Random),
            "bias" => return Ok(Strategy::Bias),
            "linear" => return Ok(Strategy::Linear),
            _ => {}
        }
        let unknown = || Error::contract(format!("unknown strategy {s:?}"));
        let rest = s.strip_prefix("fps-").ok_or_else(unknown)?;
        let (variant, scheme) = if let Some(v) = rest.strip_suffix("-neuron") {
            (v, Scheme::NeuronLevel)
        } else if let Some(v) = rest.strip_suffix("-layer") {
            (v, Scheme::LayerLevel)
        } else {
            return Err(unknown());
        };
        let variant: Variant = variant.parse().map_err(|_| unknown())?;
        fps_mode(variant).map_err(|_| unknown())?;
        Ok(Strategy::Fps { variant, scheme })
    }
}

#[derive(Debug, Clone)]
pub struct SelectionSettings {
    pub budget: BudgetSpec,
    pub batch_size: usize,
    /// Cap on gradient-scoring batches; `None` scores a full epoch.
    pub gps_max_batches: Option<usize>,
    pub baseline_seed: u64,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub mask: SelectionMask,
    /// Peak logical tensor bytes allocated during selection.
    pub peak_bytes: u64,
    /// Peak tape-retained bytes during selection; zero for every
    /// forward-only strategy.
    pub tape_bytes: u64,
    pub wall_ms: f64,
}

/// Produce a mask for one strategy with the allocation meter and wall clock
/// bracketing exactly the selection work.
pub fn run_selection(
    model: &Model,
    strategy: Strategy,
    train: &Dataset,
    settings: &SelectionSettings,
) -> Result<SelectionOutcome> {
    let span = MeterSpan::begin();
    let started = Instant::now();
    let mask = match strategy {
        Strategy::Fps { variant, scheme } => {
            let (norm, weighted) = fps_mode(variant)?;
            let stats = ActivationStats::collect(model, train.features(), settings.batch_size)?;
            let scores = crate::select::score_fps(model, &stats, norm, weighted)?;
            select(&scores, scheme, &settings.budget)?
        }
        Strategy::Gps => {
            let scores = crate::select::score_gps(
                model,
                train.features(),
                train.labels(),
                settings.batch_size,
                settings.gps_max_batches,
                |m, b, l| m.loss(b, l),
            )?;
            select(&scores, Scheme::NeuronLevel, &settings.budget)?
        }
        Strategy::Random => select_baseline(
            BaselineKind::Random {
                seed: settings.baseline_seed,
            },
            model,
            &settings.budget,
        )?,
        Strategy::Bias => select_baseline(BaselineKind::BiasOnly, model, &settings.budget)?,
        Strategy::Linear => select_baseline(BaselineKind::LinearHeadOnly, model, &settings.budget)?,
    };
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let reading = span.end();
    Ok(SelectionOutcome {
        mask,
        peak_bytes: reading.peak_delta_bytes,
        tape_bytes: reading.tape_peak_delta_bytes,
        wall_ms,
    })
}

#[derive(Debug, Clone)]
pub struct ComparisonConfig {
    pub arch: Arch,
    pub model_seed: u64,
    pub dataset: DatasetSpec,
    pub budget: BudgetSpec,
    pub strategies: Vec<Strategy>,
    pub train: TrainConfig,
    pub gps_max_batches: Option<usize>,
    /// Run strategies on separate threads, each with its own meter and its
    /// own deterministic rebuild of the model and dataset.
    pub parallel: bool,
    /// Where per-strategy curve files go; `None` leaves curve cells empty.
    pub curves_dir: Option<PathBuf>,
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.len() < 2 {
            return Err(Error::contract(format!(
                "a comparison needs at least 2 strategies, got {}",
                self.strategies.len()
            )));
        }
        self.train.validate()
    }
}

/// Run every configured strategy against the shared model, dataset, and
/// budget. A strategy that fails at any stage becomes a failed row; the
/// rest still run.
pub fn run_comparison(cfg: &ComparisonConfig) -> Result<RunReport> {
    cfg.validate()?;
    let rows = if cfg.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .strategies
                .iter()
                .map(|&s| scope.spawn(move || run_one(cfg, s)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("strategy thread panicked"))
                .collect()
        })
    } else {
        cfg.strategies.iter().map(|&s| run_one(cfg, s)).collect()
    };
    Ok(RunReport { rows })
}

fn run_one(cfg: &ComparisonConfig, strategy: Strategy) -> StrategyRow {
    let name = strategy.to_string();
    let tag = strategy.variant_tag().to_string();
    let prepared = (|| -> Result<(Model, SplitDataset, u64)> {
        let model = Model::build(&cfg.arch, cfg.model_seed)?;
        let data = ingest(&cfg.dataset, Some(&model))?;
        let k = cfg.budget.resolve(model.eligible_param_count())?;
        Ok((model, data, k))
    })();
    let (mut model, data, k) = match prepared {
        Ok(parts) => parts,
        Err(e) => return StrategyRow::failed(&name, &tag, 0, "", e.category()),
    };
    let hash = model.hash().to_string();
    match execute(cfg, strategy, &mut model, &data, k) {
        Ok(row) => row,
        Err(e) => StrategyRow::failed(&name, &tag, k, &hash, e.category()),
    }
}

fn execute(
    cfg: &ComparisonConfig,
    strategy: Strategy,
    model: &mut Model,
    data: &SplitDataset,
    k: u64,
) -> Result<StrategyRow> {
    let settings = SelectionSettings {
        budget: BudgetSpec::Absolute(k),
        batch_size: cfg.train.batch_size,
        gps_max_batches: cfg.gps_max_batches,
        baseline_seed: cfg.model_seed,
    };
    let outcome = run_selection(model, strategy, &data.train, &settings)?;
    let result = finetune(model, &outcome.mask, &data.train, &data.val, &cfg.train)?;
    let curves = match &cfg.curves_dir {
        Some(dir) => {
            let file = format!("curves-{strategy}.csv");
            save_curves(&dir.join(&file), &result.curves)?;
            file
        }
        None => String::new(),
    };
    Ok(StrategyRow {
        strategy: strategy.to_string(),
        variant: outcome.mask.variant().to_string(),
        k: outcome.mask.k(),
        acc: Some(result.val_accuracy),
        peak_bytes: Some(outcome.peak_bytes),
        select_ms: Some(outcome.wall_ms),
        status: RowStatus::Ok,
        curves,
        model_hash: model.hash().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataSource;
    use crate::report::load_curves;
    use crate::train::Schedule;

    fn base_config(strategies: &[&str]) -> ComparisonConfig {
        ComparisonConfig {
            arch: Arch::Mlp {
                dims: vec![6, 10, 3],
            },
            model_seed: 11,
            dataset: DatasetSpec {
                source: DataSource::SyntheticGaussianClasses {
                    n_classes: 3,
                    n_samples: 90,
                    n_features: 6,
                    separation: 3.0,
                },
                train_fraction: 0.7,
                val_fraction: 0.3,
                normalize: false,
                seed: 5,
            },
            budget: BudgetSpec::Fraction(0.2),
            strategies: strategies.iter().map(|s| s.parse().unwrap()).collect(),
            train: TrainConfig {
                epochs: 4,
                batch_size: 16,
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                seed: 3,
                schedule: Schedule::Cosine,
                head_trainable: true,
            },
            gps_max_batches: None,
            parallel: false,
            curves_dir: None,
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in [
            "fps-l1-neuron",
            "fps-l2-neuron",
            "fps-l1-layer",
            "fps-l2-layer",
            "fps-l1-act-neuron",
            "fps-l2-act-neuron",
            "fps-l1-act-layer",
            "fps-l2-act-layer",
            "gps",
            "random",
            "bias",
            "linear",
        ] {
            let parsed: Strategy = name.parse().unwrap();
            assert_eq!(parsed.to_string(), name);
        }
    }

    #[test]
    fn malformed_strategy_names_are_rejected() {
        for name in [
            "",
            "fps",
            "fps-l1",
            "fps-l3-neuron",
            "fps-grad-neuron",
            "fps-random-layer",
            "gps-neuron",
            "fps-l1-neuron-level",
        ] {
            let err = name.parse::<Strategy>().unwrap_err();
            assert_eq!(err.category(), "contract", "{name:?} should not parse");
        }
    }

    #[test]
    fn comparisons_require_at_least_two_strategies() {
        let cfg = base_config(&["fps-l1-neuron"]);
        assert_eq!(run_comparison(&cfg).unwrap_err().category(), "contract");
    }

    #[test]
    fn forward_only_selection_outspends_gradient_selection_nowhere() {
        let cfg = base_config(&["fps-l1-neuron", "gps"]);
        let model = Model::build(&cfg.arch, cfg.model_seed).unwrap();
        let data = ingest(&cfg.dataset, Some(&model)).unwrap();
        let settings = SelectionSettings {
            budget: BudgetSpec::Absolute(12),
            batch_size: 16,
            gps_max_batches: None,
            baseline_seed: 0,
        };
        let fps = run_selection(&model, "fps-l1-neuron".parse().unwrap(), &data.train, &settings)
            .unwrap();
        let gps = run_selection(&model, Strategy::Gps, &data.train, &settings).unwrap();
        assert_eq!(fps.tape_bytes, 0, "forward-only selection retained a tape");
        assert!(gps.tape_bytes > 0, "gradient selection should retain a tape");
        assert!(
            fps.peak_bytes < gps.peak_bytes,
            "fps peak {} should undercut gps peak {}",
            fps.peak_bytes,
            gps.peak_bytes
        );
        assert_eq!(fps.mask.k(), 12);
        assert_eq!(gps.mask.k(), 12);
    }

    #[test]
    fn reports_share_hash_and_budget_across_strategies() {
        let cfg = base_config(&["fps-l1-neuron", "gps", "random", "linear"]);
        let report = run_comparison(&cfg).unwrap();
        assert_eq!(report.rows.len(), 4);
        let hash = &report.rows[0].model_hash;
        assert!(report.rows.iter().all(|r| &r.model_hash == hash));
        assert!(report.rows.iter().all(|r| r.status == RowStatus::Ok));
        assert_eq!(report.rows[0].k, report.rows[1].k);
        assert_eq!(report.rows[0].k, report.rows[2].k);
        assert_eq!(report.rows[3].k, 0, "head-only tunes zero masked params");
        assert_eq!(report.rows[0].strategy, "fps-l1-neuron");
        assert_eq!(report.rows[0].variant, "l1");
        assert_eq!(report.rows[1].variant, "grad");
    }

    #[test]
    fn single_sample_statistics_make_the_two_norms_agree() {
        let mut cfg = base_config(&["fps-l1-neuron", "fps-l2-neuron"]);
        cfg.dataset.source = DataSource::SyntheticGaussianClasses {
            n_classes: 2,
            n_samples: 2,
            n_features: 6,
            separation: 3.0,
        };
        cfg.dataset.train_fraction = 0.5;
        cfg.dataset.val_fraction = 0.5;
        cfg.train.batch_size = 1;
        let model = Model::build(&cfg.arch, cfg.model_seed).unwrap();
        let data = ingest(&cfg.dataset, Some(&model)).unwrap();
        assert_eq!(data.train.len(), 1, "this test needs a single-sample train split");
        let settings = SelectionSettings {
            budget: BudgetSpec::Absolute(12),
            batch_size: 1,
            gps_max_batches: None,
            baseline_seed: 0,
        };
        let l1 = run_selection(&model, "fps-l1-neuron".parse().unwrap(), &data.train, &settings)
            .unwrap();
        let l2 = run_selection(&model, "fps-l2-neuron".parse().unwrap(), &data.train, &settings)
            .unwrap();
        assert_eq!(l1.mask.addresses(), l2.mask.addresses());
        let report = run_comparison(&cfg).unwrap();
        assert_eq!(report.rows[0].acc, report.rows[1].acc);
    }

    #[test]
    fn reruns_reproduce_accuracies_and_masks() {
        let cfg = base_config(&["fps-l2-layer", "random", "gps"]);
        let a = run_comparison(&cfg).unwrap();
        let b = run_comparison(&cfg).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.acc, rb.acc, "accuracy drifted between identical runs");
            assert_eq!(ra.k, rb.k);
            assert_eq!(ra.peak_bytes, rb.peak_bytes, "metering drifted");
            assert_eq!(ra.status, rb.status);
        }
        let model = Model::build(&cfg.arch, cfg.model_seed).unwrap();
        let data = ingest(&cfg.dataset, Some(&model)).unwrap();
        let settings = SelectionSettings {
            budget: BudgetSpec::Absolute(12),
            batch_size: cfg.train.batch_size,
            gps_max_batches: None,
            baseline_seed: cfg.model_seed,
        };
        for strategy in &cfg.strategies {
            let m1 = run_selection(&model, *strategy, &data.train, &settings).unwrap();
            let m2 = run_selection(&model, *strategy, &data.train, &settings).unwrap();
            assert_eq!(m1.mask, m2.mask, "{strategy} produced unstable masks");
        }
    }

    #[test]
    fn a_failing_strategy_keeps_its_row_while_others_finish() {
        let mut cfg = base_config(&["fps-l1-neuron", "linear"]);
        cfg.train.learning_rate = 1e30;
        cfg.train.schedule = Schedule::Constant;
        let report = run_comparison(&cfg).unwrap();
        assert_eq!(
            report.rows[0].status,
            RowStatus::Failed {
                category: "diverged".into()
            },
            "training two layers at lr 1e30 should overflow the weights"
        );
        assert_eq!(report.rows[0].acc, None);
        assert!(!report.rows[0].model_hash.is_empty(), "hash known before failure");
        assert_eq!(
            report.rows[1].status,
            RowStatus::Ok,
            "head-only training grows weights additively and stays finite"
        );
        assert!(report.rows[1].acc.is_some());
    }

    #[test]
    fn parallel_execution_matches_sequential_results() {
        let mut cfg = base_config(&["fps-l1-neuron", "random", "bias"]);
        let sequential = run_comparison(&cfg).unwrap();
        cfg.parallel = true;
        let parallel = run_comparison(&cfg).unwrap();
        for (s, p) in sequential.rows.iter().zip(&parallel.rows) {
            assert_eq!(s.strategy, p.strategy, "strategy order must be preserved");
            assert_eq!(s.acc, p.acc);
            assert_eq!(s.k, p.k);
            assert_eq!(s.model_hash, p.model_hash);
        }
    }

    #[test]
    fn curve_files_land_in_the_requested_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(&["fps-l1-neuron", "random"]);
        cfg.curves_dir = Some(dir.path().to_path_buf());
        let report = run_comparison(&cfg).unwrap();
        for row in &report.rows {
            assert!(!row.curves.is_empty());
            let curves = load_curves(&dir.path().join(&row.curves)).unwrap();
            assert_eq!(curves.len(), cfg.train.epochs);
        }
        assert_eq!(report.rows[0].curves, "curves-fps-l1-neuron.csv");
    }
}
