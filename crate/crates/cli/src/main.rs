//! `fps`: rank, mask, and fine-tune a budgeted subset of a network's
//! parameters, driven by activation statistics from one forward pass.
//!
//! Stages communicate through files in one output directory, so each can
//! run in its own process: `collect-stats` writes `stats.txt`, `select`
//! turns statistics into `mask.txt`, `finetune` consumes the mask and
//! writes `checkpoint.bin` plus `curves.csv`, `compare` runs several
//! strategies and writes `report.csv`, and `report` renders that file as
//! text. The directory comes from `--out`, then `$FPS_OUT_DIR`, then the
//! working directory.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fps_core::data::{ingest, SplitDataset};
use fps_core::harness::{
    fps_mode, run_comparison, run_selection, ComparisonConfig, SelectionSettings, Strategy,
};
use fps_core::model::Model;
use fps_core::report::{save_curves, RunReport};
use fps_core::select::{score_fps, select, SelectionMask};
use fps_core::stats::ActivationStats;
use fps_core::train::finetune;
use fps_core::{Error, Result};

use config::RunConfig;

const STATS_FILE: &str = "stats.txt";
const MASK_FILE: &str = "mask.txt";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const CURVES_FILE: &str = "curves.csv";
const REPORT_CSV: &str = "report.csv";
const REPORT_TEXT: &str = "report.txt";
const OUT_DIR_VAR: &str = "FPS_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "fps",
    version,
    about = "Budgeted sparse fine-tuning driven by one forward pass"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one forward pass over the train split and write activation statistics.
    CollectStats(StageArgs),
    /// Build the parameter mask for the configured strategy and budget.
    Select(StageArgs),
    /// Fine-tune the masked parameters; writes a checkpoint and training curves.
    Finetune(StageArgs),
    /// Run every configured strategy end to end and write the comparison report.
    Compare(StageArgs),
    /// Render the comparison report as readable text.
    Report(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the model, dataset, and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $FPS_OUT_DIR, then the working directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl StageArgs {
    fn load_config(&self) -> Result<RunConfig> {
        let mut cfg = config::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = match &self.out {
            Some(d) => d.clone(),
            None => match std::env::var_os(OUT_DIR_VAR) {
                Some(v) => PathBuf::from(v),
                None => PathBuf::from("."),
            },
        };
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn build_world(cfg: &RunConfig) -> Result<(Model, SplitDataset)> {
    let model = Model::build(&cfg.model.arch, cfg.model.seed)?;
    let split = ingest(&cfg.dataset, Some(&model))?;
    Ok((model, split))
}

fn configured_strategy(cfg: &RunConfig) -> Result<Strategy> {
    cfg.selection
        .strategy
        .as_deref()
        .ok_or_else(|| {
            Error::contract("this stage needs `selection.strategy` in the configuration")
        })?
        .parse()
}

fn selection_settings(cfg: &RunConfig) -> Result<SelectionSettings> {
    Ok(SelectionSettings {
        budget: cfg.budget.to_spec()?,
        batch_size: cfg.selection.batch_size,
        gps_max_batches: cfg.selection.gps_max_batches,
        baseline_seed: cfg.model.seed,
    })
}

fn collect_stats(args: &StageArgs) -> Result<()> {
    let cfg = args.load_config()?;
    let dir = args.out_dir()?;
    let (model, split) = build_world(&cfg)?;
    let stats = ActivationStats::collect(&model, split.train.features(), cfg.selection.batch_size)?;
    let path = dir.join(STATS_FILE);
    stats.save(&path)?;
    println!("stats={}", path.display());
    println!("rows={}", stats.rows_seen(0));
    println!("tracked_bytes={}", stats.tracked_bytes());
    Ok(())
}

fn select_stage(args: &StageArgs) -> Result<()> {
    let cfg = args.load_config()?;
    let dir = args.out_dir()?;
    let strategy = configured_strategy(&cfg)?;
    let (model, split) = build_world(&cfg)?;
    let mask_path = dir.join(MASK_FILE);
    let stats_path = dir.join(STATS_FILE);

    if let (Strategy::Fps { variant, scheme }, true) = (strategy, stats_path.is_file()) {
        let (norm, weighted) = fps_mode(variant)?;
        let stats = ActivationStats::load(&stats_path)?;
        let scores = score_fps(&model, &stats, norm, weighted)?;
        let mask = select(&scores, scheme, &cfg.budget.to_spec()?)?;
        mask.save(&mask_path)?;
        println!("mask={}", mask_path.display());
        println!("strategy={strategy}");
        println!("k={}", mask.k());
        println!("stats=cached");
    } else {
        let settings = selection_settings(&cfg)?;
        let outcome = run_selection(&model, strategy, &split.train, &settings)?;
        outcome.mask.save(&mask_path)?;
        println!("mask={}", mask_path.display());
        println!("strategy={strategy}");
        println!("k={}", outcome.mask.k());
        println!("stats=collected");
        println!("peak_bytes={}", outcome.peak_bytes);
        println!("tape_bytes={}", outcome.tape_bytes);
        println!("select_ms={}", outcome.wall_ms);
    }
    Ok(())
}

fn finetune_stage(args: &StageArgs) -> Result<()> {
    let cfg = args.load_config()?;
    let dir = args.out_dir()?;
    let train_cfg = cfg
        .train
        .clone()
        .ok_or_else(|| Error::contract("the finetune stage needs a [train] section"))?;
    let (mut model, split) = build_world(&cfg)?;
    let mask_path = dir.join(MASK_FILE);
    let mask = if mask_path.is_file() {
        let mask = SelectionMask::load(&mask_path)?;
        mask.validate_for(&model)?;
        println!("mask=cached");
        mask
    } else {
        let strategy = configured_strategy(&cfg)?;
        let settings = selection_settings(&cfg)?;
        let outcome = run_selection(&model, strategy, &split.train, &settings)?;
        outcome.mask.save(&mask_path)?;
        println!("mask=built");
        outcome.mask
    };
    let result = finetune(&mut model, &mask, &split.train, &split.val, &train_cfg)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    model.save_checkpoint(&ckpt_path)?;
    let curves_path = dir.join(CURVES_FILE);
    save_curves(&curves_path, &result.curves)?;
    println!("checkpoint={}", ckpt_path.display());
    println!("curves={}", curves_path.display());
    println!("k={}", mask.k());
    println!("realized_l0={}", result.realized_l0);
    println!("val_accuracy={}", result.val_accuracy);
    println!("final_train_loss={}", result.final_train_loss);
    Ok(())
}

fn compare_stage(args: &StageArgs) -> Result<()> {
    let cfg = args.load_config()?;
    let dir = args.out_dir()?;
    let compare = cfg
        .compare
        .as_ref()
        .ok_or_else(|| Error::contract("the compare stage needs a [compare] section"))?;
    let train = cfg
        .train
        .clone()
        .ok_or_else(|| Error::contract("the compare stage needs a [train] section"))?;
    let strategies = compare
        .strategies
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<Strategy>>>()?;
    let run = ComparisonConfig {
        arch: cfg.model.arch.clone(),
        model_seed: cfg.model.seed,
        dataset: cfg.dataset.clone(),
        budget: cfg.budget.to_spec()?,
        strategies,
        train,
        gps_max_batches: cfg.selection.gps_max_batches,
        parallel: compare.parallel,
        curves_dir: compare.curves.then(|| dir.clone()),
    };
    let report = run_comparison(&run)?;
    let csv_path = dir.join(REPORT_CSV);
    report.save_csv(&csv_path)?;
    println!("report={}", csv_path.display());
    print!("{}", report.to_text_string());
    Ok(())
}

fn report_stage(args: &StageArgs) -> Result<()> {
    args.load_config()?;
    let dir = args.out_dir()?;
    let report = RunReport::load_csv(&dir.join(REPORT_CSV))?;
    let text = report.to_text_string();
    std::fs::write(dir.join(REPORT_TEXT), &text)?;
    print!("{text}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CollectStats(a) => collect_stats(&a),
        Command::Select(a) => select_stage(&a),
        Command::Finetune(a) => finetune_stage(&a),
        Command::Compare(a) => compare_stage(&a),
        Command::Report(a) => report_stage(&a),
    }
}

/// Stable mapping from error category to process exit code. Codes start at
/// 10 so they can never collide with clap's usage-error code.
fn exit_code(category: &str) -> u8 {
    match category {
        "dimension" => 10,
        "nonfinite" => 11,
        "state" => 12,
        "contract" => 13,
        "data" => 14,
        "parse" => 15,
        "io" => 16,
        "diverged" => 17,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: category={} {e}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_error_category_has_a_distinct_nonzero_exit_code() {
        let cats = [
            "dimension",
            "nonfinite",
            "state",
            "contract",
            "data",
            "parse",
            "io",
            "diverged",
        ];
        let codes: Vec<u8> = cats.iter().map(|c| exit_code(c)).collect();
        for (cat, code) in cats.iter().zip(&codes) {
            assert!(*code >= 10, "{cat} must map above clap's reserved codes");
        }
        let mut unique = codes.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), codes.len(), "codes must not collide: {codes:?}");
        assert_eq!(exit_code("anything-else"), 1);
    }
}
