//! Command-line orchestration: dataset generation, staged training,
//! evaluation, gradient checking, ablations, and attention inspection.
//!
//! Every command takes `--config` (JSON, defaulting to the desk-scale
//! preset), with `--out`, `--seed`, and `--checkpoint` overriding the file.
//! The effective merged configuration is written into the output directory,
//! so each run is reproducible from its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use numcore::{load_checkpoint, save_checkpoint};

use crate::config::{RunConfig, Seeds};
use crate::error::{PsrnError, Result};
use crate::eval::{
    ablation_harness, ablation_table, attention_csv, attention_rows, evaluate, RunSeeds,
};
use crate::gradchecks::{gradcheck_suite, GRADCHECK_TOLERANCE};
use crate::model::{prepare_dataset, PreparedDataset, PsrnModel};
use crate::model::validate_checkpoint;
use crate::posedata::synth::generate;
use crate::posedata::{load_dataset, Split};
use crate::training::{run_stage, stage_rng, trace_to_csv, StagePlan, TraceRow};

#[derive(Parser, Debug)]
#[command(name = "psrn", version, about = "Pose-based two-stream relational network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Configuration file (JSON). Defaults to the desk-scale preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; fans out to the named data/init/sampling/eval seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to load; overrides the per-command default.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest; overrides the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic pose + feature-map dataset.
    Synth(CommonArgs),
    /// Run the three-stage training (or a single stage).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// 1, 2, 3, or all. Stages 2 and 3 need the prior stage's checkpoint.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference verification of every differentiable module.
    Gradcheck(CommonArgs),
    /// Train and evaluate the attention x direction grid.
    Ablate(CommonArgs),
    /// Dump per-step attention weights for a split.
    Inspect {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn effective_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seeds = Seeds::from_master(seed);
    }
    if let Some(data) = &common.data {
        cfg.manifest = Some(data.clone());
    }
    Ok(cfg)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.require_out_dir()?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| PsrnError::io(&out, e))?;
    Ok(out)
}

fn write_effective_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.save(&out.join("config.json"))
}

fn load_prepared(cfg: &RunConfig) -> Result<(PsrnModel, PreparedDataset)> {
    let manifest = cfg.require_manifest()?;
    let dataset = load_dataset(manifest)?;
    let prepared = prepare_dataset(&dataset, cfg.model.persons, &cfg.model.object_stream)?;
    let model_cfg = cfg.model.resolved_with(&prepared);
    let model = PsrnModel::new(model_cfg)?;
    Ok((model, prepared))
}

fn stage_checkpoint(out: &Path, stage: u32) -> PathBuf {
    out.join(format!("stage{stage}.ckpt"))
}

pub fn cmd_synth(common: &CommonArgs) -> Result<i32> {
    let mut cfg = effective_config(common)?;
    let out = ensure_out_dir(&cfg)?;
    let summary = generate(&cfg.synth, cfg.seeds.data, &out)?;
    if cfg.manifest.is_none() {
        cfg.manifest = Some(summary.manifest_path.clone());
    }
    write_effective_config(&cfg, &out)?;
    println!(
        "generated {} videos ({} train / {} test) across {} classes",
        summary.videos, summary.train, summary.test, summary.classes
    );
    println!("manifest: {}", summary.manifest_path.display());
    Ok(0)
}

pub fn cmd_train(common: &CommonArgs, stage_sel: &str) -> Result<i32> {
    let cfg = effective_config(common)?;
    let out = ensure_out_dir(&cfg)?;
    write_effective_config(&cfg, &out)?;
    let (model, prepared) = load_prepared(&cfg)?;
    let plan = StagePlan::standard(&cfg.training)?;

    let stages: Vec<u32> = match stage_sel {
        "all" => vec![1, 2, 3],
        "1" => vec![1],
        "2" => vec![2],
        "3" => vec![3],
        other => {
            return Err(PsrnError::Config(format!(
                "unknown stage {other:?}; expected 1, 2, 3, or all"
            )))
        }
    };

    let first = stages[0];
    let mut params = if first == 1 {
        model.init_params(cfg.seeds.init)?
    } else {
        let required = first - 1;
        let path = common
            .checkpoint
            .clone()
            .unwrap_or_else(|| stage_checkpoint(&out, required));
        if !path.exists() {
            return Err(PsrnError::StageDependency {
                stage: first,
                required,
                path,
            });
        }
        let loaded = load_checkpoint(&path)?;
        validate_checkpoint(&model, &loaded)?;
        loaded
    };

    let mut trace: Vec<TraceRow> = Vec::new();
    for number in stages {
        let stage = plan
            .stage(number)
            .ok_or_else(|| PsrnError::Config(format!("stage {number} missing from plan")))?;
        let mut rng = stage_rng(cfg.seeds.sampling, number);
        let rows = run_stage(
            &model,
            &mut params,
            stage,
            &prepared.train,
            cfg.training.batch_size,
            cfg.training.weight_decay,
            &mut rng,
        )?;
        save_checkpoint(&stage_checkpoint(&out, number), &params)?;
        let last = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
        println!(
            "stage {number}: {} iterations, final total loss {last:.6}",
            rows.len()
        );
        trace.extend(rows);
    }
    let trace_path = out.join("trace.csv");
    fs::write(&trace_path, trace_to_csv(&trace)).map_err(|e| PsrnError::io(&trace_path, e))?;
    println!("trace: {}", trace_path.display());
    Ok(0)
}

fn load_validated_checkpoint(
    common: &CommonArgs,
    out: &Path,
    model: &PsrnModel,
) -> Result<numcore::Params64> {
    let path = common
        .checkpoint
        .clone()
        .unwrap_or_else(|| stage_checkpoint(out, 3));
    let params = load_checkpoint(&path)?;
    validate_checkpoint(model, &params)?;
    Ok(params)
}

pub fn cmd_eval(common: &CommonArgs, split: &str) -> Result<i32> {
    let cfg = effective_config(common)?;
    let out = ensure_out_dir(&cfg)?;
    let (model, prepared) = load_prepared(&cfg)?;
    let params = load_validated_checkpoint(common, &out, &model)?;
    let split: Split = split.parse()?;
    let report = evaluate(
        &model,
        &params,
        prepared.split(split),
        cfg.seeds.eval,
        cfg.eval_repeats,
    )?;
    let name = match split {
        Split::Train => "eval_train.json",
        Split::Test => "eval_test.json",
    };
    let path = out.join(name);
    let text = serde_json::to_string_pretty(&report).map_err(|e| PsrnError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| PsrnError::io(&path, e))?;
    println!(
        "accuracy: position {:.4}, velocity {:.4}, pose fusion {:.4}, two-stream {:.4} ({} videos)",
        report.accuracy.position,
        report.accuracy.velocity,
        report.accuracy.pose_fusion,
        report.accuracy.relation,
        report.total
    );
    println!("report: {}", path.display());
    Ok(0)
}

pub fn cmd_gradcheck(common: &CommonArgs) -> Result<i32> {
    let cfg = effective_config(common)?;
    let report = gradcheck_suite(cfg.seeds.init)?;
    for check in &report.checks {
        let verdict = if check.max_rel_error < GRADCHECK_TOLERANCE {
            "PASS"
        } else {
            "FAIL"
        };
        println!(
            "{verdict} {module:<22} max rel err {err:.3e} ({coords} coords)",
            module = check.module,
            err = check.max_rel_error,
            coords = check.coords_checked
        );
    }
    println!(
        "verdict: {} (max rel err {:.3e}, tolerance {GRADCHECK_TOLERANCE:.0e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.max_rel_error
    );
    if let Ok(out) = cfg.require_out_dir() {
        fs::create_dir_all(out).map_err(|e| PsrnError::io(out, e))?;
        let path = out.join("gradcheck.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| PsrnError::json(&path, e))?;
        fs::write(&path, text).map_err(|e| PsrnError::io(&path, e))?;
    }
    Ok(if report.pass { 0 } else { 1 })
}

pub fn cmd_ablate(common: &CommonArgs) -> Result<i32> {
    let cfg = effective_config(common)?;
    let out = ensure_out_dir(&cfg)?;
    write_effective_config(&cfg, &out)?;
    let (model, prepared) = load_prepared(&cfg)?;
    let grid = [(false, true), (true, false), (true, true), (false, false)];
    let seeds = [RunSeeds {
        init: cfg.seeds.init,
        sampling: cfg.seeds.sampling,
        eval: cfg.seeds.eval,
    }];
    let rows = ablation_harness(
        &model.cfg,
        &cfg.training,
        &prepared.train,
        &prepared.test,
        &grid,
        &seeds,
        cfg.eval_repeats,
    )?;
    print!("{}", ablation_table(&rows));
    let path = out.join("ablation.json");
    let text = serde_json::to_string_pretty(&rows).map_err(|e| PsrnError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| PsrnError::io(&path, e))?;
    println!("table: {}", path.display());
    Ok(0)
}

pub fn cmd_inspect(common: &CommonArgs, split: &str) -> Result<i32> {
    let cfg = effective_config(common)?;
    let out = ensure_out_dir(&cfg)?;
    let (model, prepared) = load_prepared(&cfg)?;
    let params = load_validated_checkpoint(common, &out, &model)?;
    let split: Split = split.parse()?;
    let rows = attention_rows(&model, &params, prepared.split(split), cfg.seeds.eval)?;
    let path = out.join("attention.csv");
    fs::write(&path, attention_csv(&rows)).map_err(|e| PsrnError::io(&path, e))?;
    println!("attention dump: {} ({} rows)", path.display(), rows.len());
    Ok(0)
}

/// Dispatches a parsed command line; the returned code is the process exit
/// status (nonzero exactly when an error fired or gradcheck failed).
pub fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(common) => cmd_synth(common),
        Command::Train { common, stage } => cmd_train(common, stage),
        Command::Eval { common, split } => cmd_eval(common, split),
        Command::Gradcheck(common) => cmd_gradcheck(common),
        Command::Ablate(common) => cmd_ablate(common),
        Command::Inspect { common, split } => cmd_inspect(common, split),
    }
}
