//! Command-line entry point: synthetic data, corpus building, the two-stage
//! training pipeline, prediction, evaluation, ensembling, and the gradient
//! check.
//!
//! Data directory layout: `features/<video_id>.{f32,json}`,
//! `queries/<query_id>.{f32,json}`, and one or more `annotations*.jsonl`
//! files. Exit codes: 0 success, 1 validation/config/usage, 2 I/O.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use groundnlq::config::RunConfig;
use groundnlq::data::{
    build_pretrain_corpus, generate_synthetic_split, load_annotations, load_feature_file,
    load_narrations, load_query_file, scan_feature_dir, write_annotations, write_feature_file,
    write_query_file, Split,
};
use groundnlq::decode::ensemble_predictions;
use groundnlq::error::{Error, Result};
use groundnlq::eval::{
    evaluate_standard, load_predictions, write_predictions, GroundTruthMap, PredictionMap,
};
use groundnlq::model::GroundingModel;
use groundnlq::training::{
    grad_check, predict_split, run_stage, Checkpoint, GroundingDataset,
    Precision, RunOptions, Stage,
};

#[derive(Parser)]
#[command(
    name = "groundnlq",
    about = "Natural-language video moment grounding: train, predict, evaluate",
    version
)]
struct Cli {
    /// JSON config file; defaults apply for every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-key override, e.g. --set model.d_model=64 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic planted-signal dataset split.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// Split label for the generated samples.
        #[arg(long, default_value = "train")]
        split: String,
        /// Id prefix for generated videos/queries (defaults per split).
        #[arg(long)]
        id_prefix: Option<String>,
    },
    /// Build a jittered pretraining corpus from narrations.
    BuildCorpus {
        /// Narration JSONL (video_id, timestamp_sec, optional bounds).
        #[arg(long)]
        narrations: PathBuf,
        /// Directory with feature sidecars for duration metadata.
        #[arg(long)]
        features_dir: PathBuf,
        /// Output annotations JSONL.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on the pretrain split.
    Pretrain {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fine-tune on the train split, heads re-initialized.
    Finetune {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Checkpoint directory to start from (overrides the config).
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Write ranked predictions for one split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the Recall table for a prediction file.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        /// Ground-truth annotations JSONL.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Merge prediction files with score weighting and joint NMS.
    Ensemble {
        /// Prediction files to merge.
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// One weight per input (default 1.0 each).
        #[arg(long, num_args = 0..)]
        weights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check on a tiny model.
    Gradcheck {
        #[arg(long, default_value = "f64")]
        precision: String,
        /// Defaults: 1e-6 for f64, 1e-3 for f32.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "pretrain" => Ok(Split::Pretrain),
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Validation(format!(
            "unknown split '{other}' (expected pretrain|train|val|test)"
        ))),
    }
}

fn split_prefix(split: Split) -> &'static str {
    match split {
        Split::Pretrain => "pt_",
        Split::Train => "tr_",
        Split::Val => "va_",
        Split::Test => "te_",
    }
}

/// Load `features/`, `queries/`, and every `annotations*.jsonl` under `dir`.
fn load_dataset(dir: &Path) -> Result<GroundingDataset> {
    let features_dir = dir.join("features");
    let queries_dir = dir.join("queries");
    let index = scan_feature_dir(&features_dir)?;
    let mut ds = GroundingDataset::new();
    for id in index.keys() {
        let f = load_feature_file(&features_dir, id)?;
        ds.features.insert(id.clone(), f);
    }
    let query_index = scan_feature_dir(&queries_dir)?;
    for id in query_index.keys() {
        let q = load_query_file(&queries_dir, id)?;
        ds.queries.insert(id.clone(), q);
    }
    let mut ann_files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("annotations") && n.ends_with(".jsonl"))
                .unwrap_or(false)
        })
        .collect();
    ann_files.sort();
    if ann_files.is_empty() {
        return Err(Error::Validation(format!(
            "no annotations*.jsonl under {}",
            dir.display()
        )));
    }
    for path in ann_files {
        ds.samples.extend(load_annotations(&path, Some(&index))?);
    }
    ds.validate()?;
    Ok(ds)
}

fn cmd_synth(
    cfg: &RunConfig,
    out_dir: &Path,
    split: Split,
    split_name: &str,
    id_prefix: Option<String>,
) -> Result<()> {
    let prefix = id_prefix.unwrap_or_else(|| split_prefix(split).to_string());
    let ds = generate_synthetic_split(&cfg.synthetic, split, &prefix)?;
    let features_dir = out_dir.join("features");
    let queries_dir = out_dir.join("queries");
    std::fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;
    std::fs::create_dir_all(&queries_dir).map_err(|e| Error::io(&queries_dir, e))?;
    for f in &ds.features {
        write_feature_file(&features_dir, f)?;
    }
    for q in &ds.queries {
        write_query_file(&queries_dir, q)?;
    }
    let ann_path = out_dir.join(format!("annotations.{split_name}.jsonl"));
    write_annotations(&ann_path, &ds.samples)?;
    cfg.write_resolved(out_dir)?;
    println!(
        "wrote {} videos, {} queries, {} samples to {}",
        ds.features.len(),
        ds.queries.len(),
        ds.samples.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_build_corpus(
    cfg: &RunConfig,
    narrations_path: &Path,
    features_dir: &Path,
    out: &Path,
) -> Result<()> {
    let narrations = load_narrations(narrations_path)?;
    let index = scan_feature_dir(features_dir)?;
    let built = build_pretrain_corpus(&narrations, &cfg.jitter, &index)?;
    write_annotations(out, &built.samples)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            cfg.write_resolved(parent)?;
        }
    }
    println!(
        "built {} pretraining samples ({} narrations skipped: no feature metadata)",
        built.samples.len(),
        built.skipped
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: Stage, data_dir: &Path, out_dir: &Path) -> Result<()> {
    let dataset = load_dataset(data_dir)?;
    let mut tcfg = match stage {
        Stage::Pretrain => cfg.pretrain.clone(),
        Stage::Finetune => cfg.finetune.clone(),
    };
    tcfg.stage = stage;
    let ckpt = run_stage(
        &tcfg,
        &cfg.model,
        &cfg.assignment,
        &cfg.decode,
        &dataset,
        &RunOptions {
            out_dir: Some(out_dir),
            verbose: true,
            ..RunOptions::default()
        },
    )?;
    cfg.write_resolved(out_dir)?;
    let best = &ckpt.manifest.metrics[ckpt.manifest.epoch];
    println!(
        "best epoch {}: R1@0.3 {:.4} R1@0.5 {:.4} R5@0.3 {:.4} R5@0.5 {:.4}",
        ckpt.manifest.epoch, best.r1_03, best.r1_05, best.r5_03, best.r5_05
    );
    println!("checkpoint written to {}", out_dir.display());
    Ok(())
}

fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut model = GroundingModel::<f32>::new(ckpt.manifest.model.clone(), ckpt.manifest.seed)?;
    ckpt.load_params_into(&mut model)?;
    let dataset = load_dataset(data_dir)?;
    let preds = predict_split(&model, &dataset, split, &cfg.decode)?;
    write_predictions(out, &preds)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            cfg.write_resolved(parent)?;
        }
    }
    println!("wrote predictions for {} queries to {}", preds.len(), out.display());
    Ok(())
}

fn cmd_eval(preds_path: &Path, gt_path: &Path) -> Result<()> {
    let preds = load_predictions(preds_path)?;
    let gts: GroundTruthMap = load_annotations(gt_path, None)?
        .into_iter()
        .map(|s| (s.query_id, s.moment))
        .collect();
    let result = evaluate_standard(&preds, &gts)?;
    println!("{}", result.table());
    Ok(())
}

fn cmd_ensemble(cfg: &RunConfig, inputs: &[PathBuf], weights: &[f64], out: &Path) -> Result<()> {
    if !weights.is_empty() && weights.len() != inputs.len() {
        return Err(Error::Validation(format!(
            "{} weights for {} inputs",
            weights.len(),
            inputs.len()
        )));
    }
    let maps: Vec<PredictionMap> = inputs
        .iter()
        .map(|p| load_predictions(p))
        .collect::<Result<_>>()?;
    let mut all_queries: Vec<String> = maps.iter().flat_map(|m| m.keys().cloned()).collect();
    all_queries.sort();
    all_queries.dedup();

    let mut merged = PredictionMap::new();
    for q in all_queries {
        let lists: Vec<(Vec<groundnlq::decode::Candidate>, f64)> = maps
            .iter()
            .enumerate()
            .map(|(i, m)| {
                (
                    m.get(&q).cloned().unwrap_or_default(),
                    weights.get(i).copied().unwrap_or(1.0),
                )
            })
            .collect();
        merged.insert(q, ensemble_predictions(&lists, &cfg.decode)?);
    }
    write_predictions(out, &merged)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            cfg.write_resolved(parent)?;
        }
    }
    println!("ensembled {} models into {}", inputs.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(precision: &str, tolerance: Option<f64>, seed: u64) -> Result<()> {
    let precision = match precision {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        other => {
            return Err(Error::Validation(format!(
                "unknown precision '{other}' (expected f32|f64)"
            )))
        }
    };
    let tolerance = tolerance.unwrap_or(match precision {
        Precision::F64 => 1e-6,
        Precision::F32 => 1e-3,
    });
    // tiny model: T=16 inputs, d_model 32, full depth
    let mcfg = groundnlq::encoder::ModelConfig {
        d_model: 32,
        n_heads: 4,
        window: 5,
        d_video_in: 12,
        d_text_in: 8,
        ..groundnlq::encoder::ModelConfig::default()
    };
    let report = grad_check(&mcfg, seed, tolerance, precision)?;
    println!(
        "gradcheck {:?}: max rel err {:.3e} (tolerance {:.1e}) at {}",
        report.precision, report.max_rel_err, report.tolerance, report.worst_param
    );
    println!(
        "probes: {} checked, {} near-zero (absolute), {} skipped at kinks",
        report.n_probes, report.n_abs_checked, report.n_skipped_nonsmooth
    );
    if report.passed {
        println!("PASS");
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "gradient check failed: max rel err {:.3e} > {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn configure_rayon() {
    if let Ok(v) = std::env::var("GROUNDNLQ_NUM_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Cmd::Synth {
            out_dir,
            split,
            id_prefix,
        } => cmd_synth(&cfg, &out_dir, parse_split(&split)?, &split, id_prefix),
        Cmd::BuildCorpus {
            narrations,
            features_dir,
            out,
        } => cmd_build_corpus(&cfg, &narrations, &features_dir, &out),
        Cmd::Pretrain { data_dir, out_dir } => {
            cmd_train(&cfg, Stage::Pretrain, &data_dir, &out_dir)
        }
        Cmd::Finetune {
            data_dir,
            out_dir,
            init_checkpoint,
        } => {
            let mut cfg = cfg;
            if let Some(ckpt) = init_checkpoint {
                cfg.finetune.init_checkpoint = Some(ckpt);
            }
            cmd_train(&cfg, Stage::Finetune, &data_dir, &out_dir)
        }
        Cmd::Predict {
            checkpoint,
            data_dir,
            split,
            out,
        } => cmd_predict(&cfg, &checkpoint, &data_dir, parse_split(&split)?, &out),
        Cmd::Eval { preds, gt } => cmd_eval(&preds, &gt),
        Cmd::Ensemble {
            inputs,
            weights,
            out,
        } => cmd_ensemble(&cfg, &inputs, &weights, &out),
        Cmd::Gradcheck {
            precision,
            tolerance,
            seed,
        } => cmd_gradcheck(&precision, tolerance, seed),
    }
}

fn main() {
    configure_rayon();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print and exit 0; real usage errors exit 1
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
