use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cqa_core::boc_net::{load_checkpoint, save_checkpoint};
use cqa_core::calibration::{CalibrationCurve, ThresholdResult};
use cqa_service::bundle::{load_dataset, CaseBundle};
use cqa_service::config::{AppConfig, LabelSource};
use cqa_service::events::EventLog;
use cqa_service::pipeline::{self, PredictionRow};
use cqa_service::server::{self, AppState, ReviewData};
use cqa_service::{Result, ServiceError};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cqa", version, about = "Contour quality assessment with calibrated uncertainty")]
struct Cli {
    /// JSON settings file (thresholds, T, dropout rate, paths, ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct LabelArgs {
    /// CSV with `slice_id,label` columns.
    #[arg(long, conflicts_with = "data")]
    labels: Option<PathBuf>,
    /// Dataset whose bundles carry the reference labels.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    label_source: Option<LabelSource>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a synthetic dataset of case bundles.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// DSC, SDSC and HD95 of every auto contour against its reference.
    Metrics {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Surrogate quality classes from the geometric metrics.
    SurrogateLabel {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network from scratch.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        label_source: Option<LabelSource>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Loss trace JSON.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint with per-group learning rates.
    FineTune {
        #[arg(long)]
        pretrained: PathBuf,
        /// `group=rate` pairs, e.g. `conv=1e-5,dense=1e-4,head=1e-3`. Omitted groups stay frozen.
        #[arg(long)]
        lr_groups: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        label_source: Option<LabelSource>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// MC-dropout predictions.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Forward passes per slice.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-pass `slice_id,pass,f1,f2` CSV.
        #[arg(long)]
        probs_out: PathBuf,
        /// Per-slice prediction CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose the variance threshold that reaches a target accuracy.
    Calibrate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        labels: LabelArgs,
        #[arg(long)]
        target: Option<f64>,
        /// ThresholdResult JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full calibration curve JSON.
        #[arg(long)]
        curve_out: Option<PathBuf>,
    },
    /// Selective-prediction report at a calibrated threshold.
    Evaluate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<PathBuf>,
        #[command(flatten)]
        labels: LabelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the review API (listen address from CQA_LISTEN).
    Serve {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<PathBuf>,
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Session log; omitted means an in-memory session.
        #[arg(long)]
        event_log: Option<PathBuf>,
    },
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| ServiceError::Usage(format!("no {what} path given (flag or config paths.{what})")))
}

/// Reference labels, plus the bundles they came from when read from a dataset.
type Labels = (BTreeMap<String, u8>, Option<Vec<CaseBundle>>);

fn labels_for(cfg: &AppConfig, args: LabelArgs) -> Result<Labels> {
    let source = args.label_source.unwrap_or(cfg.label_source);
    if let Some(p) = args.labels {
        return Ok((pipeline::read_label_map(&p)?, None));
    }
    let data = pick(args.data, &cfg.paths.data, "data")?;
    let bundles = load_dataset(&data)?;
    Ok((pipeline::reference_labels(&bundles, source), Some(bundles)))
}

#[derive(Serialize)]
struct TrainTrace {
    loss: Vec<f64>,
    val_loss: Vec<f64>,
    best_epoch: Option<usize>,
    warnings: Vec<String>,
}

impl From<&cqa_core::boc_net::TrainOutcome> for TrainTrace {
    fn from(o: &cqa_core::boc_net::TrainOutcome) -> Self {
        Self {
            loss: o.loss_trace.clone(),
            val_loss: o.val_loss_trace.clone(),
            best_epoch: o.best_epoch,
            warnings: o.warnings.clone(),
        }
    }
}

fn apply_train_flags(cfg: &mut AppConfig, label_source: Option<LabelSource>, epochs: Option<usize>, seed: Option<u64>) {
    if let Some(s) = label_source {
        cfg.label_source = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
}

fn finish_training(out: &Path, trace_out: Option<PathBuf>, ckpt: &cqa_core::boc_net::Checkpoint, outcome: &cqa_core::boc_net::TrainOutcome) -> Result<()> {
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    save_checkpoint(out, ckpt)?;
    if let Some(t) = trace_out {
        pipeline::write_json(&t, &TrainTrace::from(outcome))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    match cli.verb {
        Verb::Synth { out, n, seed } => {
            let summary = pipeline::synth_to_dir(&cfg, &out, n, seed)?;
            if !summary.balanced {
                log::warn!("class histogram {:?} is not balanced", summary.histogram);
            }
        }
        Verb::Metrics { data, out } => {
            let bundles = load_dataset(&pick(data, &cfg.paths.data, "data")?)?;
            pipeline::write_csv(&out, &pipeline::metrics(&cfg, &bundles)?)?;
        }
        Verb::SurrogateLabel { data, out } => {
            let bundles = load_dataset(&pick(data, &cfg.paths.data, "data")?)?;
            pipeline::write_csv(&out, &pipeline::surrogate_labels(&cfg, &bundles)?)?;
        }
        Verb::Train { data, val, out, label_source, epochs, seed, trace_out } => {
            apply_train_flags(&mut cfg, label_source, epochs, seed);
            cfg.validate()?;
            let bundles = load_dataset(&pick(data, &cfg.paths.data, "data")?)?;
            let val = val.map(|v| load_dataset(&v)).transpose()?;
            let out = pick(out, &cfg.paths.model, "model")?;
            let (ckpt, outcome) = pipeline::train_model(&cfg, &bundles, val.as_deref())?;
            finish_training(&out, trace_out, &ckpt, &outcome)?;
        }
        Verb::FineTune { pretrained, lr_groups, data, val, out, label_source, epochs, seed, trace_out } => {
            apply_train_flags(&mut cfg, label_source, epochs, seed);
            cfg.validate()?;
            let groups = pipeline::parse_lr_groups(&lr_groups)?;
            let base = load_checkpoint(&pretrained)?;
            let bundles = load_dataset(&pick(data, &cfg.paths.data, "data")?)?;
            let val = val.map(|v| load_dataset(&v)).transpose()?;
            let (ckpt, outcome) = pipeline::fine_tune_model(&cfg, &base, &groups, &bundles, val.as_deref())?;
            finish_training(&out, trace_out, &ckpt, &outcome)?;
        }
        Verb::Predict { model, data, t, seed, probs_out, out } => {
            if let Some(t) = t {
                cfg.mc_passes = t;
            }
            cfg.validate()?;
            let ckpt = load_checkpoint(&pick(model, &cfg.paths.model, "model")?)?;
            let bundles = load_dataset(&pick(data, &cfg.paths.data, "data")?)?;
            let (probs, preds) = pipeline::predict(&cfg, &ckpt, &bundles, seed)?;
            pipeline::write_csv(&probs_out, &probs)?;
            pipeline::write_csv(&pick(out, &cfg.paths.predictions, "predictions")?, &preds)?;
        }
        Verb::Calibrate { predictions, labels, target, out, curve_out } => {
            let target = target.unwrap_or(cfg.target_accuracy);
            let preds: Vec<PredictionRow> = pipeline::read_csv(&pick(predictions, &cfg.paths.predictions, "predictions")?)?;
            let (labels, _) = labels_for(&cfg, labels)?;
            let records = pipeline::cal_records(&preds, &labels)?;
            let (threshold, curve) = pipeline::calibrate(&records, target)?;
            pipeline::write_json(&pick(out, &cfg.paths.threshold, "threshold")?, &threshold)?;
            if let Some(c) = curve_out.or(cfg.paths.curve.clone()) {
                pipeline::write_json(&c, &curve)?;
            }
        }
        Verb::Evaluate { predictions, threshold, labels, out } => {
            let preds: Vec<PredictionRow> = pipeline::read_csv(&pick(predictions, &cfg.paths.predictions, "predictions")?)?;
            let threshold: ThresholdResult = pipeline::read_json(&pick(threshold, &cfg.paths.threshold, "threshold")?)?;
            let (labels, bundles) = labels_for(&cfg, labels)?;
            let records = pipeline::cal_records(&preds, &labels)?;
            let panels = bundles.as_deref().map(|b| pipeline::panels_for(b, &preds));
            let panels = panels.as_ref().filter(|(p, _)| !p.is_empty()).map(|(p, v)| (p.as_slice(), v.as_slice()));
            let report = pipeline::evaluate(&records, &threshold, panels)?;
            pipeline::write_json(&out, &report)?;
        }
        Verb::Serve { data, predictions, threshold, curve, event_log } => {
            let cases = load_dataset(&pick(data, &cfg.paths.data, "data")?)?;
            let preds: Vec<PredictionRow> = pipeline::read_csv(&pick(predictions, &cfg.paths.predictions, "predictions")?)?;
            let threshold: ThresholdResult = pipeline::read_json(&pick(threshold, &cfg.paths.threshold, "threshold")?)?;
            let curve: CalibrationCurve = pipeline::read_json(&pick(curve, &cfg.paths.curve, "curve")?)?;
            let log = match event_log.or(cfg.paths.event_log.clone()) {
                Some(p) => EventLog::open(&p)?,
                None => EventLog::in_memory(),
            };
            let data = ReviewData {
                cases,
                predictions: server::prediction_map(&preds),
                curve,
            };
            let state = AppState::new(data, threshold, log)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| ServiceError::io("<runtime>", e))?;
            runtime.block_on(server::serve(state, &server::listen_addr()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
