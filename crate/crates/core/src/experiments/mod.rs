//! Config-driven experiment commands behind the `djscc` binary.

mod compare;
mod config;
mod eval;

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::codec::{build_model, load_checkpoint, save_checkpoint};
use crate::data::{load_split, save_png, DatasetName, Split};
use crate::training::{fit, TrainLog};
use crate::{Error, Result};

pub use compare::{compare, CompareInput, CompareOutput};
pub use config::ExperimentConfig;
pub use eval::{evaluate_model, metric_csv, EvalRecord, Metric, MetricTable};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_DIR: &str = "eval";
pub const EVAL_MANIFEST_FILE: &str = "eval_manifest.json";

/// Process exit status for an error: 2 configuration, 3 missing asset or
/// data, 4 numerical failure, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnsupportedVariant { .. } | Error::Checkpoint(_) => 2,
        Error::AssetNotFound { .. } | Error::MissingData(_) => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Numerical(_) | Error::DegenerateInput(_) => 4,
        _ => 1,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn json_text(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

fn conventions() -> serde_json::Value {
    json!({
        "x": "left camera (transmitted)",
        "x_side": "right camera (receiver side information)",
        "kitti_crop": "centre crop 370x740 with floored half-margins",
        "resampling": "area (box) averaging",
    })
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub manifest: PathBuf,
    pub log: TrainLog,
}

/// Trains the configured model and writes checkpoint, log and run manifest
/// under `<output_dir>/<run_id>`. An existing run directory is only replaced
/// with `force`.
pub fn cmd_train(config: &ExperimentConfig, force: bool) -> Result<TrainArtifacts> {
    config.validate()?;
    let run_dir = config.run_dir();
    if run_dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "run directory {} already exists; pass --force to overwrite",
                run_dir.display()
            )));
        }
        std::fs::remove_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    }
    let train = load_split(&config.dataset, Split::Train)?;
    let val = load_split(&config.dataset, Split::Val)?;
    let lpips = if config.train.lambda_lpips > 0.0 {
        Some(config.lpips.build(DType::F32)?)
    } else {
        None
    };
    let model = build_model(&config.model)?;
    log::info!(
        "training {} ({} parameters) on {} pairs",
        config.model.variant,
        model.count_parameters(),
        train.len()
    );
    let outcome = fit(model, train.as_ref(), val.as_ref(), &config.train, lpips.clone())?;

    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.model, &checkpoint)?;
    let log_path = run_dir.join(TRAIN_LOG_FILE);
    outcome.log.write_jsonl(&log_path)?;

    let config_json = serde_json::to_value(config).expect("config serializes");
    let manifest = json!({
        "run_id": config.run_id,
        "seed": config.train.seed,
        "config_hash": config.hash(),
        "config": config_json,
        "asset_checksums": {
            "lpips": lpips.as_ref().map(|n| n.provenance().to_string()),
        },
        "checkpoint_sha256": sha256_file(&checkpoint)?,
        "parameters": outcome.model.count_parameters(),
        "best_epoch": outcome.log.best_epoch,
        "best_val_psnr": outcome.log.best_val_psnr,
        "stop_reason": outcome.log.stop_reason,
        "conventions": conventions(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let manifest_path = run_dir.join(MANIFEST_FILE);
    write(&manifest_path, json_text(&manifest))?;
    Ok(TrainArtifacts {
        run_dir,
        checkpoint,
        log_path,
        manifest: manifest_path,
        log: outcome.log,
    })
}

#[derive(Debug, Clone)]
pub struct EvalArtifacts {
    pub records: Vec<EvalRecord>,
    /// One CSV per metric, in [`Metric::ALL`] order.
    pub csvs: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// Evaluates a checkpoint over the config's SNR grid on the test split.
///
/// The checkpoint's model config must equal the experiment's. Output goes to
/// `out_dir`, by default `<run_dir>/eval`.
pub fn cmd_eval(checkpoint: &Path, config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<EvalArtifacts> {
    config.validate()?;
    let model = load_checkpoint(checkpoint, Some(&config.model))?;
    let test = load_split(&config.dataset, Split::Test)?;
    let net = config.lpips.build(DType::F32)?;
    let records = evaluate_model(
        &model,
        test.as_ref(),
        &config.eval_snr_grid_db,
        config.eval_repeats,
        config.eval_seed,
        &net,
    )?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| config.run_dir().join(EVAL_DIR));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut csvs = Vec::with_capacity(3);
    for metric in Metric::ALL {
        let path = dir.join(metric.file_name());
        write(&path, metric_csv(&records, metric))?;
        csvs.push(path);
    }
    let manifest = json!({
        "run_id": config.run_id,
        "config_hash": config.hash(),
        "checkpoint_sha256": sha256_file(checkpoint)?,
        "eval_seed": config.eval_seed,
        "eval_repeats": config.eval_repeats,
        "eval_snr_grid_db": config.eval_snr_grid_db,
        "test_pairs": test.len(),
        "asset_checksums": { "lpips": net.provenance() },
        "std_semantics": "population std across per-image means; each image's metric is first averaged over its noise repeats",
        "noise": "one unit-power realization per (image, repeat), shared across the SNR grid",
        "conventions": conventions(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let manifest_path = dir.join(EVAL_MANIFEST_FILE);
    write(&manifest_path, json_text(&manifest))?;
    Ok(EvalArtifacts {
        records,
        csvs,
        manifest: manifest_path,
    })
}

/// Writes the synthetic dataset of `config` as 8-bit PNGs plus a manifest.
pub fn cmd_synth_data(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    if config.dataset.name != DatasetName::Synthetic {
        return Err(Error::Config("synth-data needs a synthetic dataset config".into()));
    }
    let mut manifest = String::new();
    for split in Split::ALL {
        let dir = out_dir.join(split.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let data = load_split(&config.dataset, split)?;
        for i in 0..data.len() {
            let p = data.pair(i)?;
            let left = format!("{}/{}_left.png", split.name(), p.pair_id);
            let right = format!("{}/{}_right.png", split.name(), p.pair_id);
            save_png(&p.x, &out_dir.join(&left))?;
            save_png(&p.x_side, &out_dir.join(&right))?;
            manifest.push_str(&format!("{}\t{left}\t{right}\t{}\n", p.pair_id, split.name()));
        }
    }
    let path = out_dir.join(crate::data::MANIFEST_FILE);
    write(&path, manifest)?;
    Ok(path)
}

/// Checkpoint header as pretty JSON.
pub fn cmd_inspect_checkpoint(path: &Path) -> Result<String> {
    let info = crate::codec::inspect_checkpoint(path)?;
    let tensors: Vec<serde_json::Value> = info
        .tensors
        .iter()
        .map(|(n, s)| json!({ "name": n, "shape": s }))
        .collect();
    Ok(json_text(&json!({
        "format_version": info.format_version,
        "dtype": info.dtype.as_str(),
        "parameters": info.parameter_count(),
        "model_config": info.config,
        "tensors": tensors,
    })))
}
