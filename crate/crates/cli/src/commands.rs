use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mfd_core::data::{compute_stats, generate_synthetic, to_original, write_corpus, Dataset, DatasetStats, MANIFEST_FILE};
use mfd_core::detector::train::{train_until, TrainState};
use mfd_core::detector::{build_params, infer, ParamStore, StepRecord};
use mfd_core::eval::{map_suite, read_detections, write_detections, write_report, Detection, EvalReport};
use mfd_core::tensor::OpKind;
use mfd_core::verify::{run_battery, BatteryConfig, BatteryReport};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::lock::OutputLock;

pub const MODEL_FILE: &str = "model.mfdn";
pub const OPTIMIZER_FILE: &str = "optimizer.mfdn";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const STATS_FILE: &str = "stats.json";
pub const CORPUS_DIR: &str = "corpus";

/// Names an op whose backward pass the verify command perturbs. Test
/// fixture only.
pub const FAULT_ENV: &str = "MFD_VERIFY_FAULT";

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

/// Writes the synthetic corpus into the output directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    cfg.require_seed()?;
    let out = cfg.require_out()?;
    let _lock = OutputLock::acquire(out)?;
    let corpus = generate_synthetic(&cfg.synth)?;
    write_corpus(&corpus, out)?;
    info!(
        "wrote {} train and {} test images of {} classes to {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.classes.len(),
        out.display()
    );
    Ok(())
}

/// The configured dataset, or the synthetic corpus under `<out>/corpus`,
/// generated on first use.
pub fn dataset_root(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(root) = &cfg.dataset.root {
        return Ok(root.clone());
    }
    let root = cfg.require_out()?.join(CORPUS_DIR);
    if !root.join(MANIFEST_FILE).exists() {
        cfg.require_seed()?;
        info!("generating the synthetic corpus in {}", root.display());
        write_corpus(&generate_synthetic(&cfg.synth)?, &root)?;
    }
    Ok(root)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, RunConfig)> {
    let root = dataset_root(cfg)?;
    let ds = Dataset::load(&root).with_context(|| format!("loading dataset {}", root.display()))?;
    let mut cfg = cfg.clone();
    if cfg.model.num_classes != ds.classes.len() {
        warn!(
            "model.num_classes is {} but the dataset has {} classes; using {}",
            cfg.model.num_classes,
            ds.classes.len(),
            ds.classes.len()
        );
        cfg.model.num_classes = ds.classes.len();
    }
    Ok((ds, cfg))
}

/// Completed steps recorded in the log, dropping any lines past `keep`.
fn truncate_log(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        if keep > 0 {
            bail!("{} is missing but the optimizer state is at step {}", path.display(), keep);
        }
        return Ok(());
    }
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let lines: Vec<String> = reader.lines().take(keep).collect::<std::io::Result<_>>()?;
    if lines.len() < keep {
        bail!("{} has {} lines but the optimizer state is at step {}", path.display(), lines.len(), keep);
    }
    let mut text = lines.join("\n");
    if keep > 0 {
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("rewriting {}", path.display()))
}

fn save_state(out: &Path, state: &TrainState) -> Result<()> {
    let mut model = Vec::new();
    state.params.write_to(&mut model)?;
    write_atomic(&out.join(MODEL_FILE), &model)?;
    let opt_tmp = out.join(OPTIMIZER_FILE).with_extension("tmp");
    state.save_optimizer(&opt_tmp)?;
    std::fs::rename(&opt_tmp, out.join(OPTIMIZER_FILE)).context("renaming optimizer checkpoint")
}

/// Trains on the configured train split and writes `model.mfdn`,
/// `optimizer.mfdn`, `train_log.jsonl` and `run_config.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainState> {
    let seed = cfg.require_seed()?;
    let out = cfg.require_out()?;
    let _lock = OutputLock::acquire(out)?;
    let (ds, cfg) = load_dataset(cfg)?;
    if cfg.optim.lr == 0.0 {
        warn!("lr is 0: parameters will not change");
    }
    let train_idx = ds.split(&cfg.dataset.train_split)?;
    if train_idx.is_empty() {
        bail!("split {:?} is empty", cfg.dataset.train_split);
    }
    let samples = ds.samples(&train_idx, cfg.model.input_height, cfg.model.input_width)?;
    write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;

    let log_path = out.join(TRAIN_LOG_FILE);
    let opt_path = out.join(OPTIMIZER_FILE);
    let mut state = if cfg.train.resume && opt_path.exists() {
        let params = ParamStore::load(&out.join(MODEL_FILE))?;
        let state = TrainState::resume(params, &opt_path)?;
        truncate_log(&log_path, state.step)?;
        info!("resuming at step {}", state.step);
        state
    } else {
        if cfg.train.resume {
            warn!("nothing to resume in {}; starting fresh", out.display());
        }
        truncate_log(&log_path, 0)?;
        TrainState::new(build_params(&cfg.model, seed)?)
    };
    let expected = build_params(&cfg.model, seed)?;
    check_layout(&expected, &state.params)?;
    drop(expected);

    let mut log = BufWriter::new(
        std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?,
    );
    info!(
        "training {} steps on {} images ({} parameters)",
        cfg.optim.iterations.saturating_sub(state.step),
        samples.len(),
        state.params.num_scalars()
    );
    let (log_every, ckpt_every, iterations) = (cfg.train.log_every, cfg.train.checkpoint_every, cfg.optim.iterations);
    let until = if cfg.train.stop_after > 0 { cfg.train.stop_after } else { iterations };
    train_until(&cfg.model, &cfg.optim, &samples, &mut state, until, |rec: &StepRecord, st: &TrainState| {
        let line = serde_json::to_string(rec)?;
        writeln!(log, "{}", line).map_err(|e| mfd_core::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        if log_every > 0 && rec.step % log_every == 0 {
            info!(
                "step {}/{}  total {:.4}  rpn {:.4}  cls {:.4}  loc {:.4}  fom {:.4}  lr {:.2e}",
                rec.step, iterations, rec.total, rec.l_rpn, rec.l_cls, rec.l_loc, rec.l_fom, rec.lr
            );
        }
        if ckpt_every > 0 && rec.step % ckpt_every == 0 && rec.step < iterations {
            log.flush().map_err(|e| mfd_core::Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            save_state(out, st).map_err(|e| mfd_core::Error::Checkpoint(format!("{:#}", e)))?;
        }
        Ok(())
    })?;
    log.flush()?;
    save_state(out, &state)?;
    info!("wrote {}", out.join(MODEL_FILE).display());
    Ok(state)
}

fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.names() != got.names() {
        bail!("checkpoint parameters do not match the model configuration");
    }
    for ((name, a), (_, b)) in expected.iter().zip(got.iter()) {
        if a.shape() != b.shape() {
            bail!("checkpoint parameter {} has shape {:?}, the model expects {:?}", name, b.shape(), a.shape());
        }
    }
    Ok(())
}

/// Runs the model over the evaluation split, or scores an existing dump
/// when `eval.detections` is set. Writes `report.json` (and
/// `detections.jsonl` when the model ran).
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let out = cfg.require_out()?;
    let _lock = OutputLock::acquire(out)?;
    let (ds, cfg) = load_dataset(cfg)?;
    let split = cfg.eval.split.clone().unwrap_or_else(|| cfg.dataset.test_split.clone());
    let idx = ds.split(&split)?;
    let gts = ds.ground_truths(&idx);

    let dets: Vec<Detection> = match &cfg.eval.detections {
        Some(path) => read_detections(path)?,
        None => {
            let ckpt = cfg.eval.checkpoint.clone().unwrap_or_else(|| out.join(MODEL_FILE));
            if !ckpt.exists() {
                bail!("checkpoint {} does not exist", ckpt.display());
            }
            let params = ParamStore::load(&ckpt)?;
            check_layout(&build_params(&cfg.model, 0)?, &params)?;
            let (h, w) = (cfg.model.input_height, cfg.model.input_width);
            let samples = ds.samples(&idx, h, w)?;
            let per_image: Vec<Vec<Detection>> = samples
                .par_iter()
                .zip(&idx)
                .map(|(s, &i)| {
                    let record = &ds.records[i];
                    let preds = infer(&cfg.model, &params, &s.image, &cfg.eval.infer)?;
                    Ok(preds
                        .into_iter()
                        .map(|p| Detection {
                            image_id: record.id(),
                            class_id: p.class_id,
                            bbox: to_original(&p.bbox, record, h, w),
                            score: p.score,
                        })
                        .collect())
                })
                .collect::<mfd_core::Result<_>>()?;
            let dets: Vec<Detection> = per_image.into_iter().flatten().collect();
            write_detections(&out.join(DETECTIONS_FILE), &dets)?;
            dets
        }
    };
    let report = map_suite(&dets, &gts)?.with_class_names(&ds.classes);
    write_report(&out.join(REPORT_FILE), &report)?;
    info!(
        "{} detections on {} images: mAP {:.4}  AP25 {:.4}  AP75 {:.4}",
        dets.len(),
        idx.len(),
        report.map,
        report.ap25,
        report.ap75
    );
    Ok(report)
}

/// Statistics over every record of the dataset; also written to
/// `<out>/stats.json` when an output directory is configured.
pub fn cmd_stats(cfg: &RunConfig) -> Result<DatasetStats> {
    let root = match (&cfg.dataset.root, &cfg.out) {
        (Some(r), _) => r.clone(),
        (None, Some(_)) => dataset_root(cfg)?,
        (None, None) => bail!("stats needs dataset.root or an output directory holding a corpus"),
    };
    let ds = Dataset::load(&root).with_context(|| format!("loading dataset {}", root.display()))?;
    let stats = compute_stats(&ds.records)?;
    if let Some(out) = &cfg.out {
        let _lock = OutputLock::acquire(out)?;
        write_json(&out.join(STATS_FILE), &stats)?;
    }
    Ok(stats)
}

pub fn fault_from_env() -> Result<Option<OpKind>> {
    match std::env::var(FAULT_ENV) {
        Ok(name) if !name.is_empty() => OpKind::from_name(&name)
            .map(Some)
            .with_context(|| format!("{}={:?} names no op", FAULT_ENV, name)),
        _ => Ok(None),
    }
}

pub fn cmd_verify(cfg: &BatteryConfig) -> BatteryReport {
    run_battery(cfg)
}
