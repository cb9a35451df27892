//! End-to-end runs: data, training, per-epoch probes, final diagnostics and
//! the on-disk run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! <root>/<method>-<hash16>/
//!     config.toml
//!     runlog.jsonl          one epoch per line
//!     metrics/epochs.csv
//!     metrics/degradation.csv
//!     metrics/similarity.csv  (fusion methods)
//!     checkpoints/epoch-NNNN.bin
//!     record.json
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use numcore::Rng;

use crate::bench::config::RunConfig;
use crate::bench::datasets::materialize;
use crate::bench::record::{EpochMetrics, RunMetrics, RunRecord};
use crate::data::Dataset;
use crate::diagnostics::{
    accumulate_importance, conflict_gain_samples, default_pairs, learned_profile, mean_conflict,
    prune_and_measure, shared_filter_grad_norms, similarity_matrix, ImportanceProfile, Provenance,
};
use crate::error::{Error, Result};
use crate::metagf::{streams, EpochReport, Trainer};
use crate::model::{evaluate, write_checkpoint, Inference, MultiOutputModel};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DRMGF_OUTPUT_ROOT";
const DEFAULT_ROOT: &str = "runs";

pub fn output_root(cfg: &RunConfig) -> PathBuf {
    cfg.output
        .root
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

/// Content-addressed directory of the run described by `cfg`.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    output_root(cfg).join(format!("{}-{}", cfg.method, &cfg.hash()[..16]))
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{} is locked by another run", dir.display()),
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Train and held-out splits of the configured dataset. With a single split
/// the training data doubles as the evaluation set.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let mut parts = materialize(&cfg.dataset, cfg.seed)?.into_iter();
    let train = parts
        .next()
        .ok_or_else(|| Error::Config("dataset has no splits".into()))?;
    let test = parts.next().unwrap_or_else(|| train.clone());
    if train.rows() == 0 || test.rows() == 0 {
        return Err(Error::Config("a dataset split is empty".into()));
    }
    Ok((train, test))
}

pub fn init_model(cfg: &RunConfig, train: &Dataset) -> Result<MultiOutputModel> {
    let topo = cfg.topology(train.dim(), &train.classes)?;
    MultiOutputModel::init(topo, &mut Rng::with_stream(cfg.seed, streams::INIT))
}

fn accuracies(
    model: &MultiOutputModel,
    inference: Inference<'_>,
    data: &Dataset,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ev = evaluate(model, inference, &data.full_batch()?)?;
    Ok((
        ev.iter().map(|e| e.accuracy.unwrap_or(f64::NAN)).collect(),
        ev.iter().map(|e| e.loss).collect(),
    ))
}

fn epoch_metrics(
    cfg: &RunConfig,
    t: &Trainer,
    r: &EpochReport,
    train: &Dataset,
    test: &Dataset,
) -> Result<EpochMetrics> {
    let (train_accuracy, _) = accuracies(&t.model, t.inference(), train)?;
    let (test_accuracy, test_loss) = accuracies(&t.model, t.inference(), test)?;
    let conflict = if cfg.diagnostics.conflict && t.model.num_tasks() > 1 {
        let mut batches = t.epoch_batches(train, r.epoch)?;
        if cfg.diagnostics.conflict_batches > 0 {
            batches.truncate(cfg.diagnostics.conflict_batches);
        }
        Some(mean_conflict(
            &t.model,
            t.inference(),
            &batches,
            &default_pairs(&t.model),
        )?)
    } else {
        None
    };
    Ok(EpochMetrics {
        epoch: r.epoch + 1,
        lr: r.lr,
        task_losses: r.task_losses.clone(),
        train_accuracy,
        test_accuracy,
        test_loss,
        conflict,
        joint_loss: r.joint_loss,
        fused_norm: r.fused_norm,
        meta_loss_before: r.meta.map(|m| m.loss_before),
        meta_loss_after: r.meta.map(|m| m.loss_after),
        fallback_filters: r.fallback_filters,
    })
}

/// Learned profile for fusion methods; otherwise the accumulated
/// gradient-norm profile over one pass of training batches.
pub fn importance_profile(t: &Trainer, train: &Dataset) -> Result<ImportanceProfile> {
    if t.config.method.is_fusion() {
        return Ok(learned_profile(&t.model, &t.importances));
    }
    let batches = t.epoch_batches(train, t.epoch)?;
    let k = t.model.num_tasks();
    let mut per_task: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    for b in &batches {
        for (task, norms) in shared_filter_grad_norms(&t.model, b)?
            .into_iter()
            .enumerate()
        {
            per_task[task].push(norms);
        }
    }
    let rows = per_task
        .iter()
        .map(|n| accumulate_importance(n).map(|(row, _)| row))
        .collect::<Result<_>>()?;
    Ok(ImportanceProfile {
        provenance: Provenance::AccumulatedGradient,
        rows,
    })
}

/// Post-training diagnostics of a finished trainer.
pub fn final_metrics(
    t: &Trainer,
    epochs: Vec<EpochMetrics>,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunMetrics> {
    let (final_train_accuracy, _) = accuracies(&t.model, t.inference(), train)?;
    let (final_test_accuracy, final_test_loss) = accuracies(&t.model, t.inference(), test)?;
    let profile = importance_profile(t, train)?;
    let routes = t
        .config
        .method
        .uses_routes()
        .then_some((&t.importances, t.config.disentangle.eps));
    let degradation = prune_and_measure(&t.model, routes, &profile, test)?;
    let similarity = if t.config.method.is_fusion() && t.model.num_tasks() > 1 {
        Some(similarity_matrix(&t.model, &t.importances)?)
    } else {
        None
    };
    Ok(RunMetrics {
        method: t.config.method,
        tasks: t.model.num_tasks(),
        epochs,
        final_train_accuracy,
        final_test_accuracy,
        final_test_loss,
        profile,
        degradation,
        similarity,
        gain_samples: Vec::new(),
        gain_dropped: 0,
    })
}

/// Trains and measures in memory. `on_epoch` sees every epoch as it
/// completes.
pub fn execute(
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
) -> Result<(RunRecord, Trainer)> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, test) = load_data(cfg)?;
    let model = init_model(cfg, &train)?;
    let mut t = Trainer::new(cfg.trainer_config(), model)?;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let pairs = default_pairs(&t.model);
    let (every, eta) = (cfg.diagnostics.gain_every, cfg.diagnostics.gain_eta);
    let mut samples = Vec::new();
    let mut dropped = 0;
    let mut step = 0;
    while !t.done() {
        let batches = t.epoch_batches(&train, t.epoch)?;
        let r = t.step_epoch_probed(&batches, &mut |model, _, batch| {
            if every > 0 && step % every == 0 {
                let (s, d) = conflict_gain_samples(model, batch, &pairs, eta, step)?;
                samples.extend(s);
                dropped += d;
            }
            step += 1;
            Ok(())
        })?;
        let m = epoch_metrics(cfg, &t, &r, &train, &test)?;
        on_epoch(&t, &m)?;
        epochs.push(m);
    }
    let mut metrics = final_metrics(&t, epochs, &train, &test)?;
    metrics.gain_samples = samples;
    metrics.gain_dropped = dropped;
    Ok((
        RunRecord::new(cfg.clone(), metrics, started.elapsed().as_secs_f64()),
        t,
    ))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_matrix(path: &Path, label: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let k = rows.first().map_or(0, Vec::len);
    let mut header = vec![label.to_string()];
    header.extend((0..k).map(|q| format!("task{q}")));
    w.write_record(&header).map_err(csv_err)?;
    for (p, row) in rows.iter().enumerate() {
        let mut rec = vec![p.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_epoch_table(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = [
        "epoch",
        "lr",
        "joint_loss",
        "conflict",
        "fused_norm",
        "meta_loss_before",
        "meta_loss_after",
    ]
    .map(String::from)
    .to_vec();
    for k in 0..metrics.tasks {
        header.extend([
            format!("train_loss{k}"),
            format!("train_acc{k}"),
            format!("test_acc{k}"),
        ]);
    }
    w.write_record(&header).map_err(csv_err)?;
    for e in &metrics.epochs {
        let mut rec = vec![
            e.epoch.to_string(),
            e.lr.to_string(),
            e.joint_loss.to_string(),
            opt(e.conflict),
            e.fused_norm.to_string(),
            opt(e.meta_loss_before),
            opt(e.meta_loss_after),
        ];
        for k in 0..metrics.tasks {
            rec.extend(
                [e.task_losses[k], e.train_accuracy[k], e.test_accuracy[k]].map(|v| v.to_string()),
            );
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cfg` and persists every artifact under its run directory. An
/// error aborts the run but keeps the log written so far.
pub fn run_experiment(cfg: &RunConfig) -> Result<(PathBuf, RunRecord)> {
    cfg.validate()?;
    let dir = run_dir(cfg);
    fs::create_dir_all(dir.join("metrics"))?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    let _lock = RunLock::acquire(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut log = BufWriter::new(File::create(dir.join("runlog.jsonl"))?);
    let every = cfg.output.checkpoint_every;
    let last = cfg.train.epochs;
    let mut epoch_started = Instant::now();
    let (record, trainer) = execute(cfg, |t, m| {
        let mut line = serde_json::to_value(m)?;
        line["wall_seconds"] = epoch_started.elapsed().as_secs_f64().into();
        writeln!(log, "{line}")?;
        log.flush()?;
        if m.epoch == last || (every > 0 && m.epoch % every == 0) {
            save_checkpoint(&dir, m.epoch, t)?;
        }
        epoch_started = Instant::now();
        Ok(())
    })?;
    drop(log);
    let m = &record.metrics;
    write_epoch_table(&dir.join("metrics/epochs.csv"), m)?;
    write_matrix(
        &dir.join("metrics/degradation.csv"),
        "pruned",
        &m.degradation.rows,
    )?;
    if let Some(s) = &m.similarity {
        write_matrix(&dir.join("metrics/similarity.csv"), "task", s)?;
    }
    record.save(&dir.join("record.json"))?;
    drop(trainer);
    Ok((dir, record))
}

fn save_checkpoint(dir: &Path, epoch: usize, t: &Trainer) -> Result<()> {
    let path = dir.join(format!("checkpoints/epoch-{epoch:04}.bin"));
    let mut out = BufWriter::new(File::create(path)?);
    let imps = t.config.method.is_fusion().then_some(&t.importances);
    write_checkpoint(&mut out, &t.model, imps)?;
    out.flush()?;
    Ok(())
}
