//! Run directories, the exogenous-network cache and the job scheduler.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use thin_core::config::{DatasetName, ExoTarget, ExperimentConfig, Limits, Schedule, Variant};
use thin_core::data::{self, DatasetSplit, MnistFiles, SampleSet, Split};
use thin_core::loss::LossConfig;
use thin_core::model::{build_variant, ExoStack, ThinModel};
use thin_core::train::{
    self, evaluate, load_model, model_checkpoint, pretrain_exogenous, Checkpoint, Evaluation, ExoMetrics, MetricRecord,
};

use crate::stats::{self, Histogram};
use crate::{config_error, exit_code};

/// Bins of every exported `|cos|` histogram on `[0, 1]`.
pub const COS_BINS: usize = 50;
/// Evaluation batch size; does not affect results.
const EVAL_BATCH: usize = 100;
/// Training steps between progress lines in the log.
const PROGRESS_EVERY: u64 = 500;

/// Schedule and truncation shared by every run of a command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTemplate {
    pub schedule: Schedule,
    pub limits: Limits,
}

impl RunTemplate {
    pub fn config(&self, dataset: DatasetName, variant: Variant, seed: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(dataset, variant, seed);
        c.schedule = self.schedule.clone();
        c.limits = self.limits.clone();
        c
    }
}

/// SHA-256 of the canonical JSON text of `value` (object keys sorted).
pub fn digest<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?.to_string();
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    ))
}

/// JSON-lines metric log.
struct MetricLog {
    out: BufWriter<File>,
    failed: Option<std::io::Error>,
}

impl MetricLog {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(MetricLog {
            out: BufWriter::new(f),
            failed: None,
        })
    }

    fn push(&mut self, r: &MetricRecord) {
        if self.failed.is_some() {
            return;
        }
        let line = serde_json::to_string(r).expect("metric records serialize");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.failed = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.failed {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Summary of one joint-training run, stored as `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub digest: String,
    pub dataset: DatasetName,
    pub variant: Variant,
    /// Resolved gate input, e.g. `exogenous:rotation`.
    pub gating: Option<String>,
    pub lambda: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Percent.
    pub test_accuracy: Option<f64>,
    /// Percent.
    pub best_val_accuracy: Option<f64>,
    pub trainable_params: Option<usize>,
    pub head_params: Option<usize>,
    pub steps: Option<usize>,
    pub best_step: Option<usize>,
    pub mean_abs_cos: Option<f64>,
    pub median_abs_cos: Option<f64>,
    pub gate_entropy: Option<f64>,
    pub cos_histogram: Option<Histogram>,
    pub wall_time_s: f64,
}

impl RunResult {
    fn failed(cfg: &ExperimentConfig, digest: String, err: &anyhow::Error, wall: f64) -> Self {
        RunResult {
            digest,
            dataset: cfg.dataset,
            variant: cfg.variant,
            gating: gating_label(cfg),
            lambda: cfg.lambda,
            seed: cfg.seed,
            status: RunStatus::Failed,
            error: Some(format!("{err:#}")),
            test_accuracy: None,
            best_val_accuracy: None,
            trainable_params: None,
            head_params: None,
            steps: None,
            best_step: None,
            mean_abs_cos: None,
            median_abs_cos: None,
            gate_entropy: None,
            cos_histogram: None,
            wall_time_s: wall,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// `source[:targets]` for the configuration's resolved gate.
pub fn gating_label(cfg: &ExperimentConfig) -> Option<String> {
    let rg = cfg.resolved_gating().ok()??;
    let targets: Vec<&str> = rg.exo.iter().map(|t| t.as_str()).collect();
    Some(if targets.is_empty() {
        rg.source.to_string()
    } else {
        format!("{}:{}", rg.source, targets.join("+"))
    })
}

#[derive(Serialize)]
struct ExoSpec<'a> {
    kind: &'static str,
    dataset: DatasetName,
    target: ExoTarget,
    seed: u64,
    schedule: &'a Schedule,
    limits: &'a Limits,
}

/// Outcome of exogenous pretraining, stored as `result.json` next to the
/// frozen network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainResult {
    pub digest: String,
    pub dataset: DatasetName,
    pub target: ExoTarget,
    pub seed: u64,
    pub steps: usize,
    pub best_step: usize,
    pub val: Option<ExoMetrics>,
    pub test: ExoMetrics,
    pub wall_time_s: f64,
}

/// Evaluation summary without the per-sample values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    pub dataset: DatasetName,
    pub variant: Variant,
    pub split: String,
    pub samples: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub loss_sup: f64,
    pub gate_entropy: Option<f64>,
    pub leaf_usage: Option<Vec<f64>>,
    pub mean_abs_cos: Option<f64>,
    pub median_abs_cos: Option<f64>,
}

pub struct Harness {
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub jobs: usize,
    /// Recompute runs and pretrained networks even when results exist.
    pub force: bool,
    datasets: Mutex<HashMap<(DatasetName, u64), DatasetSplit>>,
    exo_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    refreshed: Mutex<HashSet<String>>,
}

impl Harness {
    pub fn new(out_dir: impl Into<PathBuf>, data_dir: Option<PathBuf>, jobs: usize) -> Self {
        Harness {
            out_dir: out_dir.into(),
            data_dir,
            jobs: jobs.max(1),
            force: false,
            datasets: Mutex::new(HashMap::new()),
            exo_locks: Mutex::new(HashMap::new()),
            refreshed: Mutex::new(HashSet::new()),
        }
    }

    pub fn run_dir(&self, digest: &str) -> PathBuf {
        self.out_dir.join("runs").join(digest)
    }

    pub fn exo_dir(&self, digest: &str) -> PathBuf {
        self.out_dir.join("exo").join(digest)
    }

    pub fn mnist_files(&self) -> Result<MnistFiles> {
        let dir = self.data_dir.as_ref().ok_or_else(|| {
            config_error("MNIST-based datasets need the MNIST IDX files: pass --data-dir or set THIN_DATA_DIR")
        })?;
        Ok(MnistFiles::locate(dir)?)
    }

    /// The dataset for `seed`, truncated by `limits`. Full splits are built
    /// once per process and shared.
    pub fn dataset(&self, name: DatasetName, seed: u64, limits: &Limits) -> Result<DatasetSplit> {
        let full = {
            let cached = self.datasets.lock().expect("dataset cache").get(&(name, seed)).cloned();
            match cached {
                Some(d) => d,
                None => {
                    let files = if name.needs_mnist() {
                        Some(self.mnist_files()?)
                    } else {
                        None
                    };
                    let d = data::build(name, seed, files.as_ref())?;
                    self.datasets
                        .lock()
                        .expect("dataset cache")
                        .insert((name, seed), d.clone());
                    d
                }
            }
        };
        Ok(full.truncated(limits.train, limits.test))
    }

    fn stale(&self, digest: &str, present: bool) -> bool {
        !present || (self.force && !self.refreshed.lock().expect("refresh set").contains(digest))
    }

    /// Loads the frozen `target` network for `(dataset, seed)`, pretraining
    /// and caching it first if needed.
    pub fn ensure_exo(
        &self,
        dataset: DatasetName,
        target: ExoTarget,
        seed: u64,
        tpl: &RunTemplate,
    ) -> Result<(ExoStack, PretrainResult)> {
        let spec = ExoSpec {
            kind: "exo",
            dataset,
            target,
            seed,
            schedule: &tpl.schedule,
            limits: &tpl.limits,
        };
        let digest = digest(&spec)?;
        let lock = self
            .exo_locks
            .lock()
            .expect("exo locks")
            .entry(digest.clone())
            .or_default()
            .clone();
        let _guard = lock.lock().expect("exo lock");
        let dir = self.exo_dir(&digest);
        let (ckpt_path, result_path) = (dir.join("checkpoint.bin"), dir.join("result.json"));
        let cached: Option<PretrainResult> = read_json(&result_path)?;
        if !self.stale(&digest, cached.is_some() && ckpt_path.is_file()) {
            let stack = ExoStack::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?;
            return Ok((stack, cached.expect("checked above")));
        }

        log::info!(
            "pretraining {target} network on {dataset} (seed {seed}) in {}",
            dir.display()
        );
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("config.json"), &spec)?;
        let ds = self.dataset(dataset, seed, &tpl.limits)?;
        let started = Instant::now();
        let mut metrics = MetricLog::create(&dir.join("metrics.jsonl"))?;
        let out = pretrain_exogenous(dataset, &ds.train, &ds.test, target, &tpl.schedule, seed, &mut |r| {
            progress(&digest, r);
            metrics.push(r);
        })?;
        metrics.finish()?;
        let result = PretrainResult {
            digest: digest.clone(),
            dataset,
            target,
            seed,
            steps: out.steps,
            best_step: out.best_step,
            val: out.val.clone(),
            test: out.test.clone(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        let mut m = BTreeMap::new();
        m.insert("test_bin_accuracy".to_string(), out.test.bin_accuracy);
        m.insert("test_bin_center_mae".to_string(), out.test.bin_center_mae);
        out.stack.to_checkpoint(dataset, seed, m).save(&ckpt_path)?;
        write_json(&result_path, &result)?;
        self.refreshed.lock().expect("refresh set").insert(digest);
        log::info!(
            "{target} network on {dataset}: test bin accuracy {:.4}, bin-center MAE {:.4}",
            result.test.bin_accuracy,
            result.test.bin_center_mae
        );
        Ok((out.stack, result))
    }

    /// Trains and evaluates one configuration. Configuration errors are
    /// returned; any other failure yields a result marked failed.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunResult> {
        cfg.validate()?;
        let digest = digest(cfg)?;
        let dir = self.run_dir(&digest);
        let cached: Option<RunResult> = read_json(&dir.join("result.json"))?;
        if let Some(r) = &cached {
            if r.ok() && !self.stale(&digest, true) {
                return Ok(r.clone());
            }
        }
        fs::create_dir_all(dir.join("exports"))?;
        write_json(&dir.join("config.json"), cfg)?;
        let started = Instant::now();
        let result = match self.execute(cfg, &digest, &dir, started) {
            Ok(r) => r,
            Err(e) if exit_code(&e) == 2 => return Err(e),
            Err(e) => {
                log::error!("run {digest} failed: {e:#}");
                RunResult::failed(cfg, digest.clone(), &e, started.elapsed().as_secs_f64())
            }
        };
        write_json(&dir.join("result.json"), &result)?;
        self.refreshed.lock().expect("refresh set").insert(digest);
        Ok(result)
    }

    /// Frozen stacks a run loads: the ones its gate needs plus the probe.
    pub fn stacks_for(&self, cfg: &ExperimentConfig) -> Result<Vec<ExoStack>> {
        let tpl = RunTemplate {
            schedule: cfg.schedule.clone(),
            limits: cfg.limits.clone(),
        };
        let mut targets = cfg.required_exo()?;
        if !targets.contains(&cfg.dataset.primary_exo()) {
            targets.push(cfg.dataset.primary_exo());
        }
        targets
            .into_iter()
            .map(|t| Ok(self.ensure_exo(cfg.dataset, t, cfg.seed, &tpl)?.0))
            .collect()
    }

    fn execute(&self, cfg: &ExperimentConfig, digest: &str, dir: &Path, started: Instant) -> Result<RunResult> {
        let ds = self.dataset(cfg.dataset, cfg.seed, &cfg.limits)?;
        let stacks = self.stacks_for(cfg)?;
        let model = build_variant(cfg, stacks)?;
        let report = model.param_report();
        log::info!(
            "run {digest}: {} {} seed {} λ={} ({} trainable parameters)",
            cfg.dataset,
            cfg.variant,
            cfg.seed,
            cfg.lambda,
            report.trainable
        );

        let ckpt_path = dir.join("checkpoint.bin");
        let mut metrics = MetricLog::create(&dir.join("metrics.jsonl"))?;
        let outcome = train::train(
            model,
            &ds.train,
            cfg,
            &mut |r| {
                progress(digest, r);
                metrics.push(r);
            },
            &mut |m, step, acc| {
                let mut meta = BTreeMap::new();
                meta.insert("val_accuracy".to_string(), acc);
                model_checkpoint(m, cfg, step as u64, meta, None)?.save(&ckpt_path)
            },
        );
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                metrics.finish()?;
                return Err(e.into());
            }
        };

        let loss_cfg = LossConfig::with_lambda(cfg.lambda)?;
        let ev = evaluate(&outcome.model, &ds.test, EVAL_BATCH, &loss_cfg)?;
        metrics.push(&ev.record(outcome.steps as u64, "test"));
        metrics.finish()?;

        let mut meta = BTreeMap::new();
        meta.insert("test_accuracy".to_string(), ev.accuracy);
        if let Some(v) = outcome.best_val_accuracy {
            meta.insert("val_accuracy".to_string(), v);
        }
        model_checkpoint(&outcome.model, cfg, outcome.best_step as u64, meta, None)?.save(&ckpt_path)?;

        let hist = (!ev.abs_cos.is_empty()).then(|| Histogram::new(&ev.abs_cos, COS_BINS, 0.0, 1.0));
        if let Some(h) = &hist {
            write_json(
                &dir.join("exports").join("cos_histogram.json"),
                &cos_export(h, &ev.abs_cos),
            )?;
        }
        let result = RunResult {
            digest: digest.to_string(),
            dataset: cfg.dataset,
            variant: cfg.variant,
            gating: gating_label(cfg),
            lambda: cfg.lambda,
            seed: cfg.seed,
            status: crate::RunStatus::Ok,
            error: None,
            test_accuracy: Some(100.0 * ev.accuracy),
            best_val_accuracy: outcome.best_val_accuracy.map(|a| 100.0 * a),
            trainable_params: Some(report.trainable),
            head_params: Some(report.head_dense),
            steps: Some(outcome.steps),
            best_step: Some(outcome.best_step),
            mean_abs_cos: ev.mean_abs_cos,
            median_abs_cos: stats::median(&ev.abs_cos),
            gate_entropy: ev.gate_entropy,
            cos_histogram: hist,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "run {digest}: test accuracy {:.2}% after {} steps",
            100.0 * ev.accuracy,
            outcome.steps
        );
        Ok(result)
    }

    /// Runs every configuration, up to `jobs` at a time, keeping input order.
    pub fn run_many(&self, cfgs: &[ExperimentConfig]) -> Vec<Result<RunResult>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<RunResult>>>> = cfgs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.jobs.min(cfgs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= cfgs.len() {
                        break;
                    }
                    let r = self.run(&cfgs[i]);
                    *slots[i].lock().expect("result slot") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("result slot").expect("every slot filled"))
            .collect()
    }

    /// Loads a checkpoint and the dataset it was trained on.
    pub fn open_checkpoint(&self, path: &Path) -> Result<(ExperimentConfig, ThinModel, DatasetSplit)> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.manifest.exo_target.is_some() {
            return Err(config_error(format!(
                "{} holds a pretrained exogenous network, not a trained model",
                path.display()
            )));
        }
        let (cfg, model) = load_model(&ckpt)?;
        let ds = self.dataset(cfg.dataset, cfg.seed, &cfg.limits)?;
        Ok((cfg, model, ds))
    }

    pub fn evaluate_checkpoint(&self, path: &Path, split: Split) -> Result<EvalSummary> {
        let (cfg, model, ds) = self.open_checkpoint(path)?;
        let ev = evaluate(
            &model,
            split_of(&ds, split),
            EVAL_BATCH,
            &LossConfig::with_lambda(cfg.lambda)?,
        )?;
        Ok(summary(path, &cfg, split, ev))
    }
}

pub fn split_of(ds: &DatasetSplit, split: Split) -> &SampleSet {
    match split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    }
}

fn summary(path: &Path, cfg: &ExperimentConfig, split: Split, ev: Evaluation) -> EvalSummary {
    EvalSummary {
        checkpoint: path.to_path_buf(),
        dataset: cfg.dataset,
        variant: cfg.variant,
        split: split.as_str().to_string(),
        samples: ev.samples,
        accuracy: ev.accuracy,
        per_class_accuracy: ev.per_class_accuracy,
        confusion: ev.confusion,
        loss_sup: ev.loss_sup,
        gate_entropy: ev.gate_entropy,
        leaf_usage: ev.leaf_usage,
        mean_abs_cos: ev.mean_abs_cos,
        median_abs_cos: stats::median(&ev.abs_cos),
    }
}

/// The `|cos|` histogram export: bin edges, counts and summary values.
pub fn cos_export(h: &Histogram, values: &[f64]) -> serde_json::Value {
    serde_json::json!({
        "bins": h.counts.len(),
        "edges": h.edges(),
        "counts": h.counts,
        "samples": values.len(),
        "mean": stats::mean(values),
        "median": stats::median(values),
    })
}

fn progress(digest: &str, r: &MetricRecord) {
    let short = &digest[..digest.len().min(10)];
    match r.split.as_str() {
        "train" if r.step.is_multiple_of(PROGRESS_EVERY) => {
            log::info!(
                "[{short}] step {} loss {:.4} batch accuracy {:.3}",
                r.step,
                r.loss,
                r.accuracy
            )
        }
        "val" => log::info!("[{short}] step {} validation accuracy {:.4}", r.step, r.accuracy),
        _ => {}
    }
}
