//! Exogenous pretraining, joint training and evaluation.
//!
//! Both stages use plain shuffled mini-batches (the trailing partial batch of
//! an epoch is dropped), hold a validation slice out of the training set, and
//! keep the parameters with the best validation accuracy.

pub mod adam;
pub mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetName, ExoTarget, ExperimentConfig, Schedule};
use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss, LossConfig};
use crate::model::{argmax_rows, build_variant, ExoStack, ThinModel};
use crate::nn::apply_buffer_updates;
use crate::params::ParamStore;
use crate::rng;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, Manifest, NamedTensor};

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// `train` for per-step records, `val` at evaluation points, `test` once
    /// at the end.
    pub split: String,
    pub accuracy: f64,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_sup")]
    pub loss_sup: f64,
    #[serde(rename = "L_sim")]
    pub loss_sim: Option<f64>,
    pub gate_entropy: Option<f64>,
}

/// Visits the training positions batch by batch, reshuffling every epoch.
struct Batches {
    order: Vec<usize>,
    batch: usize,
    cursor: usize,
    rng: rng::Rng,
}

impl Batches {
    fn new(len: usize, batch: usize, seed: u64, stream: &str) -> Result<Self> {
        if len < batch {
            return Err(Error::Config(format!(
                "{len} training samples cannot fill a batch of {batch}"
            )));
        }
        let mut b = Batches {
            order: (0..len).collect(),
            batch,
            cursor: 0,
            rng: rng::stream(seed, stream),
        };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    fn per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }

    fn next(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let s = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        s
    }
}

fn total_steps(schedule: &Schedule, per_epoch: usize) -> usize {
    let n = schedule.epochs * per_epoch;
    schedule.max_steps.map_or(n, |m| m.min(n))
}

fn split_validation(set: &SampleSet, schedule: &Schedule, seed: u64) -> Result<(SampleSet, Option<SampleSet>)> {
    if schedule.val_size == 0 {
        return Ok((set.clone(), None));
    }
    let (rest, val) = set.holdout(schedule.val_size, seed)?;
    Ok((rest, Some(val)))
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(d) => Error::Diverged {
            step: step as u64,
            detail: d,
        },
        other => other,
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

// ----------------------------------------------------------------------
// Exogenous pretraining

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExoMetrics {
    pub samples: usize,
    pub bin_accuracy: f64,
    /// Mean absolute error between the true value and the center of the
    /// predicted bin.
    pub bin_center_mae: f64,
}

/// Bin accuracy and bin-center error of a stack on `set`.
pub fn evaluate_exo(stack: &ExoStack, set: &SampleSet, batch: usize) -> Result<ExoMetrics> {
    let t = stack.target;
    let (mut hits, mut err, mut n) = (0usize, 0.0, 0usize);
    for b in set.batches(batch) {
        let b = b?;
        let classes = b.exo_classes(t)?;
        let values = b.exo_values(t)?;
        let (_, z) = stack.embed(&b.images)?;
        for ((p, c), v) in argmax_rows(&z).into_iter().zip(classes).zip(values) {
            hits += usize::from(p == c);
            err += (t.bin_center(p) - v).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    Ok(ExoMetrics {
        samples: n,
        bin_accuracy: hits as f64 / n as f64,
        bin_center_mae: err / n as f64,
    })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub stack: ExoStack,
    pub steps: usize,
    pub best_step: usize,
    pub val: Option<ExoMetrics>,
    pub test: ExoMetrics,
}

/// Trains a representation network and classifier on exogenous classes,
/// keeps the best validation parameters and freezes them.
pub fn pretrain_exogenous(
    dataset: DatasetName,
    train_set: &SampleSet,
    test_set: &SampleSet,
    target: ExoTarget,
    schedule: &Schedule,
    seed: u64,
    log: &mut dyn FnMut(&MetricRecord),
) -> Result<PretrainOutcome> {
    if !dataset.exo_targets().contains(&target) {
        return Err(Error::Config(format!("{dataset} carries no {target} labels")));
    }
    let (h, w) = dataset.image_size();
    let mut stack = ExoStack::new(target, h, w, seed)?;
    let (fit, val) = split_validation(train_set, schedule, seed)?;
    let mut batches = Batches::new(fit.len(), schedule.batch_size, seed, &format!("shuffle.exo.{target}"))?;
    let steps = total_steps(schedule, batches.per_epoch());
    let mut adam = Adam::new(schedule.lr);
    let mut best: Option<(f64, usize, ParamStore, ExoMetrics)> = None;

    for step in 1..=steps {
        let batch = fit.batch(batches.next())?;
        let classes = batch.exo_classes(target)?;
        let mut g = Graph::new();
        let run = (|| {
            let x = g.constant(batch.images.clone())?;
            let (_, z) = stack.forward(&mut g, x, true)?;
            let loss = g.softmax_cross_entropy(z, &classes)?;
            let grads = g.backward(loss)?;
            stack.store.zero_grads();
            g.accumulate_into(&grads, &mut stack.store);
            adam.step(&mut stack.store)?;
            apply_buffer_updates(&mut g, &mut stack.store)?;
            Ok((g.value(loss).item(), accuracy(&argmax_rows(g.value(z)), &classes)))
        })();
        let (loss, acc) = run.map_err(|e| diverged(step, e))?;
        log(&MetricRecord {
            step: step as u64,
            split: "train".into(),
            accuracy: acc,
            loss,
            loss_sup: loss,
            loss_sim: None,
            gate_entropy: None,
        });
        if let Some(val) = &val {
            if step % schedule.eval_every == 0 || step == steps {
                let m = evaluate_exo(&stack, val, schedule.batch_size)?;
                log(&MetricRecord {
                    step: step as u64,
                    split: "val".into(),
                    accuracy: m.bin_accuracy,
                    loss: f64::NAN,
                    loss_sup: f64::NAN,
                    loss_sim: None,
                    gate_entropy: None,
                });
                if best.as_ref().is_none_or(|b| m.bin_accuracy > b.0) {
                    best = Some((m.bin_accuracy, step, stack.store.clone(), m));
                }
            }
        }
    }
    let (best_step, val_metrics) = match best {
        Some((_, s, store, m)) => {
            stack.store = store;
            (s, Some(m))
        }
        None => (steps, None),
    };
    stack.freeze();
    let test = evaluate_exo(&stack, test_set, schedule.batch_size)?;
    Ok(PretrainOutcome {
        stack,
        steps,
        best_step,
        val: val_metrics,
        test,
    })
}

impl ExoStack {
    pub fn to_checkpoint(&self, dataset: DatasetName, seed: u64, metrics: BTreeMap<String, f64>) -> Checkpoint {
        Checkpoint {
            manifest: Manifest {
                version: checkpoint::VERSION,
                variant: format!("exo_{}", self.target),
                dataset: dataset.to_string(),
                seed,
                step: 0,
                metrics: finite_only(metrics),
                exo_target: Some(self.target),
                config: serde_json::Value::Null,
            },
            params: self
                .store
                .entries()
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.clone(),
                })
                .collect(),
            optimizer: None,
        }
    }

    /// Restores a frozen stack.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let target = ckpt
            .manifest
            .exo_target
            .ok_or_else(|| Error::format("checkpoint", "not an exogenous network"))?;
        let dataset: DatasetName = ckpt.manifest.dataset.parse()?;
        let (h, w) = dataset.image_size();
        let mut s = ExoStack::new(target, h, w, 0)?;
        s.store.load_from(&ckpt.named())?;
        s.freeze();
        Ok(s)
    }
}

fn finite_only(m: BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    m.into_iter().filter(|(_, v)| v.is_finite()).collect()
}

// ----------------------------------------------------------------------
// Joint training

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ThinModel,
    pub adam: Adam,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_accuracy: Option<f64>,
}

/// Joint training of everything but the frozen stacks. `on_best` sees the
/// model each time validation accuracy improves (a caller may persist it, so
/// a later divergence still leaves the last good checkpoint behind).
pub fn train(
    mut model: ThinModel,
    train_set: &SampleSet,
    cfg: &ExperimentConfig,
    log: &mut dyn FnMut(&MetricRecord),
    on_best: &mut dyn FnMut(&ThinModel, usize, f64) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = &cfg.schedule;
    let loss_cfg = LossConfig::with_lambda(cfg.lambda)?;
    let probe = model.probe().is_some();
    let (fit, val) = split_validation(train_set, schedule, cfg.seed)?;
    let mut batches = Batches::new(fit.len(), schedule.batch_size, cfg.seed, "shuffle")?;
    let steps = total_steps(schedule, batches.per_epoch());
    let mut adam = Adam::new(schedule.lr);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for step in 1..=steps {
        let batch = fit.batch(batches.next())?;
        let mut g = Graph::new();
        let run = (|| {
            let out = model.forward(&mut g, &batch, true, probe)?;
            let parts = total_loss(&mut g, &out, &batch.labels, &loss_cfg)?;
            let grads = g.backward(parts.total)?;
            model.store.zero_grads();
            g.accumulate_into(&grads, &mut model.store);
            adam.step(&mut model.store)?;
            apply_buffer_updates(&mut g, &mut model.store)?;
            let acc = accuracy(&argmax_rows(g.value(out.z)), &batch.labels);
            let ent = out.g.map(|id| mean_entropy(g.value(id).data(), g.shape(id)[1]));
            Ok(MetricRecord {
                step: step as u64,
                split: "train".into(),
                accuracy: acc,
                loss: g.value(parts.total).item(),
                loss_sup: parts.sup_value,
                loss_sim: parts.sim_value,
                gate_entropy: ent,
            })
        })();
        let rec = run.map_err(|e| diverged(step, e))?;
        log(&rec);
        if let Some(val) = &val {
            if step % schedule.eval_every == 0 || step == steps {
                let ev = evaluate(&model, val, schedule.batch_size, &loss_cfg)?;
                log(&ev.record(step as u64, "val"));
                if best.as_ref().is_none_or(|b| ev.accuracy > b.0) {
                    on_best(&model, step, ev.accuracy)?;
                    best = Some((ev.accuracy, step, model.store.clone()));
                }
            }
        }
    }
    let (best_step, best_val_accuracy) = match best {
        Some((acc, s, store)) => {
            model.store = store;
            (s, Some(acc))
        }
        None => (steps, None),
    };
    Ok(TrainOutcome {
        model,
        adam,
        steps,
        best_step,
        best_val_accuracy,
    })
}

/// Builds the model for `cfg` and trains it.
pub fn build_and_train(
    cfg: &ExperimentConfig,
    train_set: &SampleSet,
    exo: Vec<ExoStack>,
    log: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let model = build_variant(cfg, exo)?;
    train(model, train_set, cfg, log, &mut |_, _, _| Ok(()))
}

// ----------------------------------------------------------------------
// Evaluation

/// Mean Shannon entropy, in nats, of the rows of a `[B×L]` gate.
pub fn mean_entropy(g: &[f64], l: usize) -> f64 {
    let rows = g.len() / l;
    let total: f64 = g
        .chunks(l)
        .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum();
    total / rows.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub loss_sup: f64,
    pub gate_entropy: Option<f64>,
    /// Mean gate vector over the set.
    pub leaf_usage: Option<Vec<f64>>,
    pub mean_abs_cos: Option<f64>,
    /// Per-sample `|cos|` between probe logits, in set order.
    pub abs_cos: Vec<f64>,
}

impl Evaluation {
    pub fn record(&self, step: u64, split: &str) -> MetricRecord {
        MetricRecord {
            step,
            split: split.into(),
            accuracy: self.accuracy,
            loss: self.loss_sup,
            loss_sup: self.loss_sup,
            loss_sim: self.mean_abs_cos,
            gate_entropy: self.gate_entropy,
        }
    }
}

/// Evaluation-mode pass over `set`.
pub fn evaluate(model: &ThinModel, set: &SampleSet, batch: usize, loss_cfg: &LossConfig) -> Result<Evaluation> {
    let k = model.num_classes();
    let probe = model.probe().is_some();
    let mut confusion = vec![vec![0u64; k]; k];
    let (mut n, mut sup, mut ent) = (0usize, 0.0, 0.0);
    let mut usage: Option<Vec<f64>> = None;
    let mut cos = Vec::new();
    let eval_cfg = LossConfig {
        lambda: 0.0,
        ..*loss_cfg
    };
    for b in set.batches(batch) {
        let b = b?;
        if let Some(&bad) = b.labels.iter().find(|&&c| c >= k) {
            return Err(Error::Config(format!("label {bad} outside the model's {k} classes")));
        }
        let mut g = Graph::new();
        let out = model.forward(&mut g, &b, false, probe)?;
        let parts = total_loss(&mut g, &out, &b.labels, &eval_cfg)?;
        sup += parts.sup_value * b.len() as f64;
        cos.extend(parts.per_sample_cos);
        for (p, &t) in argmax_rows(g.value(out.z)).into_iter().zip(&b.labels) {
            confusion[t][p] += 1;
        }
        if let Some(gid) = out.g {
            let gv = g.value(gid);
            let l = gv.shape()[1];
            ent += mean_entropy(gv.data(), l) * b.len() as f64;
            let u = usage.get_or_insert_with(|| vec![0.0; l]);
            for row in gv.data().chunks(l) {
                u.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        n += b.len();
    }
    if n == 0 {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let hits: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let tot: u64 = row.iter().sum();
            if tot == 0 {
                f64::NAN
            } else {
                row[c] as f64 / tot as f64
            }
        })
        .collect();
    let has_gate = usage.is_some();
    Ok(Evaluation {
        samples: n,
        accuracy: hits as f64 / n as f64,
        per_class_accuracy,
        confusion,
        loss_sup: sup / n as f64,
        gate_entropy: has_gate.then(|| ent / n as f64),
        leaf_usage: usage.map(|u| u.into_iter().map(|v| v / n as f64).collect()),
        mean_abs_cos: (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64),
        abs_cos: cos,
    })
}

// ----------------------------------------------------------------------
// Model checkpoints

/// Snapshot of a trained model, its configuration and optionally the
/// optimizer state.
pub fn model_checkpoint(
    model: &ThinModel,
    cfg: &ExperimentConfig,
    step: u64,
    metrics: BTreeMap<String, f64>,
    adam: Option<&Adam>,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        manifest: Manifest {
            version: checkpoint::VERSION,
            variant: cfg.variant.to_string(),
            dataset: cfg.dataset.to_string(),
            seed: cfg.seed,
            step,
            metrics: finite_only(metrics),
            exo_target: None,
            config: serde_json::to_value(cfg)?,
        },
        params: model
            .named_params()
            .into_iter()
            .map(|(name, kind, tensor)| NamedTensor { name, kind, tensor })
            .collect(),
        optimizer: adam.cloned(),
    })
}

/// Rebuilds the model a checkpoint was taken from.
pub fn load_model(ckpt: &Checkpoint) -> Result<(ExperimentConfig, ThinModel)> {
    let cfg: ExperimentConfig = serde_json::from_value(ckpt.manifest.config.clone())?;
    let (h, w) = cfg.dataset.image_size();
    let mut exo = Vec::new();
    for t in ExoTarget::ALL {
        let prefix = format!("exo.{t}.");
        if ckpt.params.iter().any(|p| p.name.starts_with(&prefix)) {
            exo.push(ExoStack::new(*t, h, w, 0)?);
        }
    }
    let mut model = build_variant(&cfg, exo)?;
    model.load_params(&ckpt.named())?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_uniform_gate_is_ln_l() {
        let g = vec![0.125; 16];
        assert!((mean_entropy(&g, 8) - 8f64.ln()).abs() < 1e-12);
        assert_eq!(mean_entropy(&[1.0, 0.0, 0.0, 1.0], 2), 0.0);
    }

    #[test]
    fn batches_drop_the_partial_tail() {
        let mut b = Batches::new(10, 3, 1, "shuffle").unwrap();
        assert_eq!(b.per_epoch(), 3);
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.extend_from_slice(b.next());
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(Batches::new(2, 3, 1, "shuffle").is_err());
    }
}
