//! Gradient-check battery over every tape operation, every layer, and a
//! complete model loss.

use rand::distributions::{Distribution, Uniform};
use serde::Serialize;

use crate::config::{DatasetName, ExoTarget, ExperimentConfig, Variant};
use crate::data::{Batch, LabeledImage};
use crate::error::Result;
use crate::gradcheck::{gradcheck, gradcheck_params, GradcheckReport};
use crate::graph::{Fault, Graph, NodeId, Padding};
use crate::loss::{total_loss, LossConfig};
use crate::model::{build_variant, ExoStack};
use crate::nn::{BatchNormLayer, Conv2dLayer, DenseLayer, MlpHead, RepresentationNet};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::tree::GateTree;

pub const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-6;
pub const LAYER_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;
/// Random inputs per operation.
pub const TRIALS: usize = 10;
/// Parameter elements sampled from the full model.
pub const MODEL_ELEMENTS: usize = 100;

#[derive(Clone, Debug, Serialize)]
pub struct BatteryEntry {
    pub name: String,
    pub level: &'static str,
    pub passed: bool,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    #[serde(skip)]
    pub report: GradcheckReport,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BatteryReport {
    pub entries: Vec<BatteryEntry>,
}

impl BatteryReport {
    fn push(&mut self, level: &'static str, report: GradcheckReport) {
        self.entries.push(BatteryEntry {
            name: report.name.clone(),
            level,
            passed: report.passed(),
            checked: report.checked,
            skipped: report.skipped,
            max_rel_error: report.max_rel_error,
            tol: report.tol,
            report,
        });
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BatteryEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    /// One aligned line per entry.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:<6} {:>7} {:>7} {:>12} {:>8}  result\n",
            "check", "level", "checked", "skipped", "max rel err", "tol"
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{:<28} {:<6} {:>7} {:>7} {:>12.3e} {:>8.0e}  {}\n",
                e.name,
                e.level,
                e.checked,
                e.skipped,
                e.max_rel_error,
                e.tol,
                if e.passed { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut Rng) -> Tensor {
    let d = Uniform::new(lo, hi);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(r)).collect()).expect("shape and data agree")
}

/// Contracts `y` with fixed random weights so every output element matters.
fn contract(g: &mut Graph, y: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.constant(weights.clone())?;
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

/// Runs `TRIALS` checks of a single-input function on fresh random inputs.
fn op_trials<F>(name: &str, shape: &[usize], lo: f64, hi: f64, seed: u64, f: F) -> GradcheckReport
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut r = rng::stream(seed, &format!("battery.{name}"));
    let mut total: Option<GradcheckReport> = None;
    for _ in 0..TRIALS {
        let x = uniform(shape, lo, hi, &mut r);
        let rep = gradcheck(&f, &x, H, OP_TOL);
        match &mut total {
            None => total = Some(rep),
            Some(t) => t.merge(rep),
        }
    }
    total.expect("at least one trial").named(name)
}

/// Elementwise, reduction, linear-algebra and fused operations.
pub fn op_checks(seed: u64) -> Vec<GradcheckReport> {
    let mut out = Vec::new();
    let mut r = rng::stream(seed, "battery.weights");
    let w34 = uniform(&[3, 4], -1.0, 1.0, &mut r);

    type Unary = fn(&mut Graph, NodeId) -> Result<NodeId>;
    let unary: [(&str, Unary, f64, f64); 7] = [
        ("neg", |g, x| g.neg(x), -2.0, 2.0),
        ("abs", |g, x| g.abs(x), -2.0, 2.0),
        ("exp", |g, x| g.exp(x), -2.0, 2.0),
        ("log", |g, x| g.log(x), 0.2, 3.0),
        ("sigmoid", |g, x| g.sigmoid(x), -4.0, 4.0),
        ("relu", |g, x| g.relu(x), -2.0, 2.0),
        ("sqrt", |g, x| g.sqrt(x), 0.2, 3.0),
    ];
    for (name, op, lo, hi) in unary {
        let w = w34.clone();
        out.push(op_trials(name, &[3, 4], lo, hi, seed, move |g, x| {
            let y = op(g, x)?;
            contract(g, y, &w)
        }));
    }

    type Binary = fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>;
    let binary: [(&str, Binary); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("div", |g, a, b| g.div(a, b)),
    ];
    for (name, op) in binary {
        // left operand [3,4], right operand broadcast from [4]; keep the
        // right side away from zero for division
        let other = uniform(&[4], 0.5, 1.5, &mut r);
        let lhs = uniform(&[3, 4], -1.0, 1.0, &mut r);
        let w = w34.clone();
        let (o1, w1) = (other.clone(), w.clone());
        out.push(op_trials(
            &format!("{name}.lhs"),
            &[3, 4],
            -1.0,
            1.0,
            seed,
            move |g, x| {
                let b = g.constant(o1.clone())?;
                let y = op(g, x, b)?;
                contract(g, y, &w1)
            },
        ));
        out.push(op_trials(
            &format!("{name}.rhs_broadcast"),
            &[4],
            0.5,
            1.5,
            seed,
            move |g, x| {
                let a = g.constant(lhs.clone())?;
                let y = op(g, a, x)?;
                contract(g, y, &w)
            },
        ));
    }

    out.push(op_trials("scale", &[3, 4], -1.0, 1.0, seed, {
        let w = w34.clone();
        move |g, x| {
            let y = g.scale(x, -1.7)?;
            contract(g, y, &w)
        }
    }));
    out.push(op_trials("sum", &[3, 4], -1.0, 1.0, seed, |g, x| g.sum(x, None)));
    let w4 = uniform(&[4], -1.0, 1.0, &mut r);
    let w3 = uniform(&[3], -1.0, 1.0, &mut r);
    out.push(op_trials("sum.axis0", &[3, 4], -1.0, 1.0, seed, {
        let w = w4.clone();
        move |g, x| {
            let y = g.sum(x, Some(0))?;
            contract(g, y, &w)
        }
    }));
    out.push(op_trials("mean.axis1", &[3, 4], -1.0, 1.0, seed, {
        let w = w3.clone();
        move |g, x| {
            let y = g.mean(x, Some(1))?;
            contract(g, y, &w)
        }
    }));
    out.push(op_trials("max.axis1", &[3, 4], -1.0, 1.0, seed, {
        let w = w3.clone();
        move |g, x| {
            let y = g.max(x, Some(1))?;
            contract(g, y, &w)
        }
    }));

    let b42 = uniform(&[4, 2], -1.0, 1.0, &mut r);
    let w32 = uniform(&[3, 2], -1.0, 1.0, &mut r);
    out.push(op_trials("matmul.lhs", &[3, 4], -1.0, 1.0, seed, {
        let (b, w) = (b42.clone(), w32.clone());
        move |g, x| {
            let bn = g.constant(b.clone())?;
            let y = g.matmul(x, bn)?;
            contract(g, y, &w)
        }
    }));
    let a34 = uniform(&[3, 4], -1.0, 1.0, &mut r);
    out.push(op_trials("matmul.rhs", &[4, 2], -1.0, 1.0, seed, {
        let (a, w) = (a34.clone(), w32.clone());
        move |g, x| {
            let an = g.constant(a.clone())?;
            let y = g.matmul(an, x)?;
            contract(g, y, &w)
        }
    }));
    let lw = uniform(&[2, 4], -1.0, 1.0, &mut r);
    let lb = uniform(&[2], -1.0, 1.0, &mut r);
    out.push(op_trials("linear.x", &[3, 4], -1.0, 1.0, seed, {
        let (lw, lb, w) = (lw.clone(), lb.clone(), w32.clone());
        move |g, x| {
            let wn = g.constant(lw.clone())?;
            let bn = g.constant(lb.clone())?;
            let y = g.linear(x, wn, bn)?;
            contract(g, y, &w)
        }
    }));
    out.push(op_trials("linear.weight", &[2, 4], -1.0, 1.0, seed, {
        let (a, lb, w) = (a34.clone(), lb.clone(), w32.clone());
        move |g, x| {
            let an = g.constant(a.clone())?;
            let bn = g.constant(lb.clone())?;
            let y = g.linear(an, x, bn)?;
            contract(g, y, &w)
        }
    }));
    out.push(op_trials("linear.bias", &[2], -1.0, 1.0, seed, {
        let (a, lw, w) = (a34.clone(), lw.clone(), w32.clone());
        move |g, x| {
            let an = g.constant(a.clone())?;
            let wn = g.constant(lw.clone())?;
            let y = g.linear(an, wn, x)?;
            contract(g, y, &w)
        }
    }));
    let w43 = uniform(&[4, 3], -1.0, 1.0, &mut r);
    out.push(op_trials("transpose", &[3, 4], -1.0, 1.0, seed, {
        let w = w43.clone();
        move |g, x| {
            let y = g.transpose(x)?;
            contract(g, y, &w)
        }
    }));
    let w26 = uniform(&[2, 6], -1.0, 1.0, &mut r);
    out.push(op_trials("reshape", &[3, 4], -1.0, 1.0, seed, {
        let w = w26.clone();
        move |g, x| {
            let y = g.reshape(x, vec![2, 6])?;
            contract(g, y, &w)
        }
    }));
    let c32 = uniform(&[3, 2], -1.0, 1.0, &mut r);
    let w36 = uniform(&[3, 6], -1.0, 1.0, &mut r);
    out.push(op_trials("concat", &[3, 4], -1.0, 1.0, seed, {
        let (c, w) = (c32.clone(), w36.clone());
        move |g, x| {
            let cn = g.constant(c.clone())?;
            let y = g.concat(&[x, cn])?;
            contract(g, y, &w)
        }
    }));
    out.push(op_trials("column", &[3, 4], -1.0, 1.0, seed, {
        let w = w3.clone();
        move |g, x| {
            let y = g.column(x, 2)?;
            contract(g, y, &w)
        }
    }));

    for (name, stride, pad, oh) in [
        ("conv2d.same", 1, Padding::Same, 5),
        ("conv2d.valid", 1, Padding::Valid, 3),
        ("conv2d.stride2", 2, Padding::Same, 3),
    ] {
        let k = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let kb = uniform(&[3], -1.0, 1.0, &mut r);
        let xin = uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r);
        let w = uniform(&[2, 3, oh, oh], -1.0, 1.0, &mut r);
        out.push(op_trials(&format!("{name}.x"), &[2, 2, 5, 5], -1.0, 1.0, seed, {
            let (k, kb, w) = (k.clone(), kb.clone(), w.clone());
            move |g, x| {
                let kn = g.constant(k.clone())?;
                let bn = g.constant(kb.clone())?;
                let y = g.conv2d(x, kn, bn, stride, pad)?;
                contract(g, y, &w)
            }
        }));
        out.push(op_trials(&format!("{name}.kernel"), &[3, 2, 3, 3], -1.0, 1.0, seed, {
            let (xin, kb, w) = (xin.clone(), kb.clone(), w.clone());
            move |g, k| {
                let xn = g.constant(xin.clone())?;
                let bn = g.constant(kb.clone())?;
                let y = g.conv2d(xn, k, bn, stride, pad)?;
                contract(g, y, &w)
            }
        }));
    }

    let wp = uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
    out.push(op_trials(
        "maxpool2d.odd",
        &[2, 2, 5, 5],
        -1.0,
        1.0,
        seed,
        move |g, x| {
            let y = g.maxpool2d(x)?;
            contract(g, y, &wp)
        },
    ));

    let gamma = uniform(&[4], 0.5, 1.5, &mut r);
    let beta = uniform(&[4], -0.5, 0.5, &mut r);
    let w54 = uniform(&[5, 4], -1.0, 1.0, &mut r);
    out.push(op_trials("batch_norm.train.x", &[5, 4], -1.0, 1.0, seed, {
        let (ga, be, w) = (gamma.clone(), beta.clone(), w54.clone());
        move |g, x| {
            let gn = g.constant(ga.clone())?;
            let bn = g.constant(be.clone())?;
            let (y, _) = g.batch_norm(x, gn, bn, None, 1e-5)?;
            contract(g, y, &w)
        }
    }));
    let xb = uniform(&[5, 4], -1.0, 1.0, &mut r);
    out.push(op_trials("batch_norm.train.gamma", &[4], 0.5, 1.5, seed, {
        let (xb, be, w) = (xb.clone(), beta.clone(), w54.clone());
        move |g, ga| {
            let xn = g.constant(xb.clone())?;
            let bn = g.constant(be.clone())?;
            let (y, _) = g.batch_norm(xn, ga, bn, None, 1e-5)?;
            contract(g, y, &w)
        }
    }));
    out.push(op_trials("batch_norm.eval.x", &[5, 4], -1.0, 1.0, seed, {
        let (ga, be, w) = (gamma.clone(), beta.clone(), w54.clone());
        move |g, x| {
            let gn = g.constant(ga.clone())?;
            let bn = g.constant(be.clone())?;
            let (rm, rv) = ([0.1, -0.2, 0.0, 0.3], [1.2, 0.8, 1.0, 0.5]);
            let (y, _) = g.batch_norm(x, gn, bn, Some((&rm, &rv)), 1e-5)?;
            contract(g, y, &w)
        }
    }));
    out.push(op_trials("batch_norm.conv.x", &[3, 2, 2, 2], -1.0, 1.0, seed, {
        let ga = Tensor::vector(gamma.data()[..2].to_vec());
        let be = Tensor::vector(beta.data()[..2].to_vec());
        let w = uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut r);
        move |g, x| {
            let gn = g.constant(ga.clone())?;
            let bn = g.constant(be.clone())?;
            let (y, _) = g.batch_norm(x, gn, bn, None, 1e-5)?;
            contract(g, y, &w)
        }
    }));

    out.push(op_trials("softmax_cross_entropy", &[3, 4], -2.0, 2.0, seed, |g, x| {
        g.softmax_cross_entropy(x, &[0, 3, 1])
    }));

    let w38 = uniform(&[3, 8], -1.0, 1.0, &mut r);
    out.push(op_trials(
        "leaf_probabilities",
        &[3, 7],
        0.05,
        0.95,
        seed,
        move |g, d| {
            let y = g.leaf_probabilities(d, 3)?;
            contract(g, y, &w38)
        },
    ));

    let experts: Vec<Tensor> = (0..4).map(|_| uniform(&[3, 2], -1.0, 1.0, &mut r)).collect();
    let gate = uniform(&[3, 4], 0.0, 1.0, &mut r);
    out.push(op_trials("mixture.gate", &[3, 4], 0.0, 1.0, seed, {
        let (ex, w) = (experts.clone(), w32.clone());
        move |g, gt| {
            let ids = ex.iter().map(|e| g.constant(e.clone())).collect::<Result<Vec<_>>>()?;
            let y = g.mixture(&ids, gt)?;
            contract(g, y, &w)
        }
    }));
    out.push(op_trials("mixture.expert", &[3, 2], -1.0, 1.0, seed, {
        let (ex, w) = (experts, w32);
        move |g, x| {
            let mut ids = vec![x];
            for e in &ex[1..] {
                ids.push(g.constant(e.clone())?);
            }
            let gn = g.constant(gate.clone())?;
            let y = g.mixture(&ids, gn)?;
            contract(g, y, &w)
        }
    }));
    out
}

fn layer_check<F>(name: &str, store: &mut ParamStore, mut f: F) -> GradcheckReport
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let ids = store.trainable_ids();
    gradcheck_params(&mut f, store, &ids, H, LAYER_TOL, None).named(name)
}

/// Parameter gradients of each layer type on random inputs.
pub fn layer_checks(seed: u64) -> Vec<GradcheckReport> {
    let mut r = rng::stream(seed, "battery.layers");
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let dense = DenseLayer::new(&mut s, "dense", 5, 3, &mut r);
    let x = uniform(&[4, 5], -1.0, 1.0, &mut r);
    let w = uniform(&[4, 3], -1.0, 1.0, &mut r);
    out.push(layer_check("layer.dense", &mut s, |g, st| {
        let xn = g.constant(x.clone())?;
        let y = dense.forward(g, st, xn)?;
        contract(g, y, &w)
    }));

    let mut s = ParamStore::new();
    let conv = Conv2dLayer::new(&mut s, "conv", 1, 2, 3, 1, Padding::Same, &mut r).expect("odd kernel");
    let x = uniform(&[2, 1, 4, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r);
    out.push(layer_check("layer.conv2d", &mut s, |g, st| {
        let xn = g.constant(x.clone())?;
        let y = conv.forward(g, st, xn)?;
        contract(g, y, &w)
    }));

    let mut s = ParamStore::new();
    let bn = BatchNormLayer::new(&mut s, "bn", 3);
    for id in s.trainable_ids() {
        let v = uniform(s.get(id).shape(), 0.5, 1.5, &mut r);
        s.set_data(id, v.data()).expect("same size");
    }
    let x = uniform(&[6, 3], -1.0, 1.0, &mut r);
    let w = uniform(&[6, 3], -1.0, 1.0, &mut r);
    out.push(layer_check("layer.batch_norm", &mut s, |g, st| {
        let xn = g.constant(x.clone())?;
        let y = bn.forward(g, st, xn, true)?;
        contract(g, y, &w)
    }));

    let mut s = ParamStore::new();
    let head = MlpHead::new(&mut s, "head", &[6, 5, 3], &mut r).expect("valid widths");
    let x = uniform(&[4, 6], -1.0, 1.0, &mut r);
    out.push(layer_check("layer.mlp_head", &mut s, |g, st| {
        let xn = g.constant(x.clone())?;
        let y = head.forward(g, st, xn, true)?;
        g.softmax_cross_entropy(y, &[0, 2, 1, 1])
    }));

    let mut s = ParamStore::new();
    let net = RepresentationNet::new(&mut s, "repr", 6, 6, &mut r).expect("valid net");
    let x = uniform(&[3, 1, 6, 6], 0.0, 1.0, &mut r);
    let w = uniform(&[3, net.output_dim()], -1.0, 1.0, &mut r);
    out.push(layer_check("layer.representation", &mut s, |g, st| {
        let xn = g.constant(x.clone())?;
        let y = net.forward(g, st, xn, true)?;
        contract(g, y, &w)
    }));

    let mut s = ParamStore::new();
    let tree = GateTree::new(&mut s, "gate", 3, 5, &mut r).expect("valid tree");
    let x = uniform(&[4, 5], -2.0, 2.0, &mut r);
    let w = uniform(&[4, 8], -1.0, 1.0, &mut r);
    out.push(layer_check("layer.gate_tree", &mut s, |g, st| {
        let xn = g.constant(x.clone())?;
        let y = tree.leaf_probabilities(g, st, xn)?;
        contract(g, y, &w)
    }));
    out
}

/// Four 28×28 images with varied content and rotation labels.
pub fn synthetic_digit_batch(seed: u64, n: usize) -> Result<Batch> {
    let mut r = rng::stream(seed, "battery.images");
    let samples = (0..n)
        .map(|i| {
            let px = uniform(&[1, 28, 28], 0.0, 1.0, &mut r);
            let deg = -80.0 + 37.0 * i as f64;
            LabeledImage {
                pixels: px,
                task_label: (3 * i + 1) % 10,
                rotation_class: Some(ExoTarget::Rotation.class_of(deg)),
                scale_class: None,
                rotation_deg: Some(deg),
                scale: None,
            }
        })
        .collect::<Vec<_>>();
    Batch::from_samples(&samples)
}

/// Full training loss of a randomly initialized model, checked on a sample
/// of its trainable parameters.
pub fn model_check(seed: u64, variant: Variant, lambda: f64) -> Result<GradcheckReport> {
    let mut cfg = ExperimentConfig::new(DatasetName::MnistR, variant, seed);
    cfg.lambda = lambda;
    let exo = ExoStack::new(ExoTarget::Rotation, 28, 28, seed)?;
    let mut model = build_variant(&cfg, vec![exo])?;
    let batch = synthetic_digit_batch(seed, 4)?;
    let loss_cfg = LossConfig::with_lambda(lambda)?;
    let probe = model.probe().is_some();
    let mut store = std::mem::take(&mut model.store);
    let ids = store.trainable_ids();
    let rep = gradcheck_params(
        |g, st| {
            let out = model.forward_with(st, g, &batch, true, probe)?;
            Ok(total_loss(g, &out, &batch.labels, &loss_cfg)?.total)
        },
        &mut store,
        &ids,
        H,
        MODEL_TOL,
        Some((MODEL_ELEMENTS, seed)),
    );
    model.store = store;
    Ok(rep.named(format!("model.{variant}")))
}

/// Every check. The model-level entry uses THIN with a large λ so the
/// dispelling term carries real gradient.
pub fn run_battery(seed: u64) -> BatteryReport {
    let mut report = BatteryReport::default();
    for r in op_checks(seed) {
        report.push("op", r);
    }
    for r in layer_checks(seed) {
        report.push("layer", r);
    }
    let model = model_check(seed, Variant::Thin, 0.5).unwrap_or_else(|e| {
        let mut r = GradcheckReport::new("model.thin", MODEL_TOL);
        r.error = Some(e.to_string());
        r
    });
    report.push("model", model);
    report
}

/// `Σ σ(x)` checked with a sign-flipped sigmoid backward rule. A working
/// checker reports failure.
pub fn negative_control(seed: u64) -> GradcheckReport {
    let mut r = rng::stream(seed, "battery.negative");
    let x = uniform(&[3, 4], -2.0, 2.0, &mut r);
    gradcheck(
        |g, x| {
            g.inject_fault(Fault::FlipSigmoidBackward);
            let y = g.sigmoid(x)?;
            g.sum(y, None)
        },
        &x,
        H,
        OP_TOL,
    )
    .named("negative_control.sigmoid_flip")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for r in op_checks(5) {
            assert!(r.passed(), "{}: {r:?}", r.name);
        }
    }

    #[test]
    fn every_layer_passes() {
        for r in layer_checks(5) {
            assert!(r.passed(), "{}: {r:?}", r.name);
        }
    }

    #[test]
    fn flipped_sigmoid_is_caught() {
        let r = negative_control(1);
        assert!(!r.passed());
        assert!(!r.failures.is_empty());
    }
}
