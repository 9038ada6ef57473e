//! The multi-run experiments: architecture ladder, gating comparison and the
//! λ sweep.

use anyhow::Result;

use thin_core::config::{DatasetName, ExperimentConfig, GatingChoice, Variant};

use crate::runs::{Harness, RunResult, RunTemplate, COS_BINS};
use crate::stats::Histogram;
use crate::table::{Check, GroupSummary, ResultTable};

/// Reference ladder accuracies (%), in `Variant::ALL` order.
pub const LADDER_MNIST_R: [f64; 6] = [96.83, 96.81, 97.31, 98.07, 98.06, 98.26];
pub const LADDER_DSPRITES: [f64; 6] = [96.53, 92.68, 95.91, 98.1, 98.43, 98.5];
/// Reference MNIST-RS accuracies (%) per gate input.
pub const GATING_MNIST_RS: [(&str, GatingChoice, f64); 4] = [
    ("digit", GatingChoice::Endogenous, 96.68),
    ("scale", GatingChoice::ExogenousScale, 97.22),
    ("rotation", GatingChoice::ExogenousRotation, 97.4),
    ("rotation+scale", GatingChoice::ExoConcat, 97.63),
];

pub const THIN_TARGET_MNIST_R: f64 = 98.26;
pub const THIN_TOLERANCE_MNIST_R: f64 = 0.8;
pub const THIN_FLOOR_DSPRITES: f64 = 97.5;
pub const THIN_GAIN_MNIST_R: f64 = 1.0;
pub const EXO_GAIN_DSPRITES: f64 = 1.5;
pub const ORACLE_PARITY: f64 = 0.5;
pub const CONCAT_GAIN_MNIST_RS: f64 = 0.5;
pub const LAMBDA_GAIN_MNIST_R: f64 = 0.05;
pub const LAMBDA_GAIN_DSPRITES: f64 = 0.15;
/// λ values at or above this are expected to hurt.
pub const STRONG_LAMBDA: f64 = 0.5;
pub const COS_SHRINK: f64 = 2.0;

fn collect(results: Vec<Result<RunResult>>) -> Result<Vec<RunResult>> {
    results.into_iter().collect()
}

fn seeds_text(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

/// Complete-group means for `labels`, or `None` if any is missing.
fn means(t: &ResultTable, labels: &[&str]) -> Option<Vec<f64>> {
    labels.iter().map(|l| t.group(l)?.complete_mean()).collect()
}

fn show(labels: &[&str], m: &Option<Vec<f64>>) -> String {
    match m {
        Some(v) => labels
            .iter()
            .zip(v)
            .map(|(l, x)| format!("{l} {x:.2}"))
            .collect::<Vec<_>>()
            .join(", "),
        None => "a run failed".into(),
    }
}

fn ordering(t: &ResultTable, labels: &[&str], last_weak: bool) -> Check {
    let m = means(t, labels);
    let passed = m.as_ref().map(|v| {
        v.windows(2).enumerate().all(|(i, w)| {
            if last_weak && i + 2 == v.len() {
                w[0] <= w[1]
            } else {
                w[0] < w[1]
            }
        })
    });
    let name = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                l.to_string()
            } else if last_weak && i + 1 == labels.len() {
                format!(" <= {l}")
            } else {
                format!(" < {l}")
            }
        })
        .collect::<String>();
    Check::asserted(name, passed, show(labels, &m))
}

fn gain(t: &ResultTable, hi: &str, lo: &str, min: f64) -> Check {
    let m = means(t, &[hi, lo]);
    let d = m.as_ref().map(|v| v[0] - v[1]);
    Check::asserted(
        format!("{hi} - {lo} >= {min}"),
        d.map(|d| d >= min),
        d.map_or("a run failed".into(), |d| format!("{d:+.3} points")),
    )
}

/// All six variants of the architecture ladder over `seeds`.
pub fn ladder(h: &Harness, dataset: DatasetName, seeds: &[u64], tpl: &RunTemplate) -> Result<ResultTable> {
    let cfgs: Vec<ExperimentConfig> = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| tpl.config(dataset, v, s)))
        .collect();
    let rows = collect(h.run_many(&cfgs))?;
    let reference = match dataset {
        DatasetName::MnistR => Some(LADDER_MNIST_R),
        DatasetName::DspritesSynth => Some(LADDER_DSPRITES),
        DatasetName::MnistRs => None,
    };
    let mut t = ResultTable::new(
        format!("ladder-{dataset}"),
        format!("Architecture ladder on {dataset}, seeds {}", seeds_text(seeds)),
        Vec::new(),
    );
    for (i, v) in Variant::ALL.iter().enumerate() {
        let group: Vec<&RunResult> = rows.iter().filter(|r| r.variant == *v).collect();
        t.groups
            .push(GroupSummary::new(v.as_str(), &group, reference.map(|r| r[i])));
    }
    match dataset {
        DatasetName::MnistR => {
            t.checks.push(ordering(
                &t,
                &["baseline", "tree_gated", "exo_tree_gated", "thin"],
                true,
            ));
            t.checks.push(gain(&t, "thin", "baseline", THIN_GAIN_MNIST_R));
            let thin = t.group("thin").and_then(GroupSummary::complete_mean);
            t.checks.push(Check::asserted(
                format!("|thin - {THIN_TARGET_MNIST_R}| <= {THIN_TOLERANCE_MNIST_R}"),
                thin.map(|a| (a - THIN_TARGET_MNIST_R).abs() <= THIN_TOLERANCE_MNIST_R),
                thin.map_or("a run failed".into(), |a| format!("thin {a:.2}")),
            ));
            let m = means(&t, &["oracle", "exo_tree_gated"]);
            let d = m.as_ref().map(|v| (v[0] - v[1]).abs());
            t.checks.push(Check::asserted(
                format!("|oracle - exo_tree_gated| <= {ORACLE_PARITY}"),
                d.map(|d| d <= ORACLE_PARITY),
                show(&["oracle", "exo_tree_gated"], &m),
            ));
        }
        DatasetName::DspritesSynth => {
            let thin = t.group("thin").and_then(GroupSummary::complete_mean);
            t.checks.push(Check::asserted(
                format!("thin >= {THIN_FLOOR_DSPRITES}"),
                thin.map(|a| a >= THIN_FLOOR_DSPRITES),
                thin.map_or("a run failed".into(), |a| format!("thin {a:.2}")),
            ));
            t.checks
                .push(gain(&t, "exo_tree_gated", "tree_gated", EXO_GAIN_DSPRITES));
            let m = means(&t, &["simple_ensemble", "baseline"]);
            t.checks.push(Check::reported(
                "simple_ensemble < baseline",
                m.as_ref().map(|v| v[0] < v[1]),
                show(&["simple_ensemble", "baseline"], &m),
            ));
        }
        DatasetName::MnistRs => {}
    }
    t.rows = rows;
    Ok(t)
}

/// Tree-gated ensembles on MNIST-RS that differ only in the gate input.
pub fn gating_compare(h: &Harness, seeds: &[u64], tpl: &RunTemplate) -> Result<ResultTable> {
    let cfgs: Vec<ExperimentConfig> = GATING_MNIST_RS
        .iter()
        .flat_map(|&(_, choice, _)| {
            seeds.iter().map(move |&s| ExperimentConfig {
                gating: Some(choice),
                ..tpl.config(DatasetName::MnistRs, Variant::TreeGated, s)
            })
        })
        .collect();
    let rows = collect(h.run_many(&cfgs))?;
    let mut t = ResultTable::new(
        "gating-mnist_rs",
        format!("Gate input comparison on mnist_rs, seeds {}", seeds_text(seeds)),
        Vec::new(),
    );
    for (i, &(label, _, reference)) in GATING_MNIST_RS.iter().enumerate() {
        let group: Vec<&RunResult> = rows[i * seeds.len()..(i + 1) * seeds.len()].iter().collect();
        t.groups.push(GroupSummary::new(label, &group, Some(reference)));
    }
    let labels: Vec<&str> = GATING_MNIST_RS.iter().map(|g| g.0).collect();
    t.checks.push(ordering(&t, &labels, false));
    t.checks.push(gain(&t, "rotation+scale", "digit", CONCAT_GAIN_MNIST_RS));
    t.rows = rows;
    Ok(t)
}

pub fn lambda_label(lambda: f64) -> String {
    format!("lambda={lambda}")
}

/// One configuration per (λ, seed); λ = 0 is the exogenous tree-gated model.
pub fn sweep_configs(dataset: DatasetName, lambdas: &[f64], seeds: &[u64], tpl: &RunTemplate) -> Vec<ExperimentConfig> {
    lambdas
        .iter()
        .flat_map(|&l| {
            seeds.iter().map(move |&s| {
                if l == 0.0 {
                    tpl.config(dataset, Variant::ExoTreeGated, s)
                } else {
                    ExperimentConfig {
                        lambda: l,
                        ..tpl.config(dataset, Variant::Thin, s)
                    }
                }
            })
        })
        .collect()
}

/// The λ sweep with a pooled `|cos|` histogram per λ.
pub fn sweep_lambda(
    h: &Harness,
    dataset: DatasetName,
    lambdas: &[f64],
    seeds: &[u64],
    tpl: &RunTemplate,
) -> Result<ResultTable> {
    let rows = collect(h.run_many(&sweep_configs(dataset, lambdas, seeds, tpl)))?;
    let mut t = ResultTable::new(
        format!("sweep-lambda-{dataset}"),
        format!("Dispelling weight sweep on {dataset}, seeds {}", seeds_text(seeds)),
        Vec::new(),
    );
    let mut pooled = serde_json::Map::new();
    for (i, &l) in lambdas.iter().enumerate() {
        let group: Vec<&RunResult> = rows[i * seeds.len()..(i + 1) * seeds.len()].iter().collect();
        t.groups.push(GroupSummary::new(lambda_label(l), &group, None));
        let mut hist = Histogram::new(&[], COS_BINS, 0.0, 1.0);
        for r in &group {
            if let Some(rh) = &r.cos_histogram {
                hist.absorb(rh);
            }
        }
        pooled.insert(
            lambda_label(l),
            serde_json::json!({ "edges": hist.edges(), "counts": hist.counts, "samples": hist.total() }),
        );
    }
    t.extra = serde_json::json!({ "cos_histograms": pooled });

    let base = lambda_label(0.0);
    let has = |l: f64| lambdas.contains(&l);
    if has(0.0) {
        let min_gain = match dataset {
            DatasetName::MnistR => Some(LAMBDA_GAIN_MNIST_R),
            DatasetName::DspritesSynth => Some(LAMBDA_GAIN_DSPRITES),
            DatasetName::MnistRs => None,
        };
        if let (Some(min), true) = (min_gain, has(0.005)) {
            t.checks.push(gain(&t, &lambda_label(0.005), &base, min));
        }
        let strong: Vec<String> = lambdas
            .iter()
            .filter(|&&l| l >= STRONG_LAMBDA)
            .map(|&l| lambda_label(l))
            .collect();
        if !strong.is_empty() {
            let b = t.group(&base).and_then(GroupSummary::complete_mean);
            let worse: Vec<Option<f64>> = strong
                .iter()
                .map(|s| t.group(s).and_then(GroupSummary::complete_mean))
                .collect();
            let passed = b.map(|b| worse.iter().any(|w| w.is_some_and(|w| w < b)));
            let detail = match b {
                Some(b) => format!(
                    "{base} {b:.2}; {}",
                    strong
                        .iter()
                        .zip(&worse)
                        .map(|(s, w)| format!("{s} {}", w.map_or("failed".into(), |w| format!("{w:.2}"))))
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
                None => "a run failed".into(),
            };
            t.checks.push(Check::asserted(
                format!("some lambda >= {STRONG_LAMBDA} below {base}"),
                passed,
                detail,
            ));
        }
        if has(0.01) {
            let med = |l: &str| t.group(l).filter(|g| g.ok == g.runs).and_then(|g| g.median_abs_cos);
            let (a, b) = (med(&lambda_label(0.01)), med(&base));
            t.checks.push(Check::asserted(
                format!("median |cos| at lambda=0.01 <= {base} / {COS_SHRINK}"),
                a.zip(b).map(|(a, b)| a * COS_SHRINK <= b),
                match a.zip(b) {
                    Some((a, b)) => format!("{a:.4} vs {b:.4}"),
                    None => "a run failed".into(),
                },
            ));
        }
    }
    t.rows = rows;
    Ok(t)
}
