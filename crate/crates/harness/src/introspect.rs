//! Exports for inspecting a trained model: the `|cos|` histogram, what each
//! tree node routes, leaf usage and raw endogenous embeddings.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use thin_core::config::ExoTarget;
use thin_core::data::{SampleSet, Split};
use thin_core::loss::LossConfig;
use thin_core::model::ThinModel;
use thin_core::train::evaluate;
use thin_core::Graph;

use crate::runs::{cos_export, split_of, write_json, Harness, COS_BINS};
use crate::stats::{self, Histogram};

pub const TOP_K: usize = 16;
const BATCH: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSample {
    pub index: usize,
    pub reach: f64,
}

/// Routing statistics of one internal node. Node `n` has children `2n + 1`
/// (left) and `2n + 2` (right).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node: usize,
    pub depth: usize,
    /// Mean probability of reaching the node.
    pub mean_reach: f64,
    /// Samples most likely to reach the node; ties go to the lower index.
    pub top: Vec<RankedSample>,
    pub left_mass: f64,
    pub right_mass: f64,
    /// Reach-weighted mean exogenous value of the samples routed here.
    pub mean_exo: Option<f64>,
    pub left_mean_exo: Option<f64>,
    pub right_mean_exo: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafUsage {
    pub usage: Vec<f64>,
    /// Entropy of the mean usage, in nats.
    pub usage_entropy: f64,
    /// Mean per-sample gate entropy, in nats.
    pub mean_gate_entropy: Option<f64>,
    /// `ln L`, the bound on both entropies.
    pub max_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrospectReport {
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub split: String,
    pub samples: usize,
    pub exo_variable: ExoTarget,
    pub median_abs_cos: Option<f64>,
    pub mean_abs_cos: Option<f64>,
    /// `|left_mean_exo − right_mean_exo|` at the root.
    pub root_exo_gap: Option<f64>,
    pub leaf_usage_entropy: Option<f64>,
    pub files: Vec<String>,
}

struct Pass {
    gate: Option<Vec<Vec<f64>>>,
    exo: Vec<Option<f64>>,
    labels: Vec<usize>,
    rotation: Vec<Option<f64>>,
    scale: Vec<Option<f64>>,
    embeddings: Vec<Vec<f64>>,
}

fn forward_pass(model: &ThinModel, set: &SampleSet, exo: ExoTarget, embed_limit: usize) -> Result<Pass> {
    let mut p = Pass {
        gate: model.tree().map(|_| Vec::new()),
        exo: Vec::new(),
        labels: Vec::new(),
        rotation: Vec::new(),
        scale: Vec::new(),
        embeddings: Vec::new(),
    };
    for batch in set.batches(BATCH) {
        let batch = batch?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, false, false)?;
        if let (Some(rows), Some(id)) = (p.gate.as_mut(), out.g) {
            let v = g.value(id);
            rows.extend(v.data().chunks(v.shape()[1]).map(<[f64]>::to_vec));
        }
        let need = embed_limit.saturating_sub(p.embeddings.len()).min(batch.len());
        if need > 0 {
            let h = g.value(out.h_endo);
            p.embeddings
                .extend(h.data().chunks(h.shape()[1]).take(need).map(<[f64]>::to_vec));
        }
        p.exo.extend(match exo {
            ExoTarget::Rotation => &batch.rotation_deg,
            ExoTarget::Scale => &batch.scale,
        });
        p.labels.extend(&batch.labels);
        p.rotation.extend(&batch.rotation_deg);
        p.scale.extend(&batch.scale);
    }
    Ok(p)
}

fn weighted_mean(values: &[Option<f64>], weights: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (v, w) in values.iter().zip(weights) {
        if let Some(v) = v {
            num += w * v;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Per-node statistics from per-sample leaf probabilities of a depth-`depth` tree.
pub fn node_stats(gate: &[Vec<f64>], exo: &[Option<f64>], depth: usize) -> Vec<NodeStats> {
    let n = gate.len().max(1) as f64;
    let mut out = Vec::new();
    for node in 0..(1usize << depth) - 1 {
        let d = (node + 1).ilog2() as usize;
        let pos = node + 1 - (1 << d);
        let span = 1usize << (depth - d);
        let (lo, mid, hi) = (pos * span, pos * span + span / 2, (pos + 1) * span);
        let left: Vec<f64> = gate.iter().map(|r| r[lo..mid].iter().sum()).collect();
        let right: Vec<f64> = gate.iter().map(|r| r[mid..hi].iter().sum()).collect();
        let reach: Vec<f64> = left.iter().zip(&right).map(|(a, b)| a + b).collect();

        let mut order: Vec<usize> = (0..reach.len()).collect();
        order.sort_by(|&a, &b| reach[b].total_cmp(&reach[a]).then(a.cmp(&b)));
        out.push(NodeStats {
            node,
            depth: d,
            mean_reach: reach.iter().sum::<f64>() / n,
            top: order
                .iter()
                .take(TOP_K)
                .map(|&i| RankedSample {
                    index: i,
                    reach: reach[i],
                })
                .collect(),
            left_mass: left.iter().sum::<f64>() / n,
            right_mass: right.iter().sum::<f64>() / n,
            mean_exo: weighted_mean(exo, reach.iter().copied()),
            left_mean_exo: weighted_mean(exo, left.iter().copied()),
            right_mean_exo: weighted_mean(exo, right.iter().copied()),
        });
    }
    out
}

fn write_embeddings(path: &Path, p: &Pass) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let width = p.embeddings.first().map_or(0, Vec::len);
    let cols: Vec<String> = (0..width).map(|j| format!("h{j}")).collect();
    writeln!(
        w,
        "index,label,rotation_deg,scale{}{}",
        if width > 0 { "," } else { "" },
        cols.join(",")
    )?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (i, h) in p.embeddings.iter().enumerate() {
        let hs: Vec<String> = h.iter().map(f64::to_string).collect();
        writeln!(
            w,
            "{i},{},{},{},{}",
            p.labels[i],
            opt(p.rotation[i]),
            opt(p.scale[i]),
            hs.join(",")
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the exports for `checkpoint` on `split` into `out_dir` (by default
/// the `exports/` directory next to the checkpoint).
pub fn introspect(
    h: &Harness,
    checkpoint: &Path,
    split: Split,
    embed_limit: usize,
    out_dir: Option<PathBuf>,
) -> Result<IntrospectReport> {
    let (cfg, model, ds) = h.open_checkpoint(checkpoint)?;
    let set = split_of(&ds, split);
    let out_dir = out_dir.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("exports"));
    fs::create_dir_all(&out_dir)?;
    let exo = cfg.dataset.primary_exo();
    let tag = split.as_str();
    let mut files = Vec::new();

    let ev = evaluate(&model, set, BATCH, &LossConfig::with_lambda(cfg.lambda)?)?;
    if !ev.abs_cos.is_empty() {
        let hist = Histogram::new(&ev.abs_cos, COS_BINS, 0.0, 1.0);
        let name = format!("cos_histogram_{tag}.json");
        write_json(&out_dir.join(&name), &cos_export(&hist, &ev.abs_cos))?;
        files.push(name);
    }

    let pass = forward_pass(&model, set, exo, embed_limit)?;
    let mut root_gap = None;
    if let (Some(tree), Some(gate)) = (model.tree(), &pass.gate) {
        let nodes = node_stats(gate, &pass.exo, tree.depth);
        root_gap = nodes[0]
            .left_mean_exo
            .zip(nodes[0].right_mean_exo)
            .map(|(a, b)| (a - b).abs());
        let name = format!("tree_nodes_{tag}.json");
        write_json(
            &out_dir.join(&name),
            &serde_json::json!({ "exo_variable": exo, "depth": tree.depth, "nodes": nodes }),
        )?;
        files.push(name);
    }

    let mut usage_entropy = None;
    if let Some(usage) = &ev.leaf_usage {
        let u = LeafUsage {
            usage_entropy: stats::entropy(usage),
            mean_gate_entropy: ev.gate_entropy,
            max_entropy: (usage.len() as f64).ln(),
            usage: usage.clone(),
        };
        usage_entropy = Some(u.usage_entropy);
        let name = format!("leaf_usage_{tag}.json");
        write_json(&out_dir.join(&name), &u)?;
        files.push(name);
    }

    let name = format!("embeddings_{tag}.csv");
    write_embeddings(&out_dir.join(&name), &pass)?;
    files.push(name);

    let report = IntrospectReport {
        checkpoint: checkpoint.to_path_buf(),
        out_dir: out_dir.clone(),
        split: tag.to_string(),
        samples: ev.samples,
        exo_variable: exo,
        median_abs_cos: stats::median(&ev.abs_cos),
        mean_abs_cos: ev.mean_abs_cos,
        root_exo_gap: root_gap,
        leaf_usage_entropy: usage_entropy,
        files,
    };
    write_json(&out_dir.join(format!("introspect_{tag}.json")), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_masses_follow_the_heap_layout() {
        // two samples, depth 2: leaves 0,1 under node 1; 2,3 under node 2
        let gate = vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.0, 0.25, 0.75]];
        let exo = vec![Some(-40.0), Some(40.0)];
        let s = node_stats(&gate, &exo, 2);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].left_mass, s[0].right_mass), (0.5, 0.5));
        assert_eq!(s[0].left_mean_exo, Some(-40.0));
        assert_eq!(s[0].right_mean_exo, Some(40.0));
        assert_eq!(s[1].top[0], RankedSample { index: 0, reach: 1.0 });
        assert_eq!(s[2].depth, 1);
        assert_eq!((s[2].left_mass, s[2].right_mass), (0.125, 0.375));
        assert_eq!(s[2].mean_exo, Some(40.0));
        assert_eq!(s[2].top[1], RankedSample { index: 0, reach: 0.0 });
    }

    #[test]
    fn ties_rank_by_index() {
        let gate = vec![vec![0.5, 0.5]; 20];
        let s = node_stats(&gate, &vec![None; 20], 1);
        let idx: Vec<usize> = s[0].top.iter().map(|r| r.index).collect();
        assert_eq!(idx, (0..TOP_K).collect::<Vec<_>>());
        assert_eq!(s[0].mean_exo, None);
    }
}
