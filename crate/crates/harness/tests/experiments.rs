use std::fs;
use std::path::{Path, PathBuf};

use thin_core::config::{DatasetName, ExperimentConfig, Limits, Schedule, Variant};
use thin_core::data::archive::read_archive;
use thin_core::data::Split;
use thin_core::train::{Checkpoint, MetricRecord};
use thin_harness::runs::digest;
use thin_harness::{experiments, generate, introspect, Harness, ResultTable, RunStatus, RunTemplate};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mnist-mini")
}

fn harness(out: &Path) -> Harness {
    Harness::new(out, Some(fixture_dir()), 2)
}

fn tiny() -> RunTemplate {
    RunTemplate {
        schedule: Schedule {
            epochs: 1,
            max_steps: Some(6),
            val_size: 32,
            eval_every: 3,
            ..Schedule::default()
        },
        limits: Limits {
            train: None,
            test: Some(60),
        },
    }
}

fn without_wall_time(t: &ResultTable) -> serde_json::Value {
    let mut v = serde_json::to_value(t).unwrap();
    for r in v["rows"].as_array_mut().unwrap() {
        r["wall_time_s"] = 0.into();
    }
    v
}

#[test]
fn ladder_twice_gives_identical_tables() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = experiments::ladder(&harness(a.path()), DatasetName::MnistR, &[1], &tiny()).unwrap();
    let tb = experiments::ladder(&harness(b.path()), DatasetName::MnistR, &[1], &tiny()).unwrap();
    assert_eq!(ta.rows.len(), 6);
    assert!(ta.rows.iter().all(|r| r.ok()), "{}", ta.to_text());
    assert_eq!(without_wall_time(&ta), without_wall_time(&tb));
    assert_eq!(ta.to_text(), tb.to_text());
    assert_eq!(ta.group("thin").unwrap().reference, Some(98.26));
    assert_eq!(ta.checks.len(), 4);

    // every row traces back to its directory through the config digest
    let h = harness(a.path());
    for r in &ta.rows {
        let dir = h.run_dir(&r.digest);
        let cfg: ExperimentConfig =
            serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
        assert_eq!(digest(&cfg).unwrap(), r.digest);
        assert_eq!(cfg.variant, r.variant);
        let ckpt = Checkpoint::load(&dir.join("checkpoint.bin")).unwrap();
        assert_eq!(ckpt.manifest.config, serde_json::to_value(&cfg).unwrap());
        let log: Vec<MetricRecord> = fs::read_to_string(dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(log.iter().filter(|m| m.split == "train").count(), 6);
        assert_eq!(log.iter().filter(|m| m.split == "val").count(), 2);
        assert_eq!(log.last().unwrap().split, "test");
        assert_eq!(log.last().unwrap().accuracy * 100.0, r.test_accuracy.unwrap());
    }

    // a cached rerun reads the stored results back
    let again = experiments::ladder(&h, DatasetName::MnistR, &[1], &tiny()).unwrap();
    assert_eq!(
        serde_json::to_value(&again).unwrap(),
        serde_json::to_value(&ta).unwrap()
    );
}

#[test]
fn exported_histograms_sum_to_the_sample_count() {
    let out = tempfile::tempdir().unwrap();
    let h = harness(out.path());
    let t = experiments::sweep_lambda(&h, DatasetName::MnistR, &[0.0, 0.01], &[1], &tiny()).unwrap();
    assert_eq!(t.rows[0].variant, Variant::ExoTreeGated);
    assert_eq!(t.rows[1].variant, Variant::Thin);
    assert_eq!(t.rows[1].lambda, 0.01);
    for r in &t.rows {
        assert_eq!(r.cos_histogram.as_ref().unwrap().total(), 60);
        let export: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(h.run_dir(&r.digest).join("exports/cos_histogram.json")).unwrap())
                .unwrap();
        let counts: u64 = export["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_u64().unwrap())
            .sum();
        assert_eq!(counts, 60);
        assert_eq!(export["edges"].as_array().unwrap().len(), 51);
    }
    let pooled = &t.extra["cos_histograms"]["lambda=0.01"];
    assert_eq!(pooled["samples"], 60);
    assert!(t.checks.iter().any(|c| c.name.starts_with("median |cos|")));

    let ckpt = h.run_dir(&t.rows[1].digest).join("checkpoint.bin");
    let rep = introspect::introspect(&h, &ckpt, Split::Test, 10, None).unwrap();
    assert_eq!(rep.samples, 60);
    assert!(rep.leaf_usage_entropy.unwrap() <= 8f64.ln() + 1e-12);
    assert!(rep.root_exo_gap.is_some());
    let exports = ckpt.parent().unwrap().join("exports");
    let csv = fs::read_to_string(exports.join("embeddings_test.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let cos: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exports.join("cos_histogram_test.json")).unwrap()).unwrap();
    assert_eq!(
        cos["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_u64().unwrap())
            .sum::<u64>(),
        60
    );
    let nodes: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exports.join("tree_nodes_test.json")).unwrap()).unwrap();
    assert_eq!(nodes["nodes"].as_array().unwrap().len(), 7);
    assert_eq!(nodes["nodes"][0]["top"].as_array().unwrap().len(), 16);
}

#[test]
fn gating_comparison_differs_only_in_the_gate() {
    let out = tempfile::tempdir().unwrap();
    let t = experiments::gating_compare(&harness(out.path()), &[1], &tiny()).unwrap();
    let gates: Vec<&str> = t.rows.iter().map(|r| r.gating.as_deref().unwrap()).collect();
    assert_eq!(
        gates,
        [
            "endogenous",
            "exogenous:scale",
            "exogenous:rotation",
            "exo_concat:rotation+scale"
        ]
    );
    assert!(t
        .rows
        .iter()
        .all(|r| r.variant == Variant::TreeGated && r.dataset == DatasetName::MnistRs));
    let labels: Vec<&str> = t.groups.iter().map(|g| g.label.as_str()).collect();
    assert_eq!(labels, ["digit", "scale", "rotation", "rotation+scale"]);
    // the concatenated gate sees two 784-wide representations
    let concat = &t.rows[3];
    let plain = &t.rows[2];
    assert_eq!(concat.head_params.unwrap() - plain.head_params.unwrap(), 7 * 784);
}

#[test]
fn a_diverging_run_is_marked_failed() {
    let out = tempfile::tempdir().unwrap();
    let h = harness(out.path());
    let mut cfg = tiny().config(DatasetName::MnistR, Variant::Baseline, 1);
    cfg.schedule.lr = 1e300;
    let r = h.run(&cfg).unwrap();
    assert_eq!(r.status, RunStatus::Failed);
    assert!(r.error.as_deref().unwrap().contains("diverged"), "{:?}", r.error);
    let mut t = ResultTable::new("t", "t", vec![r]);
    t.groups.push(thin_harness::table::GroupSummary::new(
        "baseline",
        &t.rows.iter().collect::<Vec<_>>(),
        None,
    ));
    assert!(!t.success());
    assert_eq!(t.groups[0].ok, 0);
    assert!(h.run_dir(&t.rows[0].digest).join("result.json").is_file());
}

#[test]
fn generated_archives_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let limits = Limits {
        train: Some(200),
        test: Some(50),
    };
    let sa = generate::generate(&harness(a.path()), DatasetName::MnistRs, 5, &limits).unwrap();
    let sb = generate::generate(&harness(b.path()), DatasetName::MnistRs, 5, &limits).unwrap();
    assert_eq!(sa.train.sha256, sb.train.sha256);
    assert_eq!(sa.test.sha256, sb.test.sha256);
    assert_eq!(sa.train.label_histogram.iter().sum::<u64>(), 200);
    assert_eq!(sa.train.exo_histograms["rotation"].iter().sum::<u64>(), 200);
    assert_eq!(sa.train.exo_histograms["scale"].len(), 10);

    let (header, images) = read_archive(&sa.dir.join("train.thinds")).unwrap();
    assert_eq!(
        (header.count, header.height, header.name.as_str()),
        (200, 28, "mnist_rs")
    );
    let ds = harness(a.path()).dataset(DatasetName::MnistRs, 5, &limits).unwrap();
    for (i, img) in images.iter().enumerate().step_by(37) {
        let orig = ds.train.get(i);
        assert_eq!(img.task_label, orig.task_label);
        assert_eq!(img.rotation_class, orig.rotation_class);
        assert_eq!(img.rotation_deg, orig.rotation_deg.map(|v| v as f32 as f64));
        for (p, q) in img.pixels.data().iter().zip(orig.pixels.data()) {
            assert_eq!(*p, *q as f32 as f64);
        }
    }
}
