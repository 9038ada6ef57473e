use std::path::PathBuf;
use std::sync::OnceLock;

use rand::Rng as _;

use thin_core::config::{DatasetName, ExoTarget, ExperimentConfig, Schedule, Variant};
use thin_core::data::{build_mnist_r, DatasetSplit, LabeledImage, MnistFiles, SampleSet};
use thin_core::loss::{dispel_loss, LossConfig};
use thin_core::model::{build_variant, ExoStack};
use thin_core::train::{
    build_and_train, evaluate, evaluate_exo, load_model, model_checkpoint, pretrain_exogenous, train, Adam, Checkpoint,
    MetricRecord,
};
use thin_core::{rng, Error, Graph, ParamKind, ParamStore, Tensor};

fn fixture() -> &'static DatasetSplit {
    static DS: OnceLock<DatasetSplit> = OnceLock::new();
    DS.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mnist-mini");
        let f = MnistFiles::locate(&dir).unwrap();
        build_mnist_r(f.read_train().unwrap(), f.read_test().unwrap(), 1)
    })
}

fn one_epoch() -> Schedule {
    Schedule {
        epochs: 1,
        val_size: 0,
        ..Schedule::default()
    }
}

fn rotation_stack() -> &'static ExoStack {
    static STACK: OnceLock<ExoStack> = OnceLock::new();
    STACK.get_or_init(|| {
        let ds = fixture();
        let schedule = Schedule {
            epochs: 2,
            ..one_epoch()
        };
        pretrain_exogenous(
            DatasetName::MnistR,
            &ds.train,
            &ds.test,
            ExoTarget::Rotation,
            &schedule,
            1,
            &mut |_| {},
        )
        .unwrap()
        .stack
    })
}

fn config(variant: Variant, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(DatasetName::MnistR, variant, seed);
    cfg.schedule = one_epoch();
    cfg
}

fn eval_cfg() -> LossConfig {
    LossConfig::with_lambda(0.0).unwrap()
}

#[test]
fn every_variant_fits_the_fixture_in_one_epoch() {
    let ds = fixture();
    let stack = rotation_stack();
    let before = stack.store.fingerprint();
    for &v in Variant::ALL {
        let out = build_and_train(&config(v, 1), &ds.train, vec![stack.clone()], &mut |_| {}).unwrap();
        assert_eq!(out.steps, 31);
        let ev = evaluate(&out.model, &ds.train, 100, &eval_cfg()).unwrap();
        assert!(ev.accuracy > 0.60, "{v}: {}", ev.accuracy);
        for s in &out.model.exo {
            assert_eq!(s.store.fingerprint(), before, "{v}");
            assert!(s.store.entries().iter().all(|e| e.tensor.grad.is_none()));
            assert_eq!(s.store.count(ParamKind::Trainable), 0);
        }
    }
}

fn run_log(seed: u64) -> (Vec<MetricRecord>, u64) {
    let ds = fixture();
    let mut cfg = config(Variant::Thin, seed);
    cfg.schedule.max_steps = Some(12);
    cfg.schedule.val_size = 64;
    cfg.schedule.eval_every = 5;
    let mut log = Vec::new();
    let out = build_and_train(&cfg, &ds.train, vec![rotation_stack().clone()], &mut |r| {
        log.push(r.clone())
    })
    .unwrap();
    (log, out.model.store.fingerprint())
}

#[test]
fn reruns_are_bit_identical() {
    let (a, pa) = run_log(3);
    let (b, pb) = run_log(3);
    assert_eq!(a.len(), 12 + 3);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(pa, pb);
    let (_, pc) = run_log(4);
    assert_ne!(pa, pc);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let ds = fixture();
    let mut cfg = config(Variant::Thin, 2);
    cfg.schedule.max_steps = Some(8);
    let out = build_and_train(&cfg, &ds.train, vec![rotation_stack().clone()], &mut |_| {}).unwrap();
    let loss = LossConfig::with_lambda(cfg.lambda).unwrap();
    let before = evaluate(&out.model, &ds.test, 64, &loss).unwrap();
    let ckpt = model_checkpoint(&out.model, &cfg, 8, Default::default(), Some(&out.adam)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let (cfg2, model2) = load_model(&back).unwrap();
    assert_eq!(cfg2, cfg);
    let after = evaluate(&model2, &ds.test, 64, &loss).unwrap();
    assert_eq!(before, after);
    assert!(before.mean_abs_cos.is_some());
}

#[test]
fn evaluation_identities() {
    let ds = fixture();
    let out = build_and_train(&config(Variant::SimpleEnsemble, 5), &ds.train, vec![], &mut |_| {}).unwrap();
    let ev = evaluate(&out.model, &ds.test, 100, &eval_cfg()).unwrap();
    assert_eq!(ev.samples, 300);
    let mean = ev.per_class_accuracy.iter().sum::<f64>() / 10.0;
    assert!((ev.accuracy - mean).abs() < 1e-12);
    assert!((ev.gate_entropy.unwrap() - 8f64.ln()).abs() < 1e-12);

    // relabel with the model's own predictions: a perfect predictor
    let images: Vec<LabeledImage> = ds.test.iter().collect();
    let batch = ds.test.batch(&(0..images.len()).collect::<Vec<_>>()).unwrap();
    let pred = out.model.predict(&batch).unwrap();
    let relabeled = SampleSet::from_images(
        images
            .into_iter()
            .zip(&pred)
            .map(|(mut s, &p)| {
                s.task_label = p;
                s
            })
            .collect(),
    );
    let perfect = evaluate(&out.model, &relabeled, 100, &eval_cfg()).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    for (i, row) in perfect.confusion.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            assert!(i == j || c == 0);
        }
    }
}

#[test]
fn untrained_exogenous_network_sits_near_chance() {
    let ds = fixture();
    let fresh = ExoStack::new(ExoTarget::Rotation, 28, 28, 9).unwrap();
    let m = evaluate_exo(&fresh, &ds.train, 100).unwrap();
    assert!((0.02..=0.10).contains(&m.bin_accuracy), "{}", m.bin_accuracy);
    let trained = evaluate_exo(rotation_stack(), &ds.train, 100).unwrap();
    assert!(
        trained.bin_accuracy > 2.0 * m.bin_accuracy,
        "{} vs {}",
        trained.bin_accuracy,
        m.bin_accuracy
    );
    assert!(trained.bin_center_mae < m.bin_center_mae);
}

#[test]
fn pretraining_rejects_absent_labels() {
    let ds = fixture();
    let err = pretrain_exogenous(
        DatasetName::MnistR,
        &ds.train,
        &ds.test,
        ExoTarget::Scale,
        &one_epoch(),
        1,
        &mut |_| {},
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn exploding_updates_abort_as_divergence() {
    let ds = fixture();
    let mut cfg = config(Variant::Baseline, 1);
    cfg.schedule.lr = 1e300;
    let model = build_variant(&cfg, vec![]).unwrap();
    let err = train(model, &ds.train, &cfg, &mut |_| {}, &mut |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn lambda_zero_total_is_supervised_loss() {
    let ds = fixture();
    let mut cfg = config(Variant::ExoTreeGated, 1);
    cfg.schedule.max_steps = Some(3);
    let mut log = Vec::new();
    build_and_train(&cfg, &ds.train, vec![rotation_stack().clone()], &mut |r| {
        log.push(r.clone())
    })
    .unwrap();
    for r in &log {
        assert_eq!(r.loss, r.loss_sup);
        assert!(r.loss_sim.is_some());
    }

    let mut cfg = config(Variant::Thin, 1);
    cfg.schedule.max_steps = Some(3);
    let mut log = Vec::new();
    build_and_train(&cfg, &ds.train, vec![rotation_stack().clone()], &mut |r| {
        log.push(r.clone())
    })
    .unwrap();
    for r in &log {
        assert!((r.loss - (r.loss_sup + 0.005 * r.loss_sim.unwrap())).abs() < 1e-12);
    }
}

#[test]
fn dispelling_alone_decorrelates_a_linear_map() {
    let (b, d_in, d_h, k) = (64, 12, 8, 5);
    let mut r = rng::stream(1, "test.toy");
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(-1.0..=1.0)).collect() };
    let x = Tensor::new(vec![b, d_in], draw(b * d_in)).unwrap();
    let probe = Tensor::new(vec![d_h, k], draw(d_h * k)).unwrap();
    let a = Tensor::new(vec![d_in, k], draw(d_in * k)).unwrap();
    let mut store = ParamStore::new();
    let w = store.add(
        "w",
        Tensor::new(vec![d_in, d_h], draw(d_in * d_h)).unwrap(),
        ParamKind::Trainable,
    );

    // exogenous logits: a fixed linear read-out of the same inputs
    let z_exo = {
        let mut g = Graph::new();
        let (xn, an) = (g.constant(x.clone()).unwrap(), g.constant(a).unwrap());
        let z = g.matmul(xn, an).unwrap();
        g.value(z).clone()
    };
    let mut adam = Adam::new(1e-2);
    let cfg = LossConfig::default();
    let mut first = None;
    let mut last = 1.0;
    for _ in 0..500 {
        let mut g = Graph::new();
        let xn = g.constant(x.clone()).unwrap();
        let wn = g.param(&store, w).unwrap();
        let pn = g.constant(probe.clone()).unwrap();
        let h = g.matmul(xn, wn).unwrap();
        let z = g.matmul(h, pn).unwrap();
        let loss = dispel_loss(&mut g, &z_exo, z, &cfg).unwrap().loss;
        last = g.value(loss).item();
        first.get_or_insert(last);
        let grads = g.backward(loss).unwrap();
        store.zero_grads();
        g.accumulate_into(&grads, &mut store);
        adam.step(&mut store).unwrap();
    }
    assert!(first.unwrap() > 0.2, "{first:?}");
    assert!(last < 0.1, "{last}");
}
