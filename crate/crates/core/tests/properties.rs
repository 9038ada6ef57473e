use proptest::prelude::*;
use rand::Rng as _;

use thin_core::config::{DatasetName, ExperimentConfig, Variant};
use thin_core::data::{Batch, LabeledImage};
use thin_core::gradcheck::gradcheck_params;
use thin_core::loss::{dispel_loss, LossConfig};
use thin_core::model::build_variant;
use thin_core::tree::GateTree;
use thin_core::{rng, Graph, ParamStore, Tensor};

struct Case {
    store: ParamStore,
    tree: GateTree,
    w: Vec<f64>,
    b: Vec<f64>,
    h: Vec<f64>,
    batch: usize,
}

/// A tree with parameters spread over `±spread` and a random input batch.
fn random_case(depth: usize, dim: usize, batch: usize, spread: f64, seed: u64) -> Case {
    let mut r = rng::stream(seed, "test.tree");
    let mut store = ParamStore::new();
    let tree = GateTree::new(&mut store, "gate", depth, dim, &mut r).unwrap();
    let n = tree.internal_nodes();
    let w: Vec<f64> = (0..n * dim).map(|_| r.gen_range(-spread..=spread)).collect();
    let b: Vec<f64> = (0..n).map(|_| r.gen_range(-spread..=spread)).collect();
    let h: Vec<f64> = (0..batch * dim).map(|_| r.gen_range(-2.0..=2.0)).collect();
    store.set_data(tree.weight, &w).unwrap();
    store.set_data(tree.bias, &b).unwrap();
    Case {
        store,
        tree,
        w,
        b,
        h,
        batch,
    }
}

fn leaf_probs(c: &Case) -> Tensor {
    let mut g = Graph::new();
    let h = g
        .constant(Tensor::new(vec![c.batch, c.tree.input_dim], c.h.clone()).unwrap())
        .unwrap();
    let mu = c.tree.leaf_probabilities(&mut g, &c.store, h).unwrap();
    g.value(mu).clone()
}

/// Walks every root-to-leaf path explicitly.
fn path_oracle(depth: usize, dim: usize, w: &[f64], b: &[f64], h: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = (0..(1 << depth) - 1)
        .map(|n| {
            let a: f64 = (0..dim).map(|j| w[n * dim + j] * h[j]).sum::<f64>() + b[n];
            1.0 / (1.0 + (-a).exp())
        })
        .collect();
    (0..1usize << depth)
        .map(|leaf| {
            let mut node = 0;
            let mut p = 1.0;
            for level in (0..depth).rev() {
                if (leaf >> level) & 1 == 0 {
                    p *= d[node];
                    node = 2 * node + 1;
                } else {
                    p *= 1.0 - d[node];
                    node = 2 * node + 2;
                }
            }
            p
        })
        .collect()
}

fn level_pos(i: usize) -> (usize, usize) {
    let level = (usize::BITS - (i + 1).leading_zeros() - 1) as usize;
    (level, i + 1 - (1 << level))
}

/// Heap index after exchanging the two subtrees below node `n`.
fn swapped(n: usize, i: usize) -> usize {
    let (ln, pn) = level_pos(n);
    let (l, p) = level_pos(i);
    if l <= ln || p >> (l - ln) != pn {
        return i;
    }
    (1 << l) - 1 + (p ^ (1 << (l - ln - 1)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gate_rows_lie_on_the_simplex(
        depth in 1usize..=5,
        dim in 1usize..=6,
        batch in 1usize..=4,
        spread in 0.01f64..30.0,
        seed in any::<u64>(),
    ) {
        let mu = leaf_probs(&random_case(depth, dim, batch, spread, seed));
        let l = 1 << depth;
        prop_assert_eq!(mu.shape(), &[batch, l]);
        for row in mu.data().chunks(l) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn leaf_probabilities_match_path_enumeration(
        depth in 1usize..=4,
        dim in 1usize..=5,
        spread in 0.01f64..5.0,
        seed in any::<u64>(),
    ) {
        let c = random_case(depth, dim, 3, spread, seed);
        let mu = leaf_probs(&c);
        let l = 1 << depth;
        for r in 0..3 {
            let want = path_oracle(depth, dim, &c.w, &c.b, &c.h[r * dim..(r + 1) * dim]);
            for (a, b) in mu.data()[r * l..(r + 1) * l].iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn swapping_children_permutes_leaves(
        depth in 1usize..=4,
        dim in 1usize..=4,
        node_pick in any::<usize>(),
        seed in any::<u64>(),
    ) {
        let c = random_case(depth, dim, 2, 3.0, seed);
        let internal = (1 << depth) - 1;
        let n = node_pick % internal;
        let (mut w2, mut b2) = (c.w.clone(), c.b.clone());
        for i in 0..internal {
            let j = swapped(n, i);
            w2[j * dim..(j + 1) * dim].copy_from_slice(&c.w[i * dim..(i + 1) * dim]);
            b2[j] = c.b[i];
        }
        for x in &mut w2[n * dim..(n + 1) * dim] {
            *x = -*x;
        }
        b2[n] = -b2[n];
        let mut c2 = random_case(depth, dim, 2, 3.0, seed);
        c2.store.set_data(c2.tree.weight, &w2).unwrap();
        c2.store.set_data(c2.tree.bias, &b2).unwrap();
        let (mu, mu2) = (leaf_probs(&c), leaf_probs(&c2));
        let l = 1 << depth;
        for r in 0..2 {
            for leaf in 0..l {
                let moved = swapped(n, internal + leaf) - internal;
                let (a, b) = (mu.data()[r * l + leaf], mu2.data()[r * l + moved]);
                prop_assert!((a - b).abs() < 1e-12, "leaf {} → {}: {} vs {}", leaf, moved, a, b);
            }
        }
    }

    #[test]
    fn dispel_is_scale_invariant_and_bounded(
        rows in 1usize..=5,
        k in 2usize..=8,
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
        seed in any::<u64>(),
    ) {
        let mut r = rng::stream(seed, "test.dispel");
        let mut draw = || -> Vec<f64> { (0..rows * k).map(|_| r.gen_range(-3.0..=3.0)).collect() };
        let (u, v) = (draw(), draw());
        let value = |su: f64, sv: f64| -> f64 {
            let ut = Tensor::new(vec![rows, k], u.iter().map(|x| x * su).collect()).unwrap();
            let vt = Tensor::new(vec![rows, k], v.iter().map(|x| x * sv).collect()).unwrap();
            let mut g = Graph::new();
            let vn = g.input(vt.with_requires_grad()).unwrap();
            let d = dispel_loss(&mut g, &ut, vn, &LossConfig::default()).unwrap();
            g.value(d.loss).item()
        };
        let base = value(1.0, 1.0);
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!((value(a, b) - base).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gate_gradients_pass_gradcheck(
        depth in 1usize..=3,
        dim in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let mut c = random_case(depth, dim, 3, 1.5, seed);
        let l = 1 << depth;
        let mut r = rng::stream(seed, "test.weights");
        let coef = Tensor::new(vec![3, l], (0..3 * l).map(|_| r.gen_range(-1.0..=1.0)).collect()).unwrap();
        let h = Tensor::new(vec![3, dim], c.h.clone()).unwrap();
        let tree = c.tree.clone();
        let ids = [tree.weight, tree.bias];
        let report = gradcheck_params(
            |g, store| {
                let hn = g.constant(h.clone())?;
                let mu = tree.leaf_probabilities(g, store, hn)?;
                let cn = g.constant(coef.clone())?;
                let p = g.mul(mu, cn)?;
                g.sum(p, None)
            },
            &mut c.store,
            &ids,
            1e-5,
            1e-5,
            None,
        );
        prop_assert!(report.passed(), "{:?}", report.failures);
    }
}

#[test]
fn saturated_tree_is_nearly_one_hot() {
    let mut r = rng::stream(5, "test.saturate");
    for depth in 1..=5 {
        let mut store = ParamStore::new();
        let tree = GateTree::new(&mut store, "gate", depth, 1, &mut r).unwrap();
        let w: Vec<f64> = (0..tree.internal_nodes())
            .map(|_| if r.gen_bool(0.5) { 40.0 } else { -40.0 })
            .collect();
        store.set_data(tree.weight, &w).unwrap();
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap()).unwrap();
        let mu = tree.leaf_probabilities(&mut g, &store, h).unwrap();
        for row in g.value(mu).data().chunks(1 << depth) {
            let top = row.iter().cloned().fold(0.0, f64::max);
            assert!(top > 0.999, "depth {depth}: {row:?}");
        }
    }
}

fn synthetic_batch(n: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, "test.images");
    let samples: Vec<LabeledImage> = (0..n)
        .map(|i| {
            let deg: f64 = r.gen_range(-90.0..=90.0);
            LabeledImage {
                pixels: Tensor::new(vec![1, 28, 28], (0..784).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap(),
                task_label: i % 10,
                rotation_class: Some(((deg + 90.0) / 10.0).floor().min(17.0) as usize),
                scale_class: None,
                rotation_deg: Some(deg),
                scale: None,
            }
        })
        .collect();
    Batch::from_samples(&samples).unwrap()
}

#[test]
fn mixture_equals_explicit_weighted_sum() {
    for (variant, seed) in [
        (Variant::TreeGated, 1),
        (Variant::SimpleEnsemble, 2),
        (Variant::Oracle, 3),
    ] {
        let cfg = ExperimentConfig::new(DatasetName::MnistR, variant, seed);
        let model = build_variant(&cfg, vec![]).unwrap();
        let batch = synthetic_batch(5, seed);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, true, false).unwrap();
        let gate = g.value(out.g.unwrap()).clone();
        let l = gate.shape()[1];
        let z = g.value(out.z);
        let k = z.shape()[1];
        for row in 0..5 {
            for j in 0..k {
                let explicit: f64 = (0..l)
                    .map(|e| gate.data()[row * l + e] * g.value(out.experts[e]).data()[row * k + j])
                    .sum();
                assert!((z.data()[row * k + j] - explicit).abs() < 1e-12);
            }
        }
    }
}
