use thin_core::graph::Padding;
use thin_core::nn::{apply_buffer_updates, BatchNormLayer, DenseLayer, MlpHead, RepresentationNet};
use thin_core::{rng, Error, Graph, ParamStore, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_hand_cases() {
    let mut g = Graph::new();
    let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let v = g.input(t(&[2, 1], &[3.0, 4.0])).unwrap();
    let out = g.matmul(i, v).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 4.0]);

    let a = g.input(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let out = g.matmul(a, v).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 1]);
    assert_eq!(g.value(out).item(), 11.0);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.0).with_requires_grad()).unwrap();
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.25]);

    let y = g.input(Tensor::scalar(-3.5)).unwrap();
    let a = g.abs(y).unwrap();
    assert_eq!(g.value(a).item(), 3.5);
}

#[test]
fn division_by_zero_and_log_of_nonpositive_are_numeric_errors() {
    let mut g = Graph::new();
    let a = g.input(t(&[2], &[1.0, 2.0])).unwrap();
    let z = g.input(t(&[2], &[1.0, 0.0])).unwrap();
    assert!(matches!(g.div(a, z), Err(Error::Numeric(_))));
    let n = g.input(t(&[2], &[1.0, -1.0])).unwrap();
    assert!(matches!(g.log(n), Err(Error::Numeric(_))));
}

#[test]
fn reductions() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let s = g.sum(x, None).unwrap();
    assert_eq!(g.value(s).item(), 6.0);
    let y = g.input(t(&[2], &[2.0, 4.0])).unwrap();
    let m = g.mean(y, Some(0)).unwrap();
    assert_eq!(g.value(m).item(), 3.0);
    assert!(matches!(g.sum(y, Some(1)), Err(Error::Dimension(_))));

    let mut g = Graph::new();
    let x = g.input(t(&[4], &[1.0, 5.0, 2.0, 5.0]).with_requires_grad()).unwrap();
    let mx = g.max(x, None).unwrap();
    let grads = g.backward(mx).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[2, 3], 0.7).with_requires_grad()).unwrap();
    let s = g.sum(x, None).unwrap();
    assert!(g.backward(s).unwrap().get(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]).with_requires_grad()).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq, None).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);

    assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn fan_out_accumulates_exactly() {
    let x0 = t(&[3], &[0.3, -1.2, 2.0]);
    let grad_of = |branches: &[bool; 2]| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(x0.clone().with_requires_grad()).unwrap();
        let f = g.sigmoid(x).unwrap();
        let gx = g.exp(x).unwrap();
        let parts: Vec<_> = [f, gx]
            .iter()
            .zip(branches)
            .filter(|(_, on)| **on)
            .map(|(n, _)| *n)
            .collect();
        let y = if parts.len() == 2 {
            g.add(parts[0], parts[1]).unwrap()
        } else {
            parts[0]
        };
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap().get(x).unwrap().to_vec()
    };
    let both = grad_of(&[true, true]);
    let f = grad_of(&[true, false]);
    let e = grad_of(&[false, true]);
    for i in 0..3 {
        assert_eq!(both[i], f[i] + e[i]);
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut r = rng::stream(11, "test.det");
        let mut store = ParamStore::new();
        let head = MlpHead::new(&mut store, "h", &[6, 5, 3], &mut r).unwrap();
        let x: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let mut g = Graph::new();
        let xi = g.constant(t(&[4, 6], &x)).unwrap();
        let z = head.forward(&mut g, &store, xi, true).unwrap();
        let loss = g.softmax_cross_entropy(z, &[0, 1, 2, 1]).unwrap();
        let grads = g.backward(loss).unwrap();
        g.accumulate_into(&grads, &mut store);
        store
            .ids()
            .flat_map(|id| store.get(id).grad.clone().unwrap_or_default())
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn convolution_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let k = g.input(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let b = g.input(Tensor::zeros(&[1])).unwrap();
    let y = g.conv2d(x, k, b, 1, Padding::Valid).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);

    let img: Vec<f64> = (0..20).map(|i| i as f64 * 0.1 - 0.4).collect();
    let x = g.input(t(&[1, 1, 4, 5], &img)).unwrap();
    let mut ident = vec![0.0; 9];
    ident[4] = 1.0;
    let k = g.input(t(&[1, 1, 3, 3], &ident)).unwrap();
    let y = g.conv2d(x, k, b, 1, Padding::Same).unwrap();
    assert_eq!(g.value(y).data(), &img[..]);

    let x2 = g.input(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x2, k, b, 1, Padding::Same), Err(Error::Dimension(_))));
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let y = g.maxpool2d(x).unwrap();
    assert_eq!(g.value(y).item(), 4.0);

    let c = g.input(Tensor::full(&[1, 1, 2, 2], 0.5).with_requires_grad()).unwrap();
    let y = g.maxpool2d(c).unwrap();
    assert_eq!(g.value(y).item(), 0.5);
    let s = g.sum(y, None).unwrap();
    assert_eq!(g.backward(s).unwrap().get(c).unwrap(), &[1.0, 0.0, 0.0, 0.0]);

    let big = g.input(Tensor::zeros(&[2, 3, 28, 28])).unwrap();
    let y = g.maxpool2d(big).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 14, 14]);
}

fn column_stats(v: &Tensor, col: usize) -> (f64, f64) {
    let f = v.shape()[1];
    let xs: Vec<f64> = v.data().iter().skip(col).step_by(f).copied().collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[test]
fn batch_norm_examples() {
    let x = t(&[4, 2], &[1.0, -2.0, 3.0, 0.5, -1.0, 4.0, 7.0, 1.5]);
    let mut store = ParamStore::new();
    let bn = BatchNormLayer::new(&mut store, "bn", 2);
    let mut g = Graph::new();
    let xi = g.constant(x.clone()).unwrap();
    let y = bn.forward(&mut g, &store, xi, true).unwrap();
    for c in 0..2 {
        let (m, v) = column_stats(g.value(y), c);
        assert!(m.abs() < 1e-8);
        // the 1e-5 epsilon under the square root shrinks the variance slightly
        assert!((v - 1.0).abs() < 1e-4, "{v}");
    }

    store.set_data(bn.gamma, &[2.0, 2.0]).unwrap();
    store.set_data(bn.beta, &[3.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let xi = g.constant(x.clone()).unwrap();
    let y = bn.forward(&mut g, &store, xi, true).unwrap();
    for c in 0..2 {
        let (m, v) = column_stats(g.value(y), c);
        assert!((m - 3.0).abs() < 1e-8);
        assert!((v.sqrt() - 2.0).abs() < 1e-4);
    }
    apply_buffer_updates(&mut g, &mut store).unwrap();
    let rm = store.get(bn.running_mean).data().to_vec();
    assert!((rm[0] - 0.1 * 2.5).abs() < 1e-12);
    assert!(store.get(bn.running_var).data().iter().all(|&v| v > 0.0));

    let mut g = Graph::new();
    let one = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    assert!(matches!(bn.forward(&mut g, &store, one, true), Err(Error::Contract(_))));
    assert!(bn.forward(&mut g, &store, one, false).is_ok());
}

#[test]
fn zero_weight_dense_outputs_bias() {
    let mut r = rng::stream(0, "test.dense");
    let mut store = ParamStore::new();
    let d = DenseLayer::new(&mut store, "d", 3, 2, &mut r);
    store.set_data(d.weight, &[0.0; 6]).unwrap();
    store.set_data(d.bias, &[0.25, -1.5]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[9.0, -4.0, 1.0, 0.0, 3.0, 2.0])).unwrap();
    let y = d.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -1.5, 0.25, -1.5]);
}

#[test]
fn baseline_and_ensemble_budgets_agree() {
    let mut r = rng::stream(0, "test.budget");
    let mut store = ParamStore::new();
    let d = RepresentationNet::output_dim_for(28, 28);
    let base = MlpHead::new(&mut store, "b", &[d, 256, 10], &mut r).unwrap();
    let weak = MlpHead::new(&mut store, "w", &[d, 32, 10], &mut r).unwrap();
    let (b, e) = (base.dense_param_count() as f64, 8.0 * weak.dense_param_count() as f64);
    assert!((b - e).abs() / b < 0.05);
    for total in [b, e] {
        assert!((150_000.0..=250_000.0).contains(&total));
    }
    let _ = RepresentationNet::new(&mut store, "r", 28, 28, &mut r).unwrap();
}
