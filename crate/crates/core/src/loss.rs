//! Supervised cross-entropy, the absolute-cosine dispelling loss, and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::config::DEFAULT_LAMBDA;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ForwardOutput;
use crate::tensor::Tensor;

pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon_norm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            epsilon_norm: EPS_NORM,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        Ok(LossConfig {
            lambda,
            ..Self::default()
        })
    }
}

/// Class index of each one-hot row.
pub fn one_hot_classes(y: &Tensor) -> Result<Vec<usize>> {
    if y.rank() != 2 {
        return Err(Error::Contract(format!(
            "one-hot targets must be [B, K], got {:?}",
            y.shape()
        )));
    }
    y.data()
        .chunks(y.shape()[1])
        .enumerate()
        .map(|(r, row)| {
            let hot: Vec<usize> = (0..row.len()).filter(|&j| row[j] == 1.0).collect();
            if hot.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract(format!("target row {r} is not one-hot: {row:?}")));
            }
            Ok(hot[0])
        })
        .collect()
}

/// Batch-mean cross-entropy of logits `z[B×K]` against one-hot `y_star`.
pub fn cross_entropy(g: &mut Graph, z: NodeId, y_star: &Tensor) -> Result<NodeId> {
    if y_star.shape() != g.shape(z) {
        return Err(Error::dim(format!(
            "logits {:?} against targets {:?}",
            g.shape(z),
            y_star.shape()
        )));
    }
    let classes = one_hot_classes(y_star)?;
    g.softmax_cross_entropy(z, &classes)
}

/// Per-sample `|cos(u_i, v_i)|` computed directly, with samples whose norm
/// falls below `eps` reported as 0. Returns the values and how many samples
/// were degenerate.
pub fn abs_cosines(u: &Tensor, v: &Tensor, eps: f64) -> Result<(Vec<f64>, usize)> {
    if u.shape() != v.shape() || u.rank() != 2 {
        return Err(Error::dim(format!("cosine of {:?} and {:?}", u.shape(), v.shape())));
    }
    let k = u.shape()[1];
    let mut degenerate = 0;
    let out = u
        .data()
        .chunks(k)
        .zip(v.data().chunks(k))
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na < eps || nb < eps {
                degenerate += 1;
                0.0
            } else {
                (dot / (na * nb)).abs()
            }
        })
        .collect();
    Ok((out, degenerate))
}

#[derive(Clone, Debug)]
pub struct DispelOutput {
    /// Scalar batch mean of `|cos|`.
    pub loss: NodeId,
    pub per_sample: Vec<f64>,
    /// Samples whose norm fell below `epsilon_norm`; they contribute 0.
    pub degenerate: usize,
}

/// Mean absolute cosine between constant probe logits on the frozen
/// representation and probe logits on the trained one. Only `z_exo_endo`
/// carries gradient.
pub fn dispel_loss(g: &mut Graph, z_exo_exo: &Tensor, z_exo_endo: NodeId, cfg: &LossConfig) -> Result<DispelOutput> {
    let vt = g.value(z_exo_endo).clone();
    let (per_sample, degenerate) = abs_cosines(z_exo_exo, &vt, cfg.epsilon_norm)?;
    if degenerate > 0 {
        log::warn!("{degenerate} samples with near-zero probe logits left out of the dispelling loss");
    }
    let b = vt.shape()[0];
    let k = vt.shape()[1];
    let norm = |row: &[f64]| row.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut mask = vec![1.0; b];
    let mut offset = vec![0.0; b];
    let mut inv_nu = vec![0.0; b];
    for r in 0..b {
        let nu = norm(&z_exo_exo.data()[r * k..(r + 1) * k]);
        let nv = norm(&vt.data()[r * k..(r + 1) * k]);
        if nu < cfg.epsilon_norm || nv < cfg.epsilon_norm {
            // keep the square root away from zero; the mask drops the sample
            mask[r] = 0.0;
            offset[r] = 1.0;
            inv_nu[r] = 1.0;
        } else {
            inv_nu[r] = 1.0 / nu;
        }
    }
    let u = g.constant(z_exo_exo.clone())?;
    let uv = g.mul(u, z_exo_endo)?;
    let dot = g.sum(uv, Some(1))?;
    let vv = g.mul(z_exo_endo, z_exo_endo)?;
    let sq = g.sum(vv, Some(1))?;
    let off = g.constant(Tensor::vector(offset))?;
    let sq = g.add(sq, off)?;
    let nv = g.sqrt(sq)?;
    let cos = g.div(dot, nv)?;
    let scale = g.constant(Tensor::vector(inv_nu.iter().zip(&mask).map(|(a, m)| a * m).collect()))?;
    let cos = g.mul(cos, scale)?;
    let abs = g.abs(cos)?;
    let loss = g.mean(abs, None)?;
    Ok(DispelOutput {
        loss,
        per_sample,
        degenerate,
    })
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: NodeId,
    pub sup: NodeId,
    /// On the tape only when it contributes gradient (`λ > 0`).
    pub sim: Option<NodeId>,
    pub sup_value: f64,
    /// Batch-mean `|cos|`, when a probe was evaluated.
    pub sim_value: Option<f64>,
    pub per_sample_cos: Vec<f64>,
}

/// `L = L_sup + λ·L_sim`. With `λ = 0` the total is the supervised node itself
/// and the dispelling term, when probe logits are present, is only measured.
pub fn total_loss(g: &mut Graph, out: &ForwardOutput, labels: &[usize], cfg: &LossConfig) -> Result<LossParts> {
    let sup = g.softmax_cross_entropy(out.z, labels)?;
    let sup_value = g.value(sup).item();
    let probe = match (&out.z_exo_exo, out.z_exo_endo) {
        (Some(u), Some(v)) => Some((u, v)),
        _ => None,
    };
    if cfg.lambda == 0.0 {
        let (sim_value, per_sample_cos) = match probe {
            Some((u, v)) => {
                let (c, _) = abs_cosines(u, g.value(v), cfg.epsilon_norm)?;
                (Some(c.iter().sum::<f64>() / c.len() as f64), c)
            }
            None => (None, Vec::new()),
        };
        return Ok(LossParts {
            total: sup,
            sup,
            sim: None,
            sup_value,
            sim_value,
            per_sample_cos,
        });
    }
    let (u, v) = probe.ok_or_else(|| Error::Config("a positive lambda needs the frozen probe logits".into()))?;
    let d = dispel_loss(g, u, v, cfg)?;
    let weighted = g.scale(d.loss, cfg.lambda)?;
    let total = g.add(sup, weighted)?;
    Ok(LossParts {
        total,
        sup,
        sim: Some(d.loss),
        sup_value,
        sim_value: Some(g.value(d.loss).item()),
        per_sample_cos: d.per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn dispel_value(u: &Tensor, v: &Tensor) -> f64 {
        let mut g = Graph::new();
        let vn = g.input(v.clone().with_requires_grad()).unwrap();
        let d = dispel_loss(&mut g, u, vn, &LossConfig::default()).unwrap();
        g.value(d.loss).item()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[2, 10])).unwrap();
        let mut y = Tensor::zeros(&[2, 10]);
        y.data_mut()[3] = 1.0;
        y.data_mut()[17] = 1.0;
        let l = cross_entropy(&mut g, z, &y).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let mut g = Graph::new();
        let z = g.input(rows(&[&[1e3, 0.0, 0.0]])).unwrap();
        let l = cross_entropy(&mut g, z, &rows(&[&[1.0, 0.0, 0.0]])).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn malformed_one_hot_rejected() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[1, 3])).unwrap();
        for bad in [&[1.0, 1.0, 0.0][..], &[0.5, 0.5, 0.0], &[0.0, 0.0, 0.0]] {
            assert!(matches!(
                cross_entropy(&mut g, z, &rows(&[bad])),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let y = rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        let z = rows(&[&[0.3, -1.2, 2.0], &[0.1, 0.4, -0.7]]);
        let rep = gradcheck(|g, x| cross_entropy(g, x, &y), &z, 1e-5, 1e-6);
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn dispel_examples() {
        assert!((dispel_value(&rows(&[&[1.0, 2.0]]), &rows(&[&[1.0, 2.0]])) - 1.0).abs() < 1e-12);
        assert!(dispel_value(&rows(&[&[1.0, 0.0]]), &rows(&[&[0.0, 1.0]])).abs() < 1e-12);
        assert!((dispel_value(&rows(&[&[1.0, 0.0]]), &rows(&[&[-1.0, 0.0]])) - 1.0).abs() < 1e-12);
        let v = dispel_value(&rows(&[&[1.0, 1.0], &[1.0, 0.0]]), &rows(&[&[1.0, 0.0], &[1.0, 1.0]]));
        assert!((v - 0.5f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn zero_norm_sample_contributes_nothing() {
        let u = rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let v = rows(&[&[1.0, 0.0], &[3.0, 1.0]]);
        let mut g = Graph::new();
        let vn = g.input(v.clone().with_requires_grad()).unwrap();
        let d = dispel_loss(&mut g, &u, vn, &LossConfig::default()).unwrap();
        assert_eq!(d.degenerate, 1);
        assert!((g.value(d.loss).item() - 0.5).abs() < 1e-12);
        let grads = g.backward(d.loss).unwrap();
        assert!(grads.get(vn).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn dispel_gradient() {
        let u = rows(&[&[0.4, -1.0, 0.3], &[1.5, 0.2, -0.6]]);
        let v = rows(&[&[0.2, 0.9, -0.4], &[-0.3, 0.8, 1.1]]);
        let rep = gradcheck(
            |g, x| Ok(dispel_loss(g, &u, x, &LossConfig::default())?.loss),
            &v,
            1e-5,
            1e-6,
        );
        assert!(rep.passed(), "{rep:?}");
    }
}
