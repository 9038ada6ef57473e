use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moments of one parameter, keyed by name so they survive a reload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub moments: Vec<Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// One bias-corrected update of every trainable entry of `store` from its
    /// accumulated gradient. A missing gradient counts as zero. Nothing moves
    /// if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids = store.trainable_ids();
        for &id in &ids {
            if let Some(g) = &store.get(id).grad {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "gradient of {}[{i}] is {}",
                        store.name(id),
                        g[i]
                    )));
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in ids {
            let name = store.name(id).to_string();
            let n = store.get(id).numel();
            let slot = match self.moments.iter().position(|m| m.name == name) {
                Some(s) => s,
                None => {
                    self.moments.push(Moments {
                        name,
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                    self.moments.len() - 1
                }
            };
            let mo = &mut self.moments[slot];
            if mo.m.len() != n {
                return Err(Error::dim(format!(
                    "optimizer state for {} holds {} values, parameter has {n}",
                    mo.name,
                    mo.m.len()
                )));
            }
            let t = store.get_mut(id);
            let grad = t.grad.take();
            let Some(grad) = grad else { continue };
            let data = t.data_mut();
            for i in 0..n {
                let g = grad[i];
                mo.m[i] = self.beta1 * mo.m[i] + (1.0 - self.beta1) * g;
                mo.v[i] = self.beta2 * mo.v[i] + (1.0 - self.beta2) * g * g;
                let mh = mo.m[i] / c1;
                let vh = mo.v[i] / c2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Drops moments of parameters that are no longer trainable.
    pub fn retain_trainable(&mut self, store: &ParamStore) {
        self.moments.retain(|m| {
            store
                .find(&m.name)
                .is_some_and(|id| store.kind(id) == ParamKind::Trainable)
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value), ParamKind::Trainable);
        s.get_mut(id).accumulate_grad(&[grad]);
        s
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g and v̂ = g², so the step is lr·1/(1+ε).
        let mut s = one(0.0, 1.0);
        let mut a = Adam::new(1e-3);
        a.step(&mut s).unwrap();
        let p = s.entries()[0].tensor.item();
        assert!((p - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-15, "{p}");
        assert!((p + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = one(2.5, 0.0);
        let mut a = Adam::new(1e-3);
        a.step(&mut s).unwrap();
        assert_eq!(s.entries()[0].tensor.item(), 2.5);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = one(1.0, f64::NAN);
        let err = Adam::new(1e-3).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("p[0]"), "{err}");
        assert_eq!(s.entries()[0].tensor.item(), 1.0);
    }

    #[test]
    fn quadratic_bowl() {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(0.0), ParamKind::Trainable);
        let mut a = Adam::new(0.1);
        for _ in 0..200 {
            let p = s.get(id).item();
            s.get_mut(id).accumulate_grad(&[2.0 * (p - 3.0)]);
            a.step(&mut s).unwrap();
        }
        assert!((s.get(id).item() - 3.0).abs() < 1e-2, "{}", s.get(id).item());
    }

    #[test]
    fn loss_scale_barely_changes_steps() {
        let run = |c: f64| {
            let mut s = ParamStore::new();
            let id = s.add("p", Tensor::vector(vec![1.0, -2.0]), ParamKind::Trainable);
            let mut a = Adam::new(1e-2);
            for _ in 0..20 {
                let g: Vec<f64> = s.get(id).data().iter().map(|p| c * 2.0 * (p - 0.5)).collect();
                s.get_mut(id).accumulate_grad(&g);
                a.step(&mut s).unwrap();
            }
            s.get(id).data().to_vec()
        };
        let (base, scaled) = (run(1.0), run(100.0));
        for ((b, s), p0) in base.iter().zip(&scaled).zip([1.0, -2.0]) {
            let (db, ds) = (b - p0, s - p0);
            assert!(((db - ds) / db).abs() < 0.01, "{db} vs {ds}");
        }
    }
}
