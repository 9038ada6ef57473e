//! Central finite-difference verification of tape gradients.
//!
//! Each element is perturbed by ±h and the symmetric difference quotient is
//! compared with the tape gradient. The error measure is
//! `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`, so
//! gradients smaller than `REL_FLOOR` are compared on an absolute scale.
//!
//! Points where the one-sided quotients disagree (a kink of `abs`, `relu`,
//! or a `max` tie within `h`) have no derivative to check; they are skipped
//! and reported as warnings.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const REL_FLOOR: f64 = 1e-3;
const KINK_TOL: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct Mismatch {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub tol: f64,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
    pub warnings: Vec<String>,
    /// Set when the function itself failed or produced a non-finite value.
    pub error: Option<String>,
}

impl GradcheckReport {
    pub fn new(name: &str, tol: f64) -> Self {
        GradcheckReport {
            name: name.to_string(),
            tol,
            ..Default::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.failures.is_empty() && self.checked > 0
    }

    fn fail(mut self, msg: impl Into<String>) -> Self {
        self.error = Some(msg.into());
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: GradcheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
        self.warnings.extend(other.warnings);
        if self.error.is_none() {
            self.error = other.error;
        }
    }

    fn compare(&mut self, label: &str, index: usize, analytic: f64, lo: f64, mid: f64, hi: f64, h: f64) {
        if !(lo.is_finite() && mid.is_finite() && hi.is_finite()) {
            self.error = Some(format!("{label}[{index}]: function value is not finite"));
            return;
        }
        let fwd = (hi - mid) / h;
        let bwd = (mid - lo) / h;
        if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
            self.skipped += 1;
            self.warnings.push(format!(
                "{label}[{index}]: nondifferentiable point skipped (one-sided slopes {fwd:.4e} vs {bwd:.4e})"
            ));
            return;
        }
        let numeric = (hi - lo) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_rel_error = self.max_rel_error.max(rel);
        if rel > self.tol || rel.is_nan() {
            self.failures.push(Mismatch {
                label: label.to_string(),
                index,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
}

/// Checks the gradient of the scalar function `f` at `x`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64, tol: f64) -> GradcheckReport
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut report = GradcheckReport::new("gradcheck", tol);
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.input(t.clone())?;
        let out = f(&mut g, id)?;
        Ok(g.value(out).item())
    };

    let analytic = {
        let mut g = Graph::new();
        let leaf = match g.input(x.clone().with_requires_grad()) {
            Ok(id) => id,
            Err(e) => return report.fail(e.to_string()),
        };
        let out = match f(&mut g, leaf) {
            Ok(o) => o,
            Err(e) => return report.fail(e.to_string()),
        };
        if !g.value(out).is_scalar() {
            return report.fail("function is not scalar-valued");
        }
        match g.backward(out) {
            Ok(grads) => grads
                .get(leaf)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; x.numel()]),
            Err(e) => return report.fail(e.to_string()),
        }
    };

    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let mut at = |v: f64| -> Result<f64> {
            probe.data_mut()[i] = v;
            eval(&probe)
        };
        let vals = (at(orig - h), at(orig), at(orig + h));
        probe.data_mut()[i] = orig;
        match vals {
            (Ok(lo), Ok(mid), Ok(hi)) => report.compare("x", i, analytic[i], lo, mid, hi, h),
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return report.fail(format!("x[{i}]: {e}")),
        }
        if report.error.is_some() {
            return report;
        }
    }
    report
}

/// Checks gradients of a scalar model loss with respect to stored
/// parameters. With `max_elements = Some((n, seed))` only `n` elements drawn
/// uniformly over all listed parameters are checked.
pub fn gradcheck_params<F>(
    mut f: F,
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    tol: f64,
    max_elements: Option<(usize, u64)>,
) -> GradcheckReport
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut report = GradcheckReport::new("gradcheck_params", tol);

    let mut g = Graph::new();
    let out = match f(&mut g, store) {
        Ok(o) => o,
        Err(e) => return report.fail(e.to_string()),
    };
    let grads = match g.backward(out) {
        Ok(gr) => gr,
        Err(e) => return report.fail(e.to_string()),
    };
    store.zero_grads();
    g.accumulate_into(&grads, store);

    let mut elements: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    if let Some((n, seed)) = max_elements {
        if n < elements.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = sample(&mut rng, elements.len(), n).into_vec();
            picked.sort_unstable();
            elements = picked.into_iter().map(|i| elements[i]).collect();
        }
    }

    for (id, i) in elements {
        let analytic = store.get(id).grad.as_ref().map_or(0.0, |gr| gr[i]);
        let orig = store.get(id).data()[i];
        let mut vals = [0.0; 3];
        for (slot, v) in [orig - h, orig, orig + h].into_iter().enumerate() {
            store.get_mut(id).data_mut()[i] = v;
            let mut g = Graph::new();
            match f(&mut g, store) {
                Ok(o) => vals[slot] = g.value(o).item(),
                Err(e) => {
                    store.get_mut(id).data_mut()[i] = orig;
                    return report.fail(format!("{}[{i}]: {e}", store.name(id)));
                }
            }
        }
        store.get_mut(id).data_mut()[i] = orig;
        let label = store.name(id).to_string();
        report.compare(&label, i, analytic, vals[0], vals[1], vals[2], h);
        if report.error.is_some() {
            return report;
        }
    }
    store.zero_grads();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Fault;

    #[test]
    fn sum_sigmoid_passes() {
        let x = Tensor::new(vec![5], vec![-1.3, -0.2, 0.0, 0.7, 2.1]).unwrap();
        let r = gradcheck(
            |g, x| {
                let s = g.sigmoid(x)?;
                g.sum(s, None)
            },
            &x,
            1e-5,
            1e-6,
        );
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn flipped_sigmoid_backward_fails() {
        let x = Tensor::new(vec![3], vec![-0.5, 0.1, 0.9]).unwrap();
        let r = gradcheck(
            |g, x| {
                g.inject_fault(Fault::FlipSigmoidBackward);
                let s = g.sigmoid(x)?;
                g.sum(s, None)
            },
            &x,
            1e-5,
            1e-6,
        );
        assert!(!r.passed());
        assert_eq!(r.failures.len(), 3);
    }

    #[test]
    fn abs_at_zero_is_skipped_with_warning() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = gradcheck(
            |g, x| {
                let a = g.abs(x)?;
                g.sum(a, None)
            },
            &x,
            1e-5,
            1e-6,
        );
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.warnings[0].contains("x[1]"));
    }

    #[test]
    fn nan_output_is_a_failure() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let r = gradcheck(
            |g, x| {
                let l = g.log(x)?;
                let s = g.sum(l, None)?;
                // log of a negative value errors on the perturbed evaluations
                let n = g.neg(s)?;
                let e = g.exp(n)?;
                let m = g.scale(e, -1.0)?;
                g.log(m)
            },
            &x,
            1e-5,
            1e-6,
        );
        assert!(!r.passed());
        assert!(r.error.is_some());
    }
}
