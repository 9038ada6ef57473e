//! Soft decision-tree gate.
//!
//! A complete binary tree of depth `D` has `2^D − 1` internal routing units
//! in heap order and `L = 2^D` leaves. Unit `n` sends an input left with
//! probability `d_n = σ(w_n·h + b_n)`; the probability of reaching a leaf is
//! the product of the branch factors on its root path (`d_n` going left,
//! `1 − d_n` going right). The leaf probabilities form the gate vector `g`.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Where the gate's input representation comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingSource {
    Endogenous,
    Exogenous,
    ExoConcat,
    OracleOnehot,
}

impl GatingSource {
    pub fn as_str(self) -> &'static str {
        match self {
            GatingSource::Endogenous => "endogenous",
            GatingSource::Exogenous => "exogenous",
            GatingSource::ExoConcat => "exo_concat",
            GatingSource::OracleOnehot => "oracle_onehot",
        }
    }
}

impl fmt::Display for GatingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GatingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "endogenous" => Ok(GatingSource::Endogenous),
            "exogenous" => Ok(GatingSource::Exogenous),
            "exo_concat" => Ok(GatingSource::ExoConcat),
            "oracle_onehot" => Ok(GatingSource::OracleOnehot),
            other => Err(Error::Config(format!("unknown gating source {other:?}"))),
        }
    }
}

/// A gate input already placed on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GatingInput {
    pub source: GatingSource,
    pub vector: NodeId,
}

#[derive(Clone, Debug)]
pub struct GateTree {
    pub depth: usize,
    pub input_dim: usize,
    /// Routing hyperplanes, one row per internal node: `[2^D − 1, dim]`.
    pub weight: ParamId,
    /// Routing offsets: `[2^D − 1]`.
    pub bias: ParamId,
}

impl GateTree {
    /// Weights start uniform in ±1/√dim and offsets at zero, so the initial
    /// gate is close to uniform.
    pub fn new(store: &mut ParamStore, name: &str, depth: usize, input_dim: usize, rng: &mut Rng) -> Result<Self> {
        if depth == 0 || depth > 16 {
            return Err(Error::Config(format!("tree depth {depth} outside 1..=16")));
        }
        if input_dim == 0 {
            return Err(Error::Config("tree input width must be positive".into()));
        }
        let n = (1 << depth) - 1;
        let bound = 1.0 / (input_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w: Vec<f64> = (0..n * input_dim).map(|_| dist.sample(rng)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![n, input_dim], w)?,
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n]), ParamKind::Trainable);
        Ok(GateTree {
            depth,
            input_dim,
            weight,
            bias,
        })
    }

    pub fn internal_nodes(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn param_count(&self) -> usize {
        self.internal_nodes() * (self.input_dim + 1)
    }

    fn check_input(&self, g: &Graph, h: NodeId) -> Result<()> {
        let s = g.shape(h);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::dim(format!("gate expects [B, {}], got {s:?}", self.input_dim)));
        }
        Ok(())
    }

    /// Left-child probability of every internal node: `[B, 2^D − 1]`.
    pub fn routing(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        self.check_input(g, h)?;
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let a = g.linear(h, w, b)?;
        g.sigmoid(a)
    }

    /// Left-child probability of a single node: `[B]`.
    pub fn route(&self, g: &mut Graph, store: &ParamStore, node: usize, h: NodeId) -> Result<NodeId> {
        if node >= self.internal_nodes() {
            return Err(Error::dim(format!(
                "node {node} outside a tree with {} internal nodes",
                self.internal_nodes()
            )));
        }
        let d = self.routing(g, store, h)?;
        g.column(d, node)
    }

    /// Leaf-reach probabilities `[B, 2^D]`; every row sums to one.
    pub fn leaf_probabilities(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        let d = self.routing(g, store, h)?;
        g.leaf_probabilities(d, self.depth)
    }

    /// Gate vector for a prepared gating input. Oracle inputs must be one-hot
    /// rows; the tree over them is still learned.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, input: GatingInput) -> Result<NodeId> {
        if input.source == GatingSource::OracleOnehot {
            let v = g.value(input.vector);
            let cols = v.shape().get(1).copied().unwrap_or(0);
            for r in 0..v.shape()[0] {
                let row = &v.data()[r * cols..(r + 1) * cols];
                let ones = row.iter().filter(|&&x| x == 1.0).count();
                let zeros = row.iter().filter(|&&x| x == 0.0).count();
                if ones != 1 || ones + zeros != cols {
                    return Err(Error::Contract(format!("oracle gate input row {r} is not one-hot")));
                }
            }
        }
        self.leaf_probabilities(g, store, input.vector)
    }
}

/// One-hot rows for class ids.
pub fn one_hot(classes: &[usize], width: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * width];
    for (r, &c) in classes.iter().enumerate() {
        if c >= width {
            return Err(Error::Contract(format!("class {c} outside {width} classes")));
        }
        data[r * width + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_node_routes_half() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init");
        let tree = GateTree::new(&mut store, "gate", 1, 3, &mut r).unwrap();
        store.set_data(tree.weight, &[0.0; 3]).unwrap();
        let mut g = Graph::new();
        let h = g
            .constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 9.0]).unwrap())
            .unwrap();
        let d = tree.route(&mut g, &store, 0, h).unwrap();
        assert_eq!(g.value(d).data(), &[0.5, 0.5]);
        let mu = tree.leaf_probabilities(&mut g, &store, h).unwrap();
        assert_eq!(g.value(mu).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn route_direct_evaluation() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init");
        let tree = GateTree::new(&mut store, "gate", 1, 2, &mut r).unwrap();
        store.set_data(tree.weight, &[10.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let d = tree.route(&mut g, &store, 0, h).unwrap();
        assert!((g.value(d).item() - 0.999_954_602_131_297_6).abs() < 1e-15);
    }

    #[test]
    fn depth_three_has_eight_leaves() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init");
        let tree = GateTree::new(&mut store, "gate", 3, 784, &mut r).unwrap();
        assert_eq!(tree.leaves(), 8);
        assert_eq!(tree.param_count(), 7 * 785);
    }

    #[test]
    fn oracle_input_must_be_one_hot() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init");
        let tree = GateTree::new(&mut store, "gate", 2, 3, &mut r).unwrap();
        let mut g = Graph::new();
        let bad = g
            .constant(Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.0]).unwrap())
            .unwrap();
        let input = GatingInput {
            source: GatingSource::OracleOnehot,
            vector: bad,
        };
        assert!(matches!(tree.gate(&mut g, &store, input), Err(Error::Contract(_))));
        let good = g.constant(one_hot(&[2], 3).unwrap()).unwrap();
        let input = GatingInput {
            source: GatingSource::OracleOnehot,
            vector: good,
        };
        assert!(tree.gate(&mut g, &store, input).is_ok());
    }

    #[test]
    fn unknown_source_tag() {
        assert!("pixels".parse::<GatingSource>().is_err());
        assert_eq!("exo_concat".parse::<GatingSource>().unwrap(), GatingSource::ExoConcat);
    }
}
