//! Layers and the two network shapes built from them: the convolutional
//! representation network and the fully connected classifier head.

use rand::distributions::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Kaiming-uniform values for a ReLU layer with the given fan-in.
fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Result<Self> {
        if padding == Padding::Same && kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: same padding needs an odd kernel, got {kernel}"
            )));
        }
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), ParamKind::Trainable);
        Ok(Conv2dLayer {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl DenseLayer {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[fan_out, fan_in], fan_in, rng),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamKind::Trainable);
        DenseLayer {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub features: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::full(&[features], 1.0),
            ParamKind::Trainable,
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[features]), ParamKind::Trainable);
        let running_mean = store.add(
            format!("{name}.running_mean"),
            Tensor::zeros(&[features]),
            ParamKind::Buffer,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            Tensor::full(&[features], 1.0),
            ParamKind::Buffer,
        );
        BatchNormLayer {
            gamma,
            beta,
            running_mean,
            running_var,
            features,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Normalizes over axis 1. In training mode the batch statistics are used
    /// and the running-statistic update is recorded on the graph; the caller
    /// applies it with [`apply_buffer_updates`]. Evaluation mode reads the
    /// running statistics only.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, train: bool) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        if !train {
            let rm = store.get(self.running_mean).data().to_vec();
            let rv = store.get(self.running_var).data().to_vec();
            return Ok(g.batch_norm(x, gamma, beta, Some((&rm, &rv)), self.eps)?.0);
        }
        let (out, stats) = g.batch_norm(x, gamma, beta, None, self.eps)?;
        let stats = stats.expect("training mode returns batch statistics");
        let m = self.momentum;
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0).max(1.0);
        let new_mean: Vec<f64> = store
            .get(self.running_mean)
            .data()
            .iter()
            .zip(&stats.mean)
            .map(|(r, b)| (1.0 - m) * r + m * b)
            .collect();
        let new_var: Vec<f64> = store
            .get(self.running_var)
            .data()
            .iter()
            .zip(&stats.var)
            .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
            .collect();
        g.record_buffer_update(self.running_mean, new_mean);
        g.record_buffer_update(self.running_var, new_var);
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        2 * self.features
    }
}

/// Writes recorded running-statistic updates back into `store`.
pub fn apply_buffer_updates(g: &mut Graph, store: &mut ParamStore) -> Result<()> {
    for (id, values) in g.take_buffer_updates() {
        store.set_data(id, &values)?;
    }
    Ok(())
}

pub const REPR_CHANNELS: usize = 16;
pub const REPR_KERNEL: usize = 3;

/// Conv(16@3×3) → BN → ReLU → MaxPool(2) → Conv(16@3×3) → BN → ReLU →
/// MaxPool(2) → flatten.
#[derive(Clone, Debug)]
pub struct RepresentationNet {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNormLayer,
    pub height: usize,
    pub width: usize,
}

impl RepresentationNet {
    pub fn new(store: &mut ParamStore, name: &str, height: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        let c = REPR_CHANNELS;
        Ok(RepresentationNet {
            conv1: Conv2dLayer::new(
                store,
                &format!("{name}.conv1"),
                1,
                c,
                REPR_KERNEL,
                1,
                Padding::Same,
                rng,
            )?,
            bn1: BatchNormLayer::new(store, &format!("{name}.bn1"), c),
            conv2: Conv2dLayer::new(
                store,
                &format!("{name}.conv2"),
                c,
                c,
                REPR_KERNEL,
                1,
                Padding::Same,
                rng,
            )?,
            bn2: BatchNormLayer::new(store, &format!("{name}.bn2"), c),
            height,
            width,
        })
    }

    /// Width of the flattened embedding: 784 for 28×28, 4096 for 64×64.
    pub fn output_dim(&self) -> usize {
        Self::output_dim_for(self.height, self.width)
    }

    pub fn output_dim_for(height: usize, width: usize) -> usize {
        let (h, w) = (height.div_ceil(2).div_ceil(2), width.div_ceil(2).div_ceil(2));
        REPR_CHANNELS * h * w
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: NodeId, train: bool) -> Result<NodeId> {
        let s = g.shape(images);
        if s.len() != 4 || s[1] != 1 || s[2] != self.height || s[3] != self.width {
            return Err(Error::dim(format!(
                "representation net expects [B, 1, {}, {}], got {s:?}",
                self.height, self.width
            )));
        }
        let x = self.conv1.forward(g, store, images)?;
        let x = self.bn1.forward(g, store, x, train)?;
        let x = g.relu(x)?;
        let x = g.maxpool2d(x)?;
        let x = self.conv2.forward(g, store, x)?;
        let x = self.bn2.forward(g, store, x, train)?;
        let x = g.relu(x)?;
        let x = g.maxpool2d(x)?;
        g.flatten(x)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.bn1.param_count() + self.conv2.param_count() + self.bn2.param_count()
    }
}

/// Fully connected classifier: dense layers with batch norm before each
/// hidden ReLU, raw logits out.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Vec<(DenseLayer, BatchNormLayer)>,
    pub output: DenseLayer,
}

impl MlpHead {
    /// `dims = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("{name}: invalid layer widths {dims:?}")));
        }
        let mut hidden = Vec::new();
        for (i, pair) in dims[..dims.len() - 1].windows(2).enumerate() {
            let dense = DenseLayer::new(store, &format!("{name}.fc{}", i + 1), pair[0], pair[1], rng);
            let bn = BatchNormLayer::new(store, &format!("{name}.bn{}", i + 1), pair[1]);
            hidden.push((dense, bn));
        }
        let n = dims.len();
        let output = DenseLayer::new(store, &format!("{name}.fc{}", n - 1), dims[n - 2], dims[n - 1], rng);
        Ok(MlpHead { hidden, output })
    }

    /// Assembles a head from existing layers, checking that widths chain.
    pub fn from_layers(hidden: Vec<(DenseLayer, BatchNormLayer)>, output: DenseLayer) -> Result<Self> {
        let mut width = None;
        for (d, bn) in &hidden {
            if let Some(w) = width {
                if d.fan_in != w {
                    return Err(Error::dim(format!(
                        "dense layer expects {} inputs after a {w}-wide layer",
                        d.fan_in
                    )));
                }
            }
            if bn.features != d.fan_out {
                return Err(Error::dim(format!(
                    "batch norm over {} features after a {}-wide dense layer",
                    bn.features, d.fan_out
                )));
            }
            width = Some(d.fan_out);
        }
        if let Some(w) = width {
            if output.fan_in != w {
                return Err(Error::dim(format!(
                    "output layer expects {} inputs after a {w}-wide layer",
                    output.fan_in
                )));
            }
        }
        Ok(MlpHead { hidden, output })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(self.output.fan_in, |(d, _)| d.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.output.fan_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: NodeId, train: bool) -> Result<NodeId> {
        let s = g.shape(h);
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(Error::dim(format!("head expects [B, {}], got {s:?}", self.input_dim())));
        }
        let mut x = h;
        for (dense, bn) in &self.hidden {
            x = dense.forward(g, store, x)?;
            x = bn.forward(g, store, x, train)?;
            x = g.relu(x)?;
        }
        self.output.forward(g, store, x)
    }

    /// Weights and biases of the dense layers.
    pub fn dense_param_count(&self) -> usize {
        self.hidden.iter().map(|(d, _)| d.param_count()).sum::<usize>() + self.output.param_count()
    }

    /// Dense parameters plus batch-norm scale and shift.
    pub fn param_count(&self) -> usize {
        self.dense_param_count() + self.hidden.iter().map(|(_, bn)| bn.param_count()).sum::<usize>()
    }
}
