//! Weak-classifier committees, their gating, and the architecture variants.

use serde::Serialize;

use crate::config::{
    DatasetName, ExoTarget, ExperimentConfig, ResolvedGating, Variant, BASELINE_HIDDEN, ENSEMBLE_SIZE, EXO_HIDDEN,
    EXPERT_HIDDEN, TREE_DEPTH,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{MlpHead, RepresentationNet};
use crate::params::{ParamKind, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::tree::{one_hot, GateTree, GatingInput, GatingSource};

/// A representation network and classifier trained to predict one exogenous
/// variable, then frozen. Owns its parameters.
#[derive(Clone, Debug)]
pub struct ExoStack {
    pub target: ExoTarget,
    pub store: ParamStore,
    pub repr: RepresentationNet,
    pub head: MlpHead,
}

impl ExoStack {
    pub fn new(target: ExoTarget, height: usize, width: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &format!("init.exo.{target}"));
        let repr = RepresentationNet::new(&mut store, "repr", height, width, &mut r)?;
        let head = MlpHead::new(
            &mut store,
            "head",
            &[repr.output_dim(), EXO_HIDDEN, target.num_classes()],
            &mut r,
        )?;
        Ok(ExoStack {
            target,
            store,
            repr,
            head,
        })
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.count(ParamKind::Trainable) == 0
    }

    pub fn output_dim(&self) -> usize {
        self.repr.output_dim()
    }

    /// `(h, logits)` recorded on `g`.
    pub fn forward(&self, g: &mut Graph, images: NodeId, train: bool) -> Result<(NodeId, NodeId)> {
        let h = self.repr.forward(g, &self.store, images, train)?;
        let z = self.head.forward(g, &self.store, h, train)?;
        Ok((h, z))
    }

    /// Evaluation-mode embedding and logits, computed off the caller's tape.
    pub fn embed(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone())?;
        let (h, z) = self.forward(&mut g, x, false)?;
        Ok((g.value(h).clone(), g.value(z).clone()))
    }

    /// The classifier applied to a representation on the caller's tape.
    /// Always evaluation mode; parameters enter as constants once frozen.
    pub fn classify(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        self.head.forward(g, &self.store, h, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    Uniform,
    Tree,
    Oracle,
}

/// `L` weak classifiers mixed by a gate vector.
#[derive(Clone, Debug)]
pub struct EnsembleHead {
    pub experts: Vec<MlpHead>,
    pub mode: GatingMode,
    pub tree: Option<GateTree>,
}

impl EnsembleHead {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        classes: usize,
        mode: GatingMode,
        gate_dim: Option<usize>,
        r: &mut rng::Rng,
    ) -> Result<Self> {
        let experts = (0..ENSEMBLE_SIZE)
            .map(|l| MlpHead::new(store, &format!("expert{l}"), &[input_dim, EXPERT_HIDDEN, classes], r))
            .collect::<Result<Vec<_>>>()?;
        let tree = match (mode, gate_dim) {
            (GatingMode::Uniform, _) => None,
            (_, Some(dim)) => Some(GateTree::new(store, "gate", TREE_DEPTH, dim, r)?),
            (_, None) => return Err(Error::Config("a tree gate needs an input width".into())),
        };
        if let Some(t) = &tree {
            if t.leaves() != experts.len() {
                return Err(Error::Config(format!(
                    "tree with {} leaves for {} experts",
                    t.leaves(),
                    experts.len()
                )));
            }
        }
        Ok(EnsembleHead { experts, mode, tree })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Returns `(z, g, expert logits)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: NodeId,
        gate_input: Option<GatingInput>,
        train: bool,
    ) -> Result<(NodeId, NodeId, Vec<NodeId>)> {
        let experts = self
            .experts
            .iter()
            .map(|e| e.forward(g, store, h, train))
            .collect::<Result<Vec<_>>>()?;
        let b = g.shape(h)[0];
        let gate = match (self.mode, &self.tree, gate_input) {
            (GatingMode::Uniform, _, _) => {
                let l = self.experts.len();
                g.constant(Tensor::full(&[b, l], 1.0 / l as f64))?
            }
            (_, Some(tree), Some(input)) => tree.gate(g, store, input)?,
            _ => return Err(Error::Config("tree gating without a gate input".into())),
        };
        let z = g.mixture(&experts, gate)?;
        Ok((z, gate, experts))
    }

    pub fn dense_param_count(&self) -> usize {
        self.experts.iter().map(MlpHead::dense_param_count).sum::<usize>()
            + self.tree.as_ref().map_or(0, GateTree::param_count)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Single(MlpHead),
    Ensemble(EnsembleHead),
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub z: NodeId,
    /// Gate vector; absent for the single-head baseline.
    pub g: Option<NodeId>,
    pub experts: Vec<NodeId>,
    pub h_endo: NodeId,
    /// Frozen representation feeding the gate or probe, if any.
    pub h_exo: Option<Tensor>,
    /// Probe logits `c_σ(h_exo)`; constant.
    pub z_exo_exo: Option<Tensor>,
    /// Probe logits `c_σ(h_endo)`; differentiable with respect to the
    /// endogenous path only.
    pub z_exo_endo: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
    pub buffers: usize,
    /// Dense weights and biases of the classifier part (head or experts plus
    /// the gate), without batch-norm scale and shift.
    pub head_dense: usize,
    pub representation: usize,
}

#[derive(Clone, Debug)]
pub struct ThinModel {
    pub dataset: DatasetName,
    pub variant: Variant,
    pub gating: Option<ResolvedGating>,
    pub store: ParamStore,
    pub endo: RepresentationNet,
    pub head: Head,
    /// Frozen exogenous stacks, in the order `required_exo` lists them, plus
    /// the probe for monitoring when one was supplied.
    pub exo: Vec<ExoStack>,
}

/// Builds a freshly initialized model for `cfg`. `exo` must hold a frozen
/// stack for every exogenous variable the configuration needs; a stack for the
/// dataset's primary variable is also kept when supplied, so the dispelling
/// measure can be monitored on variants that do not train on it.
pub fn build_variant(cfg: &ExperimentConfig, exo: Vec<ExoStack>) -> Result<ThinModel> {
    cfg.validate()?;
    let gating = cfg.resolved_gating()?;
    let required = cfg.required_exo()?;
    let mut kept = Vec::new();
    let mut pool = exo;
    for t in required
        .iter()
        .copied()
        .chain(std::iter::once(cfg.dataset.primary_exo()))
    {
        if kept.iter().any(|s: &ExoStack| s.target == t) {
            continue;
        }
        match pool.iter().position(|s| s.target == t) {
            Some(i) => {
                let mut s = pool.swap_remove(i);
                s.freeze();
                kept.push(s);
            }
            None if required.contains(&t) => {
                return Err(Error::Config(format!(
                    "variant {} on {} needs a pretrained {t} network",
                    cfg.variant, cfg.dataset
                )))
            }
            None => {}
        }
    }
    let (h, w) = cfg.dataset.image_size();
    for s in &kept {
        if (s.repr.height, s.repr.width) != (h, w) {
            return Err(Error::Config(format!(
                "{} network built for {}×{} images, dataset has {h}×{w}",
                s.target, s.repr.height, s.repr.width
            )));
        }
    }

    let mut store = ParamStore::new();
    let mut r = rng::stream(cfg.seed, "init");
    let endo = RepresentationNet::new(&mut store, "endo", h, w, &mut r)?;
    let d = endo.output_dim();
    let k = cfg.dataset.num_classes();
    let exo_dim = |targets: &[ExoTarget]| -> usize {
        targets
            .iter()
            .map(|t| kept.iter().find(|s| s.target == *t).map_or(0, ExoStack::output_dim))
            .sum()
    };
    let head = match (cfg.variant, &gating) {
        (Variant::Baseline, _) => Head::Single(MlpHead::new(&mut store, "head", &[d, BASELINE_HIDDEN, k], &mut r)?),
        (Variant::SimpleEnsemble, _) => {
            Head::Ensemble(EnsembleHead::new(&mut store, d, k, GatingMode::Uniform, None, &mut r)?)
        }
        (_, Some(rg)) => {
            let (mode, dim) = match rg.source {
                GatingSource::Endogenous => (GatingMode::Tree, d),
                GatingSource::Exogenous | GatingSource::ExoConcat => (GatingMode::Tree, exo_dim(&rg.exo)),
                GatingSource::OracleOnehot => (GatingMode::Oracle, rg.exo.iter().map(|t| t.num_classes()).sum()),
            };
            Head::Ensemble(EnsembleHead::new(&mut store, d, k, mode, Some(dim), &mut r)?)
        }
        (v, None) => return Err(Error::Config(format!("variant {v} resolved without gating"))),
    };
    Ok(ThinModel {
        dataset: cfg.dataset,
        variant: cfg.variant,
        gating,
        store,
        endo,
        head,
        exo: kept,
    })
}

impl ThinModel {
    pub fn exo_stack(&self, t: ExoTarget) -> Option<&ExoStack> {
        self.exo.iter().find(|s| s.target == t)
    }

    /// The frozen stack whose classifier serves as the dispelling probe.
    pub fn probe(&self) -> Option<&ExoStack> {
        self.exo_stack(self.dataset.primary_exo())
    }

    pub fn num_classes(&self) -> usize {
        match &self.head {
            Head::Single(h) => h.output_dim(),
            Head::Ensemble(e) => e.experts[0].output_dim(),
        }
    }

    pub fn gate_leaves(&self) -> Option<usize> {
        match &self.head {
            Head::Single(_) => None,
            Head::Ensemble(e) => Some(e.len()),
        }
    }

    pub fn tree(&self) -> Option<&GateTree> {
        match &self.head {
            Head::Ensemble(e) => e.tree.as_ref(),
            Head::Single(_) => None,
        }
    }

    /// Records a forward pass. Frozen networks always run in evaluation mode
    /// off the tape; `probe` requests the probe logits on both
    /// representations.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, train: bool, probe: bool) -> Result<ForwardOutput> {
        self.forward_with(&self.store, g, batch, train, probe)
    }

    /// [`ThinModel::forward`] reading trainable parameters from `store`, which
    /// must be laid out like `self.store`.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        batch: &Batch,
        train: bool,
        probe: bool,
    ) -> Result<ForwardOutput> {
        let images = g.constant(batch.images.clone())?;
        let h_endo = self.endo.forward(g, store, images, train)?;

        let mut exo_cache: Vec<(ExoTarget, Tensor, Tensor)> = Vec::new();
        let mut exo_of = |t: ExoTarget| -> Result<(Tensor, Tensor)> {
            if let Some((_, h, z)) = exo_cache.iter().find(|(c, _, _)| *c == t) {
                return Ok((h.clone(), z.clone()));
            }
            let s = self
                .exo_stack(t)
                .ok_or_else(|| Error::Config(format!("no frozen {t} network loaded")))?;
            let (h, z) = s.embed(&batch.images)?;
            exo_cache.push((t, h.clone(), z.clone()));
            Ok((h, z))
        };

        let mut h_exo = None;
        let gate_input = match &self.gating {
            None => None,
            Some(rg) => {
                let vector = match rg.source {
                    GatingSource::Endogenous => h_endo,
                    GatingSource::Exogenous => {
                        let (h, _) = exo_of(rg.exo[0])?;
                        h_exo = Some(h.clone());
                        g.constant(h)?
                    }
                    GatingSource::ExoConcat => {
                        let mut parts = Vec::new();
                        for &t in &rg.exo {
                            let (h, _) = exo_of(t)?;
                            parts.push(g.constant(h)?);
                        }
                        let cat = g.concat(&parts)?;
                        h_exo = Some(g.value(cat).clone());
                        cat
                    }
                    GatingSource::OracleOnehot => {
                        let t = rg.exo[0];
                        let classes = batch.exo_classes(t)?;
                        g.constant(one_hot(&classes, t.num_classes())?)?
                    }
                };
                Some(GatingInput {
                    source: rg.source,
                    vector,
                })
            }
        };

        let (z, gate, experts) = match &self.head {
            Head::Single(m) => (m.forward(g, store, h_endo, train)?, None, Vec::new()),
            Head::Ensemble(e) => {
                let (z, gate, ex) = e.forward(g, store, h_endo, gate_input, train)?;
                (z, Some(gate), ex)
            }
        };

        let (mut z_exo_exo, mut z_exo_endo) = (None, None);
        if probe {
            let s = self.probe().ok_or_else(|| {
                Error::Config(format!(
                    "the dispelling probe needs a frozen {} network",
                    self.dataset.primary_exo()
                ))
            })?;
            let (h, z_exo) = exo_of(s.target)?;
            if h_exo.is_none() {
                h_exo = Some(h);
            }
            z_exo_exo = Some(z_exo);
            z_exo_endo = Some(s.classify(g, h_endo)?);
        }

        Ok(ForwardOutput {
            z,
            g: gate,
            experts,
            h_endo,
            h_exo,
            z_exo_exo,
            z_exo_endo,
        })
    }

    /// `c_σ(h)` for the frozen classifier of `t`.
    pub fn exo_logits(&self, g: &mut Graph, t: ExoTarget, h: NodeId) -> Result<NodeId> {
        let s = self
            .exo_stack(t)
            .ok_or_else(|| Error::Config(format!("no frozen {t} network loaded")))?;
        let want = s.head.input_dim();
        if g.shape(h).get(1) != Some(&want) {
            return Err(Error::dim(format!(
                "{t} classifier expects [B, {want}], got {:?}",
                g.shape(h)
            )));
        }
        s.classify(g, h)
    }

    /// Evaluation-mode class predictions.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, false, false)?;
        Ok(argmax_rows(g.value(out.z)))
    }

    pub fn param_report(&self) -> ParamReport {
        let frozen = self
            .exo
            .iter()
            .map(|s| s.store.count(ParamKind::Frozen) + s.store.count(ParamKind::Trainable))
            .sum();
        let buffers = self.store.count(ParamKind::Buffer)
            + self.exo.iter().map(|s| s.store.count(ParamKind::Buffer)).sum::<usize>();
        ParamReport {
            trainable: self.store.count(ParamKind::Trainable),
            frozen,
            buffers,
            head_dense: match &self.head {
                Head::Single(m) => m.dense_param_count(),
                Head::Ensemble(e) => e.dense_param_count(),
            },
            representation: self.endo.param_count(),
        }
    }

    /// Every stored tensor under a checkpoint name. Frozen stacks are nested
    /// under `exo.<target>.`.
    pub fn named_params(&self) -> Vec<(String, ParamKind, Tensor)> {
        let mut out: Vec<(String, ParamKind, Tensor)> = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.kind, e.tensor.clone()))
            .collect();
        for s in &self.exo {
            out.extend(
                s.store
                    .entries()
                    .iter()
                    .map(|e| (format!("exo.{}.{}", s.target, e.name), e.kind, e.tensor.clone())),
            );
        }
        out
    }

    /// Overwrites every value from a checkpoint's named tensors.
    pub fn load_params(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        self.store.load_from(params)?;
        for s in &mut self.exo {
            let prefix = format!("exo.{}.", s.target);
            let own: Vec<(String, Tensor)> = params
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|rest| (rest.to_string(), t.clone())))
                .collect();
            s.store.load_from(&own)?;
        }
        Ok(())
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(z: &Tensor) -> Vec<usize> {
    let k = z.shape().get(1).copied().unwrap_or(1);
    z.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dsprites_sized, LabeledImage};

    fn exo(t: ExoTarget, size: usize) -> ExoStack {
        ExoStack::new(t, size, size, 3).unwrap()
    }

    fn digits_batch(n: usize) -> Batch {
        let samples: Vec<LabeledImage> = (0..n)
            .map(|i| {
                let px = (0..784).map(|p| ((p * 7 + i * 13) % 17) as f64 / 16.0).collect();
                let deg = -85.0 + 10.0 * i as f64;
                LabeledImage {
                    pixels: Tensor::new(vec![1, 28, 28], px).unwrap(),
                    task_label: i % 10,
                    rotation_class: Some(ExoTarget::Rotation.class_of(deg)),
                    scale_class: None,
                    rotation_deg: Some(deg),
                    scale: None,
                }
            })
            .collect();
        Batch::from_samples(&samples).unwrap()
    }

    #[test]
    fn argmax_tie_takes_lowest() {
        let z = Tensor::from_rows(&[vec![1.0, 3.0, 2.0], vec![5.0, 5.0, 1.0]]).unwrap();
        assert_eq!(argmax_rows(&z), vec![1, 0]);
    }

    #[test]
    fn exo_variants_need_their_networks() {
        let cfg = ExperimentConfig::new(DatasetName::MnistR, Variant::Thin, 0);
        assert!(matches!(build_variant(&cfg, vec![]), Err(Error::Config(_))));
        assert!(build_variant(&cfg, vec![exo(ExoTarget::Rotation, 28)]).is_ok());
    }

    #[test]
    fn thin_construction_audit() {
        let cfg = ExperimentConfig::new(DatasetName::MnistR, Variant::Thin, 0);
        let m = build_variant(&cfg, vec![exo(ExoTarget::Rotation, 28)]).unwrap();
        let Head::Ensemble(e) = &m.head else {
            panic!("ensemble expected")
        };
        assert_eq!(e.len(), 8);
        assert_eq!(e.tree.as_ref().unwrap().param_count(), 7 * 785);
        assert!(m.exo[0].is_frozen());
        let rep = m.param_report();
        assert!(rep.frozen > 200_000);
        assert_eq!(rep.head_dense, 8 * 25_450 + 7 * 785);
    }

    #[test]
    fn oracle_gate_width_matches_rotation_bins() {
        let cfg = ExperimentConfig::new(DatasetName::MnistR, Variant::Oracle, 0);
        let m = build_variant(&cfg, vec![]).unwrap();
        assert_eq!(m.tree().unwrap().input_dim, 18);
    }

    #[test]
    fn uniform_mixture_is_expert_mean() {
        let cfg = ExperimentConfig::new(DatasetName::MnistR, Variant::SimpleEnsemble, 1);
        let m = build_variant(&cfg, vec![]).unwrap();
        let batch = digits_batch(4);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch, false, false).unwrap();
        let z = g.value(out.z).data();
        for i in 0..z.len() {
            let mean: f64 = out.experts.iter().map(|&e| g.value(e).data()[i]).sum::<f64>() / 8.0;
            assert!((z[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn exo_gate_ignores_endogenous_parameters() {
        let cfg = ExperimentConfig::new(DatasetName::MnistR, Variant::ExoTreeGated, 1);
        let mut m = build_variant(&cfg, vec![exo(ExoTarget::Rotation, 28)]).unwrap();
        let batch = digits_batch(4);
        let gate = |m: &ThinModel| {
            let mut g = Graph::new();
            let out = m.forward(&mut g, &batch, false, false).unwrap();
            g.value(out.g.unwrap()).clone()
        };
        let before = gate(&m);
        let id = m.store.find("endo.conv1.weight").unwrap();
        for v in m.store.get_mut(id).data_mut() {
            *v += 0.3;
        }
        assert_eq!(gate(&m), before);
    }

    #[test]
    fn probe_gradients_skip_frozen_parameters() {
        let cfg = ExperimentConfig::new(DatasetName::MnistR, Variant::Thin, 1);
        let m = build_variant(&cfg, vec![exo(ExoTarget::Rotation, 28)]).unwrap();
        let batch = digits_batch(3);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch, true, true).unwrap();
        let s = g.sum(out.z_exo_endo.unwrap(), None).unwrap();
        let grads = g.backward(s).unwrap();
        let names: Vec<&str> = g.param_grads(&grads).map(|(id, _)| m.store.name(id)).collect();
        assert!(names.iter().all(|n| n.starts_with("endo.")), "{names:?}");
        assert!(!names.is_empty());
    }

    #[test]
    fn sprites_model_runs() {
        let ds = build_dsprites_sized(0, 4, 1);
        let batch = ds.train.batch(&[0, 1, 2, 3]).unwrap();
        let cfg = ExperimentConfig::new(DatasetName::DspritesSynth, Variant::Thin, 2);
        let m = build_variant(&cfg, vec![exo(ExoTarget::Scale, 64)]).unwrap();
        let p = m.predict(&batch).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|&c| c < 3));
    }
}
