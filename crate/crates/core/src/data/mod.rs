//! Datasets: rotated / rotated-and-scaled digits and procedural sprites.
//!
//! Augmented samples are regenerated on demand. Every per-sample draw comes
//! from a generator keyed by `(seed, split, index)`, so a sample is the same
//! no matter when or in which order it is requested, and nothing but the base
//! digits has to be kept in memory.

pub mod archive;
pub mod idx;
pub mod sprites;
pub mod transform;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::config::{DatasetName, ExoTarget};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use idx::{MnistFiles, MnistRaw};

pub const TRAIN_SIZE: usize = 60_000;
pub const TEST_SIZE: usize = 10_000;
/// Generator index where sprite test samples start.
const SPRITE_TEST_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub task_label: usize,
    pub rotation_class: Option<usize>,
    pub scale_class: Option<usize>,
    pub rotation_deg: Option<f64>,
    pub scale: Option<f64>,
}

impl LabeledImage {
    pub fn exo_class(&self, t: ExoTarget) -> Option<usize> {
        match t {
            ExoTarget::Rotation => self.rotation_class,
            ExoTarget::Scale => self.scale_class,
        }
    }

    pub fn exo_value(&self, t: ExoTarget) -> Option<f64> {
        match t {
            ExoTarget::Rotation => self.rotation_deg,
            ExoTarget::Scale => self.scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug)]
enum Source {
    Digits {
        base: MnistRaw,
        split: Split,
        seed: u64,
        scale: bool,
    },
    Sprites {
        seed: u64,
        offset: u64,
    },
    Stored(Vec<LabeledImage>),
}

impl Source {
    fn image_size(&self) -> (usize, usize) {
        match self {
            Source::Digits { base, .. } => (base.rows, base.cols),
            Source::Sprites { .. } => (sprites::SIZE, sprites::SIZE),
            Source::Stored(v) => {
                let s = v.first().map_or(&[1, 1, 1][..], |i| i.pixels.shape());
                (s[1], s[2])
            }
        }
    }

    fn sample(&self, i: usize) -> LabeledImage {
        match self {
            Source::Digits {
                base,
                split,
                seed,
                scale,
            } => {
                let (angle, s) = augmentation(*seed, *split, i as u64, *scale);
                let raw: Vec<f64> = base.image(i).iter().map(|&b| b as f64 / 255.0).collect();
                let px = transform::affine(&raw, base.rows, base.cols, angle, s.unwrap_or(1.0));
                LabeledImage {
                    pixels: Tensor::new(vec![1, base.rows, base.cols], px).expect("canvas size"),
                    task_label: base.labels[i] as usize,
                    rotation_class: Some(ExoTarget::Rotation.class_of(angle)),
                    scale_class: s.map(|v| ExoTarget::Scale.class_of(v)),
                    rotation_deg: Some(angle),
                    scale: s,
                }
            }
            Source::Sprites { seed, offset } => {
                let l = sprites::draw_latents(*seed, offset + i as u64);
                LabeledImage {
                    pixels: Tensor::new(vec![1, sprites::SIZE, sprites::SIZE], sprites::render(&l))
                        .expect("canvas size"),
                    task_label: l.shape,
                    rotation_class: None,
                    scale_class: Some(ExoTarget::Scale.class_of(l.scale)),
                    rotation_deg: None,
                    scale: Some(l.scale),
                }
            }
            Source::Stored(v) => v[i].clone(),
        }
    }
}

/// Rotation in degrees and, when `scale` is set, the scale factor drawn for
/// digit `index` of a split. The angle does not depend on `scale`.
pub fn augmentation(seed: u64, split: Split, index: u64, scale: bool) -> (f64, Option<f64>) {
    let mut r = rng::keyed(seed, &format!("augment.{}", split.as_str()), index);
    let angle: f64 = r.gen_range(-90.0..=90.0);
    let s = scale.then(|| r.gen_range(0.5..=1.0));
    (angle, s)
}

/// Images stacked for one forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 1, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub rotation_class: Vec<Option<usize>>,
    pub scale_class: Vec<Option<usize>>,
    pub rotation_deg: Vec<Option<f64>>,
    pub scale: Vec<Option<f64>>,
}

impl Batch {
    pub fn from_samples(samples: &[LabeledImage]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (h, w) = (first.pixels.shape()[1], first.pixels.shape()[2]);
        let mut data = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if s.pixels.shape() != [1, h, w] {
                return Err(Error::dim("images of different sizes in one batch"));
            }
            data.extend_from_slice(s.pixels.data());
        }
        Ok(Batch {
            images: Tensor::new(vec![samples.len(), 1, h, w], data)?,
            labels: samples.iter().map(|s| s.task_label).collect(),
            rotation_class: samples.iter().map(|s| s.rotation_class).collect(),
            scale_class: samples.iter().map(|s| s.scale_class).collect(),
            rotation_deg: samples.iter().map(|s| s.rotation_deg).collect(),
            scale: samples.iter().map(|s| s.scale).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Exogenous class of every sample; errors if any sample lacks it.
    pub fn exo_classes(&self, t: ExoTarget) -> Result<Vec<usize>> {
        let col = match t {
            ExoTarget::Rotation => &self.rotation_class,
            ExoTarget::Scale => &self.scale_class,
        };
        col.iter()
            .map(|c| c.ok_or_else(|| Error::Config(format!("samples carry no {t} label"))))
            .collect()
    }

    pub fn exo_values(&self, t: ExoTarget) -> Result<Vec<f64>> {
        let col = match t {
            ExoTarget::Rotation => &self.rotation_deg,
            ExoTarget::Scale => &self.scale,
        };
        col.iter()
            .map(|c| c.ok_or_else(|| Error::Config(format!("samples carry no {t} value"))))
            .collect()
    }
}

/// An ordered view onto a sample source.
#[derive(Clone, Debug)]
pub struct SampleSet {
    source: Arc<Source>,
    indices: Vec<u32>,
}

impl SampleSet {
    fn over(source: Source, len: usize) -> Self {
        SampleSet {
            source: Arc::new(source),
            indices: (0..len as u32).collect(),
        }
    }

    pub fn from_images(images: Vec<LabeledImage>) -> Self {
        let n = images.len();
        Self::over(Source::Stored(images), n)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.source.image_size()
    }

    pub fn get(&self, i: usize) -> LabeledImage {
        self.source.sample(self.indices[i] as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = LabeledImage> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn batch(&self, positions: &[usize]) -> Result<Batch> {
        let samples: Vec<LabeledImage> = positions.iter().map(|&i| self.get(i)).collect();
        Batch::from_samples(&samples)
    }

    /// Consecutive batches over the whole set in order; the last may be short.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let n = self.len();
        (0..n.div_ceil(size)).map(move |b| {
            let pos: Vec<usize> = (b * size..((b + 1) * size).min(n)).collect();
            self.batch(&pos)
        })
    }

    pub fn take(&self, n: usize) -> Self {
        SampleSet {
            source: Arc::clone(&self.source),
            indices: self.indices[..n.min(self.len())].to_vec(),
        }
    }

    pub fn select(&self, positions: &[usize]) -> Self {
        SampleSet {
            source: Arc::clone(&self.source),
            indices: positions.iter().map(|&p| self.indices[p]).collect(),
        }
    }

    /// Source-level index of each element, for traceability in exports.
    pub fn source_indices(&self) -> &[u32] {
        &self.indices
    }

    /// Randomly carves `n` samples out as a held-out slice; returns
    /// `(rest, held_out)`.
    pub fn holdout(&self, n: usize, seed: u64) -> Result<(Self, Self)> {
        if n >= self.len() {
            return Err(Error::Config(format!("cannot hold out {n} of {} samples", self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, "holdout"));
        let (held, rest) = order.split_at(n);
        let mut rest = rest.to_vec();
        rest.sort_unstable();
        let mut held = held.to_vec();
        held.sort_unstable();
        Ok((self.select(&rest), self.select(&held)))
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub name: DatasetName,
    pub seed: u64,
    pub train: SampleSet,
    pub test: SampleSet,
}

impl DatasetSplit {
    pub fn truncated(mut self, train: Option<usize>, test: Option<usize>) -> Self {
        if let Some(n) = train {
            self.train = self.train.take(n);
        }
        if let Some(n) = test {
            self.test = self.test.take(n);
        }
        self
    }
}

fn build_digits(name: DatasetName, train: MnistRaw, test: MnistRaw, seed: u64, scale: bool) -> DatasetSplit {
    let (ntr, nte) = (train.len(), test.len());
    DatasetSplit {
        name,
        seed,
        train: SampleSet::over(
            Source::Digits {
                base: train,
                split: Split::Train,
                seed,
                scale,
            },
            ntr,
        ),
        test: SampleSet::over(
            Source::Digits {
                base: test,
                split: Split::Test,
                seed,
                scale,
            },
            nte,
        ),
    }
}

/// Digits under one uniform rotation in [−90°, 90°] each.
pub fn build_mnist_r(train: MnistRaw, test: MnistRaw, seed: u64) -> DatasetSplit {
    build_digits(DatasetName::MnistR, train, test, seed, false)
}

/// Digits under a uniform rotation and a uniform scale in [0.5, 1]. The
/// rotation of each sample matches `build_mnist_r` with the same seed.
pub fn build_mnist_rs(train: MnistRaw, test: MnistRaw, seed: u64) -> DatasetSplit {
    build_digits(DatasetName::MnistRs, train, test, seed, true)
}

pub fn build_dsprites_synth(seed: u64) -> DatasetSplit {
    build_dsprites_sized(seed, TRAIN_SIZE, TEST_SIZE)
}

pub fn build_dsprites_sized(seed: u64, train: usize, test: usize) -> DatasetSplit {
    DatasetSplit {
        name: DatasetName::DspritesSynth,
        seed,
        train: SampleSet::over(Source::Sprites { seed, offset: 0 }, train),
        test: SampleSet::over(
            Source::Sprites {
                seed,
                offset: SPRITE_TEST_OFFSET,
            },
            test,
        ),
    }
}

/// Builds any dataset, reading MNIST from `files` when needed.
pub fn build(name: DatasetName, seed: u64, files: Option<&MnistFiles>) -> Result<DatasetSplit> {
    match name {
        DatasetName::DspritesSynth => Ok(build_dsprites_synth(seed)),
        DatasetName::MnistR | DatasetName::MnistRs => {
            let files = files.ok_or_else(|| Error::Config(format!("{name} needs the MNIST files")))?;
            let (train, test) = (files.read_train()?, files.read_test()?);
            Ok(if name == DatasetName::MnistR {
                build_mnist_r(train, test, seed)
            } else {
                build_mnist_rs(train, test, seed)
            })
        }
    }
}

/// Plain digits with no augmentation, as labeled images.
pub fn load_mnist_idx(images: &std::path::Path, labels: &std::path::Path) -> Result<Vec<LabeledImage>> {
    let raw = idx::read_mnist(images, labels)?;
    Ok((0..raw.len())
        .map(|i| LabeledImage {
            pixels: Tensor::new(
                vec![1, raw.rows, raw.cols],
                raw.image(i).iter().map(|&b| b as f64 / 255.0).collect(),
            )
            .expect("canvas size"),
            task_label: raw.labels[i] as usize,
            rotation_class: None,
            scale_class: None,
            rotation_deg: None,
            scale: None,
        })
        .collect())
}
