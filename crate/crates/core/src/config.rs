//! Declarative description of one run.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::GatingSource;

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $s),+ }
            }

            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    MnistR,
    MnistRs,
    DspritesSynth,
}

string_enum!(DatasetName {
    MnistR => "mnist_r",
    MnistRs => "mnist_rs",
    DspritesSynth => "dsprites_synth",
});

impl DatasetName {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetName::MnistR | DatasetName::MnistRs => 10,
            DatasetName::DspritesSynth => 3,
        }
    }

    pub fn image_size(self) -> (usize, usize) {
        match self {
            DatasetName::MnistR | DatasetName::MnistRs => (28, 28),
            DatasetName::DspritesSynth => (64, 64),
        }
    }

    /// Exogenous variables annotated on this dataset.
    pub fn exo_targets(self) -> &'static [ExoTarget] {
        match self {
            DatasetName::MnistR => &[ExoTarget::Rotation],
            DatasetName::MnistRs => &[ExoTarget::Rotation, ExoTarget::Scale],
            DatasetName::DspritesSynth => &[ExoTarget::Scale],
        }
    }

    /// The exogenous variable used by default for gating and dispelling.
    pub fn primary_exo(self) -> ExoTarget {
        self.exo_targets()[0]
    }

    pub fn needs_mnist(self) -> bool {
        !matches!(self, DatasetName::DspritesSynth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExoTarget {
    Rotation,
    Scale,
}

string_enum!(ExoTarget {
    Rotation => "rotation",
    Scale => "scale",
});

pub const ROTATION_CLASSES: usize = 18;
pub const SCALE_CLASSES: usize = 10;
pub const ROTATION_BIN_DEG: f64 = 10.0;
pub const SCALE_BIN: f64 = 0.05;

impl ExoTarget {
    pub fn num_classes(self) -> usize {
        match self {
            ExoTarget::Rotation => ROTATION_CLASSES,
            ExoTarget::Scale => SCALE_CLASSES,
        }
    }

    /// Bin of a continuous value, clamped to the valid class range.
    pub fn class_of(self, value: f64) -> usize {
        let raw = match self {
            ExoTarget::Rotation => ((value + 90.0) / ROTATION_BIN_DEG).floor(),
            ExoTarget::Scale => ((value - 0.5) / SCALE_BIN).floor(),
        };
        (raw.max(0.0) as usize).min(self.num_classes() - 1)
    }

    /// Center of a class bin, used to decode a predicted class back to a value.
    pub fn bin_center(self, class: usize) -> f64 {
        match self {
            ExoTarget::Rotation => -90.0 + ROTATION_BIN_DEG * (class as f64 + 0.5),
            ExoTarget::Scale => 0.5 + SCALE_BIN * (class as f64 + 0.5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    SimpleEnsemble,
    TreeGated,
    ExoTreeGated,
    Oracle,
    Thin,
}

string_enum!(Variant {
    Baseline => "baseline",
    SimpleEnsemble => "simple_ensemble",
    TreeGated => "tree_gated",
    ExoTreeGated => "exo_tree_gated",
    Oracle => "oracle",
    Thin => "thin",
});

/// Gate input as named on the command line. `exogenous_*` pins which frozen
/// network feeds the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingChoice {
    Endogenous,
    ExogenousRotation,
    ExogenousScale,
    ExoConcat,
    OracleOnehot,
}

string_enum!(GatingChoice {
    Endogenous => "endogenous",
    ExogenousRotation => "exogenous_rotation",
    ExogenousScale => "exogenous_scale",
    ExoConcat => "exo_concat",
    OracleOnehot => "oracle_onehot",
});

/// Fully resolved gating: the tape-level source plus the exogenous variables
/// whose frozen networks (or labels, for the oracle) feed it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedGating {
    pub source: GatingSource,
    pub exo: Vec<ExoTarget>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub val_size: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 15,
            batch_size: 32,
            lr: 1e-3,
            eval_every: 500,
            val_size: 256,
            max_steps: None,
        }
    }
}

/// Optional truncation of the splits, for smoke runs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

pub const DEFAULT_LAMBDA: f64 = 0.005;
pub const LAMBDA_GRID: [f64; 7] = [0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5];
pub const ENSEMBLE_SIZE: usize = 8;
pub const TREE_DEPTH: usize = 3;
pub const EXPERT_HIDDEN: usize = 32;
pub const BASELINE_HIDDEN: usize = 256;
pub const EXO_HIDDEN: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub variant: Variant,
    pub gating: Option<GatingChoice>,
    pub lambda: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub limits: Limits,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetName, variant: Variant, seed: u64) -> Self {
        ExperimentConfig {
            dataset,
            variant,
            gating: None,
            lambda: if variant == Variant::Thin { DEFAULT_LAMBDA } else { 0.0 },
            seed,
            schedule: Schedule::default(),
            limits: Limits::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        if self.variant == Variant::Thin && self.lambda <= 0.0 {
            return Err(Error::Config("variant thin needs lambda > 0".into()));
        }
        if self.variant != Variant::Thin && self.lambda != 0.0 {
            return Err(Error::Config(format!(
                "lambda applies to variant thin only, got {} for {}",
                self.lambda, self.variant
            )));
        }
        let s = &self.schedule;
        if s.batch_size < 2 || s.epochs == 0 || s.eval_every == 0 || !(s.lr > 0.0) {
            return Err(Error::Config(format!("invalid schedule {s:?}")));
        }
        self.resolved_gating().map(|_| ())
    }

    /// Gating after applying the variant's default and any override.
    pub fn resolved_gating(&self) -> Result<Option<ResolvedGating>> {
        let ds = self.dataset;
        let exo_choice = |c: GatingChoice| -> Result<ResolvedGating> {
            let pick = |t: ExoTarget| -> Result<ResolvedGating> {
                if !ds.exo_targets().contains(&t) {
                    return Err(Error::Config(format!("{ds} has no {t} annotation")));
                }
                Ok(ResolvedGating {
                    source: GatingSource::Exogenous,
                    exo: vec![t],
                })
            };
            match c {
                GatingChoice::ExogenousRotation => pick(ExoTarget::Rotation),
                GatingChoice::ExogenousScale => pick(ExoTarget::Scale),
                GatingChoice::ExoConcat => {
                    if ds.exo_targets().len() < 2 {
                        return Err(Error::Config(format!("{ds} has a single exogenous variable")));
                    }
                    Ok(ResolvedGating {
                        source: GatingSource::ExoConcat,
                        exo: ds.exo_targets().to_vec(),
                    })
                }
                other => Err(Error::Config(format!("{other} is not an exogenous gating source"))),
            }
        };
        let default_exo = || ResolvedGating {
            source: GatingSource::Exogenous,
            exo: vec![ds.primary_exo()],
        };
        match (self.variant, self.gating) {
            (Variant::Baseline | Variant::SimpleEnsemble, None) => Ok(None),
            (Variant::Baseline | Variant::SimpleEnsemble, Some(c)) => Err(Error::Config(format!(
                "variant {} has no gate to feed with {c}",
                self.variant
            ))),
            (Variant::TreeGated, None | Some(GatingChoice::Endogenous)) => Ok(Some(ResolvedGating {
                source: GatingSource::Endogenous,
                exo: vec![],
            })),
            (Variant::TreeGated, Some(GatingChoice::OracleOnehot)) => {
                Err(Error::Config("use variant oracle for one-hot gating".into()))
            }
            (Variant::TreeGated, Some(c)) => exo_choice(c).map(Some),
            (Variant::Oracle, None | Some(GatingChoice::OracleOnehot)) => Ok(Some(ResolvedGating {
                source: GatingSource::OracleOnehot,
                exo: vec![ds.primary_exo()],
            })),
            (Variant::Oracle, Some(c)) => Err(Error::Config(format!(
                "variant oracle gates on one-hot labels, not {c}"
            ))),
            (Variant::ExoTreeGated | Variant::Thin, None) => Ok(Some(default_exo())),
            (Variant::ExoTreeGated | Variant::Thin, Some(GatingChoice::Endogenous | GatingChoice::OracleOnehot)) => {
                Err(Error::Config(format!(
                    "variant {} must gate on an exogenous representation",
                    self.variant
                )))
            }
            (Variant::ExoTreeGated | Variant::Thin, Some(c)) => exo_choice(c).map(Some),
        }
    }

    /// Frozen exogenous networks this run needs, in a fixed order.
    pub fn required_exo(&self) -> Result<Vec<ExoTarget>> {
        let mut out: Vec<ExoTarget> = match self.resolved_gating()? {
            Some(r) if r.source != GatingSource::OracleOnehot => r.exo,
            _ => vec![],
        };
        if self.variant == Variant::Thin && !out.contains(&self.dataset.primary_exo()) {
            out.insert(0, self.dataset.primary_exo());
        }
        Ok(out)
    }
}
