//! Specialist/generalist generators, the shared discriminator, coupling modes,
//! EMA updates and checkpoints.

mod checkpoint;
mod discriminator;
mod generator;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::imaging::ImageTensor;
use crate::{PddError, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, ArchConfig, Checkpoint, CheckpointMeta, RngState};
pub use discriminator::{Critic, Discriminator, DiscriminatorConfig};
pub use generator::{bicubic_upsample, Generator, GeneratorConfig};

/// How the generalist is coupled to the specialist during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Pretrained generalist, frozen.
    PddStatic,
    /// Generalist is an exponential moving average of the specialist.
    PddEma,
    /// Same initialization as `PddEma`, but the generalist stays frozen.
    SingleFixed,
    /// Specialist regresses onto the generalist's unlabeled predictions.
    NaiveDistill,
    /// Labeled loss only.
    SupervisedOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] =
        [TrainMode::PddStatic, TrainMode::PddEma, TrainMode::SingleFixed, TrainMode::NaiveDistill, TrainMode::SupervisedOnly];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::PddStatic => "pdd_static",
            TrainMode::PddEma => "pdd_ema",
            TrainMode::SingleFixed => "single_fixed",
            TrainMode::NaiveDistill => "naive_distill",
            TrainMode::SupervisedOnly => "supervised_only",
        }
    }

    /// Modes optimizing the pairwise distance objective.
    pub fn is_pdd(self) -> bool {
        matches!(self, TrainMode::PddStatic | TrainMode::PddEma | TrainMode::SingleFixed)
    }

    /// Modes that never change the generalist.
    pub fn generalist_frozen(self) -> bool {
        self != TrainMode::PddEma
    }

    pub fn uses_generalist(self) -> bool {
        self != TrainMode::SupervisedOnly
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = PddError;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = TrainMode::ALL.iter().map(|m| m.name()).collect();
            PddError::Config(format!("unknown mode `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Specialist `M_S`, generalist `M_G` and the discriminator shared by all adversarial terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub specialist: Generator,
    pub generalist: Generator,
    pub discriminator: Discriminator,
    pub mode: TrainMode,
    pub ema_decay: f64,
    pub step: u64,
}

impl ModelPair {
    pub fn new(specialist: Generator, generalist: Generator, discriminator: Discriminator, mode: TrainMode, ema_decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(PddError::Config(format!("ema_decay {ema_decay} outside [0, 1]")));
        }
        if matches!(mode, TrainMode::PddEma | TrainMode::SingleFixed) && specialist.config() != generalist.config() {
            return Err(PddError::Config(format!("{mode} needs identical specialist and generalist architectures")));
        }
        Ok(Self { specialist, generalist, discriminator, mode, ema_decay, step: 0 })
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            specialist: self.specialist.config().clone(),
            generalist: self.generalist.config().clone(),
            discriminator: self.discriminator.config().clone(),
        }
    }
}

/// `θ_G ← m·θ_G + (1 − m)·θ_S` for every parameter, with `m = pair.ema_decay`.
pub fn ema_update(pair: &mut ModelPair) -> Result<()> {
    if pair.mode != TrainMode::PddEma {
        return Err(PddError::InvalidState(format!("ema_update called in {} mode", pair.mode)));
    }
    if !pair.generalist.params().same_layout(pair.specialist.params()) {
        return Err(PddError::InvalidState("EMA needs identical architectures".into()));
    }
    let m = pair.ema_decay as f32;
    let keep = (1.0 - pair.ema_decay) as f32;
    let ModelPair { specialist, generalist, .. } = pair;
    for ((_, g), (_, s)) in generalist.params_mut().iter_mut().zip(specialist.params().iter()) {
        for (gv, &sv) in g.data_mut().iter_mut().zip(s.data()) {
            *gv = m * *gv + keep * sv;
        }
    }
    Ok(())
}

/// The four predictions `{M_S(x_U), M_G(x_U), M_S(x_L), M_G(x_L)}`.
///
/// The generalist outputs are plain values: nothing computed from them can
/// propagate gradients back into `M_G`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionQuad {
    pub ys_u: ImageTensor,
    pub yg_u: ImageTensor,
    pub ys_l: ImageTensor,
    pub yg_l: ImageTensor,
}

pub fn predict_quad(pair: &ModelPair, x_u: &ImageTensor, x_l: &ImageTensor) -> Result<PredictionQuad> {
    Ok(PredictionQuad {
        ys_u: pair.specialist.predict(x_u)?,
        yg_u: pair.generalist.predict(x_u)?,
        ys_l: pair.specialist.predict(x_l)?,
        yg_l: pair.generalist.predict(x_l)?,
    })
}
