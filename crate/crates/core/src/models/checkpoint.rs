use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelPair, TrainMode};
use crate::archive::Archive;
use crate::error::IoContext;
use crate::{PddError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub specialist: GeneratorConfig,
    pub generalist: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

/// Everything needed to regenerate the random streams: batches are derived from
/// `(seed, step)`, so the pair is the whole state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

/// JSON sidecar written next to every checkpoint archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub mode: TrainMode,
    pub ema_decay: f64,
    pub step: u64,
    pub arch_config: ArchConfig,
    pub rng_state: RngState,
    /// Trainer bookkeeping that is not a tensor (optimizer step counts, loss history).
    #[serde(default)]
    pub trainer_state: serde_json::Value,
    /// SHA-256 of the archive bytes.
    pub checksum: String,
}

/// A model pair plus optional optimizer tensors and trainer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub pair: ModelPair,
    pub rng_state: RngState,
    /// Extra tensors (optimizer moments) stored alongside the parameters.
    pub extra: Archive,
    pub trainer_state: serde_json::Value,
}

const SPECIALIST: &str = "specialist.";
const GENERALIST: &str = "generalist.";
const DISCRIMINATOR: &str = "discriminator.";
const SPECTRAL: &str = "discriminator_sn.";
const EXTRA: &str = "extra.";

/// `ckpt_000100.bin` → `ckpt_000100.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl Checkpoint {
    fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        self.pair.specialist.params().write_into(&mut a, SPECIALIST);
        self.pair.generalist.params().write_into(&mut a, GENERALIST);
        self.pair.discriminator.params().write_into(&mut a, DISCRIMINATOR);
        self.pair.discriminator.sn_state().write_into(&mut a, SPECTRAL);
        for (k, t) in &self.extra.tensors {
            a.insert(format!("{EXTRA}{k}"), &t.shape, t.data.clone());
        }
        a.metadata.insert("step".into(), self.pair.step.to_string());
        a.metadata.insert("mode".into(), self.pair.mode.to_string());
        a
    }

    /// Writes the archive to `path` and the sidecar to [`sidecar_path`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_archive().to_bytes();
        let meta = CheckpointMeta {
            mode: self.pair.mode,
            ema_decay: self.pair.ema_decay,
            step: self.pair.step,
            arch_config: self.pair.arch(),
            rng_state: self.rng_state,
            trainer_state: self.trainer_state.clone(),
            checksum: hex::encode(Sha256::digest(&bytes)),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        fs::write(path, &bytes).at(path)?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&meta)?).at(&side)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let side = sidecar_path(path);
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&side).at(&side)?)?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != meta.checksum {
            return Err(PddError::Integrity(format!(
                "{}: checksum {digest} does not match sidecar {}",
                path.display(),
                meta.checksum
            )));
        }
        let archive = Archive::from_bytes(&bytes)?;
        let arch = &meta.arch_config;
        let mut specialist = Generator::new(&arch.specialist, 0)?;
        let mut generalist = Generator::new(&arch.generalist, 0)?;
        let mut discriminator = Discriminator::new(&arch.discriminator, 0)?;
        specialist.params_mut().read_from(&archive, SPECIALIST)?;
        generalist.params_mut().read_from(&archive, GENERALIST)?;
        discriminator.params_mut().read_from(&archive, DISCRIMINATOR)?;
        discriminator.sn_state_mut().read_from(&archive, SPECTRAL)?;
        let mut extra = Archive::default();
        for (k, t) in &archive.tensors {
            if let Some(name) = k.strip_prefix(EXTRA) {
                extra.tensors.insert(name.to_string(), t.clone());
            }
        }
        let mut pair = ModelPair::new(specialist, generalist, discriminator, meta.mode, meta.ema_decay)?;
        pair.step = meta.step;
        Ok(Self { pair, rng_state: meta.rng_state, extra, trainer_state: meta.trainer_state })
    }

    /// Like [`Checkpoint::load`], but fails unless the stored architecture equals `arch`.
    pub fn load_expecting(path: &Path, arch: &ArchConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.pair.arch() != arch {
            return Err(PddError::Config(format!(
                "{} holds architecture {:?}, expected {:?}",
                path.display(),
                ckpt.pair.arch(),
                arch
            )));
        }
        Ok(ckpt)
    }
}

/// Saves just the models (no optimizer state).
pub fn save_checkpoint(pair: &ModelPair, path: &Path) -> Result<()> {
    Checkpoint {
        pair: pair.clone(),
        rng_state: RngState { seed: 0, next_step: pair.step },
        extra: Archive::default(),
        trainer_state: serde_json::Value::Null,
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelPair> {
    Ok(Checkpoint::load(path)?.pair)
}
