//! Per-command JSON configs. Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use pdd::degradation::{Domain, PipelineConfig};
use pdd::evalkit::Role;
use pdd::features::{BackboneConfig, FeatureConfig};
use pdd::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

/// Reads and parses `path`; any failure is a usage error.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

fn resolve_features(base: &Path, f: &mut FeatureConfig) {
    if let BackboneConfig::Vgg19 { path } = &mut f.backbone {
        resolve(base, path);
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
}

/// `synth`: degrade a directory of HR PNGs (or a generated corpus) into a dataset.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub hr_dir: Option<PathBuf>,
    /// Generate the HR images instead of reading them.
    #[serde(default)]
    pub procedural: Option<ProceduralSpec>,
    /// Preset pipeline; mutually exclusive with `pipeline`.
    #[serde(default)]
    pub domain: Option<Domain>,
    #[serde(default)]
    pub pipeline: Option<PipelineConfig>,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_scale() -> usize {
    4
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut c: Self = load(path)?;
        resolve_opt(&base_dir(path), &mut c.hr_dir);
        if c.hr_dir.is_some() == c.procedural.is_some() {
            return Err(CliError::Usage("synth config needs exactly one of `hr_dir` and `procedural`".into()));
        }
        if c.domain.is_some() == c.pipeline.is_some() {
            return Err(CliError::Usage("synth config needs exactly one of `domain` and `pipeline`".into()));
        }
        Ok(c)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        match (&self.pipeline, self.domain) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => PipelineConfig::preset(d, self.scale),
            (None, None) => unreachable!("validated on load"),
        }
    }
}

pub fn load_train(path: &Path) -> Result<TrainConfig, CliError> {
    let mut c: TrainConfig = load(path)?;
    let base = base_dir(path);
    resolve(&base, &mut c.data.labeled);
    resolve(&base, &mut c.data.unlabeled);
    resolve_opt(&base, &mut c.data.val);
    resolve_opt(&base, &mut c.init.specialist);
    resolve_opt(&base, &mut c.init.generalist);
    resolve_opt(&base, &mut c.init.resume);
    resolve_features(&base, &mut c.features);
    Ok(c)
}

fn default_role() -> Role {
    Role::Specialist
}

/// `eval`: score one network of a checkpoint on a manifest.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Not needed for the bicubic baseline.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub manifest: PathBuf,
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default)]
    pub color_correction: bool,
    /// CSV of `image_id,metric_name,value` rows merged into the report.
    #[serde(default)]
    pub external_metrics: Option<PathBuf>,
}

impl EvalConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut c: Self = load(path)?;
        let base = base_dir(path);
        resolve_opt(&base, &mut c.checkpoint);
        resolve(&base, &mut c.manifest);
        resolve_opt(&base, &mut c.external_metrics);
        Ok(c)
    }
}

fn default_tap() -> String {
    "block1_conv2".into()
}

/// `analyze`: feature-distribution gap of two checkpoints' predictions.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub before: PathBuf,
    pub after: PathBuf,
    /// Manifest whose LR side are the labeled inputs.
    pub labeled: PathBuf,
    /// Directory of LR PNGs or a manifest.
    pub unlabeled: PathBuf,
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default = "default_tap")]
    pub tap: String,
    /// Use at most this many images of each set.
    #[serde(default)]
    pub max_images: Option<usize>,
}

impl AnalyzeConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut c: Self = load(path)?;
        let base = base_dir(path);
        for p in [&mut c.before, &mut c.after, &mut c.labeled, &mut c.unlabeled] {
            resolve(&base, p);
        }
        resolve_features(&base, &mut c.features);
        if c.role == Role::Bicubic {
            return Err(CliError::Usage("analyze compares trained networks; role must be specialist or generalist".into()));
        }
        Ok(c)
    }
}
