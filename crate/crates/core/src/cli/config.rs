use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use drape::energy::EnergyWeights;
use drape::model::EmbeddingMode;
use drape::resizer::TightnessRange;
use drape::trainer::TrainConfig;

use super::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub body: PathBuf,
    pub garment: PathBuf,
    /// Raw pose pool; required for pose training.
    pub poses: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub count: usize,
    pub d_min: f64,
    pub train_fraction: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            count: 3000,
            d_min: 0.5,
            train_fraction: 0.85,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embedding: EmbeddingMode,
    /// Overrides the garment file's trainable-weights flag.
    pub trainable_weights: Option<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embedding: EmbeddingMode::Mlp,
            trainable_weights: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResizeSection {
    /// Defaults to the procedural humanoid's ranges.
    pub range: Option<TightnessRange>,
    pub samples_per_epoch: usize,
    pub validation_samples: usize,
}

impl Default for ResizeSection {
    fn default() -> Self {
        Self {
            range: None,
            samples_per_epoch: 512,
            validation_samples: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Output {
    pub dir: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Self { dir: "run".into() }
    }
}

/// One declarative file per run. Relative paths resolve against the
/// directory holding the file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Inputs,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub energy: EnergyWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub resize: ResizeSection,
    #[serde(default)]
    pub output: Output,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.inputs.body = resolve(base, &cfg.inputs.body);
        cfg.inputs.garment = resolve(base, &cfg.inputs.garment);
        cfg.inputs.poses = cfg.inputs.poses.as_deref().map(|p| resolve(base, p));
        cfg.output.dir = resolve(base, &cfg.output.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("[train] {e}")))?;
        self.energy
            .validate()
            .map_err(|e| CliError::Config(format!("[energy] {e}")))?;
        let s = &self.sampling;
        if s.count == 0 {
            return bad("[sampling] count must be at least 1".into());
        }
        if !(s.d_min.is_finite() && s.d_min >= 0.0) {
            return bad("[sampling] d_min must be finite and non-negative".into());
        }
        if !(s.train_fraction > 0.0 && s.train_fraction <= 1.0) {
            return bad("[sampling] train_fraction must be in (0, 1]".into());
        }
        if self.resize.samples_per_epoch == 0 {
            return bad("[resize] samples_per_epoch must be at least 1".into());
        }
        Ok(())
    }
}
