//! Experiment configuration: one TOML file drives generation, training,
//! adaptation, attacks, evaluation, and reporting. Parsing is strict —
//! unknown keys are rejected with their location — and every artifact
//! records the SHA-256 of the config bytes so runs can't be mixed up.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversary::AttackKind;
use crate::pipeline::AdaptConfig;
use crate::scene::{CorruptionConfig, SceneConfig, ShiftConfig};
use crate::segnet::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub num_classes: usize,
    pub points_per_scene: usize,
    /// Simplex weights over classes; empty means uniform.
    pub class_frequency: Vec<f64>,
    pub extent: f64,
    pub source_scenes: usize,
    pub target_scenes: usize,
    /// Domain shift applied to target scenes.
    pub shift: ShiftConfig,
    /// Weather corruption applied to target scenes after the shift.
    pub corruption: CorruptionConfig,
}

impl Default for SceneSection {
    fn default() -> Self {
        SceneSection {
            num_classes: 4,
            points_per_scene: 600,
            class_frequency: Vec::new(),
            extent: 4.0,
            source_scenes: 4,
            target_scenes: 4,
            shift: ShiftConfig {
                rotation_z: 0.4,
                scale: [1.1, 0.9, 1.0],
                dropout: 0.1,
                jitter_sigma: 0.03,
            },
            corruption: CorruptionConfig::default(),
        }
    }
}

impl SceneSection {
    /// Scene-generator config for one scene of the given domain.
    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        let freq = if self.class_frequency.is_empty() {
            vec![1.0 / self.num_classes as f64; self.num_classes]
        } else {
            self.class_frequency.clone()
        };
        SceneConfig {
            num_classes: self.num_classes,
            points_per_scene: self.points_per_scene,
            class_frequency: freq,
            shift: ShiftConfig::default(),
            corruption: CorruptionConfig::default(),
            extent: self.extent,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: AttackKind,
    /// Step intensities swept by `attack`.
    pub alphas: Vec<f64>,
    pub iterations: usize,
    /// PGD budget; omitted means epsilon = alpha per condition.
    pub epsilon: Option<f64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            kind: AttackKind::Pgd,
            alphas: vec![0.03, 0.05, 0.07, 0.10],
            iterations: 10,
            epsilon: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Accept artifacts whose recorded config hash differs.
    pub allow_hash_mismatch: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub title: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            title: "Robustness evaluation".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SceneSection,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("run"),
            scene: SceneSection::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_str_named(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse, validate, and hash a config file.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg = Self::from_str_named(&text, path)?;
        Ok((cfg, config_hash(&text)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scene.num_classes < 2 {
            return Err(ConfigError::Invalid("scene.num_classes must be >= 2".into()));
        }
        if self.scene.source_scenes == 0 || self.scene.target_scenes == 0 {
            return Err(ConfigError::Invalid(
                "scene.source_scenes and scene.target_scenes must be > 0".into(),
            ));
        }
        if !self.scene.class_frequency.is_empty() {
            if self.scene.class_frequency.len() != self.scene.num_classes {
                return Err(ConfigError::Invalid(format!(
                    "scene.class_frequency has {} entries for {} classes",
                    self.scene.class_frequency.len(),
                    self.scene.num_classes
                )));
            }
            let sum: f64 = self.scene.class_frequency.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ConfigError::Invalid(format!(
                    "scene.class_frequency sums to {}, not 1",
                    sum
                )));
            }
        }
        if self.attack.alphas.is_empty() {
            return Err(ConfigError::Invalid("attack.alphas must be nonempty".into()));
        }
        if self.attack.alphas.iter().any(|&a| a <= 0.0) {
            return Err(ConfigError::Invalid(
                "attack.alphas must all be positive".into(),
            ));
        }
        if self.attack.iterations == 0 {
            return Err(ConfigError::Invalid("attack.iterations must be >= 1".into()));
        }
        self.adapt
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// SHA-256 of the raw config bytes, lowercase hex.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}
