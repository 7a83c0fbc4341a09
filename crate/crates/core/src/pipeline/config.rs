//! Dataset manifests and the training configuration file.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::augment::AugPolicy;
use crate::error::{Error, Result};
use crate::io::DistanceUnit;
use crate::model::ModelConfig;
use crate::synth::SceneConfig;
use crate::types::SourceTag;

/// Environment variable overriding the feature cache directory.
pub const CACHE_DIR_ENV: &str = "SELDDE_CACHE_DIR";

/// One WAV + metadata CSV pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub wav: PathBuf,
    pub csv: PathBuf,
    pub source: SourceTag,
}

/// A dataset manifest: a named list of clips, written by the synthesizer
/// and consumed by every downstream stage. Paths are relative to the
/// manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene_config: Option<SceneConfig>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Loads a manifest and resolves entry paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut manifest.entries {
            if entry.wav.is_relative() {
                entry.wav = base.join(&entry.wav);
            }
            if entry.csv.is_relative() {
                entry.csv = base.join(&entry.csv);
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn default_act_threshold() -> f64 {
    0.5
}

fn default_finetune_lr_scale() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_distance_unit() -> DistanceUnit {
    DistanceUnit::Meters
}

/// Full training configuration, stored as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Defaults to 5% of the total training steps when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_synth_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_real_manifest: Option<PathBuf>,
    pub validation_manifest: PathBuf,
    pub model: ModelConfig,
    pub augment: AugPolicy,
    pub checkpoint_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_distance_unit")]
    pub distance_unit: DistanceUnit,
    #[serde(default = "default_act_threshold")]
    pub act_threshold: f64,
    /// Single-stream data loading and fixed reduction order.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_finetune_lr_scale")]
    pub finetune_lr_scale: f64,
    #[serde(default = "default_true")]
    pub standardize_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            finetune_epochs: 50,
            batch_size: 32,
            peak_lr: 5e-4,
            warmup_steps: None,
            seed: 0,
            train_synth_manifest: None,
            train_real_manifest: None,
            validation_manifest: PathBuf::new(),
            model: ModelConfig::default(),
            augment: AugPolicy::default(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            cache_dir: None,
            distance_unit: DistanceUnit::Meters,
            act_threshold: 0.5,
            deterministic: false,
            finetune_lr_scale: 0.1,
            standardize_features: true,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(w) = self.warmup_steps {
            if w == 0 {
                return Err(Error::Config("warmup_steps must be >= 1".into()));
            }
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.act_threshold) || self.act_threshold <= 0.0 {
            return Err(Error::Config("act_threshold must be in (0, 1)".into()));
        }
        if self.train_synth_manifest.is_none() && self.train_real_manifest.is_none() {
            return Err(Error::Config("at least one training manifest is required".into()));
        }
        self.augment.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Cache directory precedence: explicit config, environment variable,
    /// `<checkpoint_dir>/cache`.
    pub fn resolved_cache_dir(&self) -> PathBuf {
        if let Some(dir) = &self.cache_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        self.checkpoint_dir.join("cache")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_resolves_paths() {
        let dir = std::env::temp_dir().join("seldde_manifest_test");
        std::fs::create_dir_all(&dir).unwrap();
        let manifest = Manifest {
            name: "test".into(),
            seed: Some(1),
            scene_config: None,
            entries: vec![ManifestEntry {
                wav: PathBuf::from("a.wav"),
                csv: PathBuf::from("a.csv"),
                source: SourceTag::Synthetic,
            }],
        };
        let path = dir.join("manifest.json");
        manifest.save(&path).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.entries[0].wav, dir.join("a.wav"));
    }

    #[test]
    fn config_defaults_follow_training_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 200);
        assert_eq!(cfg.finetune_epochs, 50);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.peak_lr, 5e-4);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig {
            train_synth_manifest: Some(PathBuf::from("x.json")),
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg2 = TrainConfig::default();
        cfg2.train_synth_manifest = None;
        cfg2.train_real_manifest = None;
        assert!(cfg2.validate().is_err());
    }
}
