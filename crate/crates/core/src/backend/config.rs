use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Denoiser, FeatureTap, PretrainedAdapter, ToyDenoiser};
use crate::backend::toy::ToyOptions;
use crate::error::{Error, Result};
use crate::schedule::{ScheduleKind, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Pretrained,
}

/// Keyed backend profile, read from the `[backend]` table of a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub profile: String,
    pub kind: BackendKind,
    pub latent_height: usize,
    pub latent_width: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
    pub seed: u64,
    pub output_gain: f64,
    pub feature_tap: FeatureTap,
    pub weights: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let s = ScheduleSpec::default();
        BackendConfig {
            profile: "toy".into(),
            kind: BackendKind::Toy,
            latent_height: 16,
            latent_width: 16,
            schedule: s.kind,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            train_steps: s.train_steps,
            seed: 0,
            output_gain: ToyOptions::default().output_gain,
            feature_tap: FeatureTap::BlockOutput,
            weights: None,
        }
    }
}

#[derive(Deserialize)]
struct File {
    backend: BackendConfig,
}

impl BackendConfig {
    /// Built-in profiles: `toy` and `pretrained` (512×512 images).
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(BackendConfig::default()),
            "pretrained" => Ok(BackendConfig {
                profile: "pretrained".into(),
                kind: BackendKind::Pretrained,
                latent_height: 64,
                latent_width: 64,
                ..BackendConfig::default()
            }),
            other => Err(Error::contract(
                "backend_profile",
                format!("unknown profile `{other}`"),
            )),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: File = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        Ok(file.backend)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Accepts either a built-in profile name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.extension().is_some_and(|e| e == "toml") || path.is_file() {
            Self::from_file(path)
        } else {
            Self::named(name_or_path)
        }
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.schedule,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            train_steps: self.train_steps,
        }
    }
}

pub fn load_backend(config: &BackendConfig) -> Result<Arc<dyn Denoiser>> {
    match config.kind {
        BackendKind::Toy => Ok(Arc::new(ToyDenoiser::with_options(ToyOptions {
            seed: config.seed,
            latent_size: (config.latent_height, config.latent_width),
            output_gain: config.output_gain,
            schedule: config.schedule_spec(),
            feature_tap: config.feature_tap,
        })?)),
        BackendKind::Pretrained => Ok(Arc::new(PretrainedAdapter::new(
            (config.latent_height * 8, config.latent_width * 8),
            config.weights.clone(),
        )?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keyed_profile() {
        let cfg = BackendConfig::from_toml(
            r#"
            [backend]
            profile = "toy-small"
            kind = "toy"
            latent_height = 8
            latent_width = 8
            schedule = "linear"
            train_steps = 100
            "#,
        )
        .unwrap();
        assert_eq!(cfg.latent_height, 8);
        assert_eq!(cfg.schedule, ScheduleKind::Linear);
        let backend = load_backend(&cfg).unwrap();
        assert_eq!(backend.profile().latent_shape(), (4, 8, 8));
        assert_eq!(backend.profile().timestep_count_max, 100);
    }

    #[test]
    fn unknown_profile_is_rejected() {
        assert!(BackendConfig::named("sdxl").is_err());
    }
}
