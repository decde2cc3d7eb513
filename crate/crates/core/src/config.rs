//! Robot model files.
//!
//! A model file is TOML with a top-level `schema_version`, a `[robot]` table
//! ([`RobotSpec`]) and an optional `[ik]` table of objective weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ik::IkWeights;
use crate::kinematics::{KinematicsError, RobotModel, RobotSpec};

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_MODEL_TOML: &str = include_str!("../config/gen3_lift.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error(transparent)]
    Model(#[from] KinematicsError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub robot: RobotSpec,
    #[serde(default)]
    pub ik: IkWeights,
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let file: ModelFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: file.schema_version,
            });
        }
        file.ik.validate().map_err(ConfigError::Invalid)?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("model file serializes")
    }

    pub fn model(&self) -> Result<RobotModel, ConfigError> {
        Ok(RobotModel::from_spec(self.robot.clone())?)
    }
}

pub fn default_model_file() -> ModelFile {
    ModelFile::parse(DEFAULT_MODEL_TOML).expect("embedded model file is valid")
}

pub fn default_model() -> RobotModel {
    default_model_file().model().expect("embedded model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_model_round_trips_through_toml() {
        let f = default_model_file();
        let again = ModelFile::parse(&f.to_toml()).unwrap();
        assert_eq!(again.robot, f.robot);
        assert_eq!(again.ik, f.ik);
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let text = DEFAULT_MODEL_TOML.replace("schema_version = 1", "schema_version = 7");
        assert!(matches!(
            ModelFile::parse(&text),
            Err(ConfigError::Schema { found: 7 })
        ));
    }

    #[test]
    fn missing_ik_table_uses_defaults() {
        let f = ModelFile::parse(DEFAULT_MODEL_TOML).unwrap();
        assert_eq!(f.ik, IkWeights::default());
    }
}
